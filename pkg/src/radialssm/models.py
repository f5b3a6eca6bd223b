"""The two toy networks and the prior-extraction path between them.

The prior network is a small hierarchical conv encoder with frequency-band
enhancement and axial line-capture convolutions, feeding two sigmoid heads:
a continuous contamination map and a source-probability heatmap.  The main
network is a U-shaped stack of scan groups; every group receives the priors
downsampled to its scale.  Both networks carry explicit hand-written
backward passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics
from .geometry import PriorBundle, downsample_priors, nms_peaks, threshold_mask
from .layers import AvgPool2, AxialConv, Conv2d, FreqEnhance, Param, Relu, RssmBlock, \
    Sigmoid, Upsample2, collect_params


class Sequential:
    def __init__(self, named_layers):
        self.named_layers = list(named_layers)

    def forward(self, x):
        for _, layer in self.named_layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for _, layer in reversed(self.named_layers):
            dy = layer.backward(dy)
        return dy


class ModelBase:
    dtype = np.float32

    def named_layers(self):
        raise NotImplementedError

    def params(self) -> dict[str, Param]:
        return collect_params(self.named_layers())

    def zero_grads(self) -> None:
        for p in self.params().values():
            p.grad[...] = 0

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params().values())

    def get_param_values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params().items()}

    def set_param_values(self, values: dict[str, np.ndarray]) -> None:
        params = self.params()
        for name, arr in values.items():
            if name not in params:
                raise KeyError(f"unknown parameter {name!r}")
            if params[name].value.shape != arr.shape:
                raise ValueError(f"parameter {name!r} shape mismatch: "
                                 f"{params[name].value.shape} vs {arr.shape}")
            params[name].value[...] = arr.astype(params[name].value.dtype)


# ---------------------------------------------------------------------------
# prior network


@dataclass
class FpnConfig:
    base_channels: int = 8
    levels: int = 3
    freq_bands: int = 4
    axial_length: int = 5


def _head_bias_init(prob: float = 0.1) -> float:
    # start the sigmoid heads near a low probability so the focal loss is
    # not swamped by the negative class
    return float(math.log(prob / (1.0 - prob)))


class FpnModel(ModelBase):
    """Hierarchical encoder with a contamination head and a heatmap head."""

    def __init__(self, config: FpnConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or FpnConfig()
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c = self.config.base_channels
        self.stem = Sequential([("conv", Conv2d(3, c, 3, rng, dtype=dtype)), ("relu", Relu())])
        self.blocks = []
        self.pools = []
        for lvl in range(self.config.levels):
            block = Sequential([
                ("conv", Conv2d(c, c, 3, rng, dtype=dtype)),
                ("relu", Relu()),
                ("freq", FreqEnhance(self.config.freq_bands, dtype=dtype)),
                ("axh", AxialConv(c, self.config.axial_length, "horizontal", rng, dtype=dtype)),
                ("relu_h", Relu()),
                ("axv", AxialConv(c, self.config.axial_length, "vertical", rng, dtype=dtype)),
                ("relu_v", Relu()),
            ])
            self.blocks.append(block)
            if lvl < self.config.levels - 1:
                self.pools.append(AvgPool2())
        self.heads = {}
        for head in ("flare", "light"):
            ups, convs = [], []
            for _ in range(self.config.levels - 1):
                ups.append(Upsample2())
                convs.append(Sequential([("conv", Conv2d(c, c, 3, rng, dtype=dtype)),
                                         ("relu", Relu())]))
            final = Conv2d(c, 1, 3, rng, dtype=dtype, bias_init=_head_bias_init())
            self.heads[head] = {"ups": ups, "convs": convs, "final": final, "out": Sigmoid()}

    def named_layers(self):
        out = list(self.stem.named_layers)
        out = [("stem." + n, l) for n, l in out]
        for i, block in enumerate(self.blocks):
            out += [(f"enc{i}.{n}", l) for n, l in block.named_layers]
        for head_name, head in self.heads.items():
            for j, conv in enumerate(head["convs"]):
                out += [(f"{head_name}.up{j}.{n}", l) for n, l in conv.named_layers]
            out.append((f"{head_name}.final", head["final"]))
        return out

    def forward(self, image_hwc: np.ndarray):
        """image (H,W,3 in [0,1]) -> (contamination map, heatmap), both HxW in [0,1]."""
        h, w = image_hwc.shape[:2]
        div = 1 << self.config.levels
        if h % div or w % div:
            raise ValueError(f"extents {h}x{w} must be divisible by {div}")
        x = np.ascontiguousarray(image_hwc.transpose(2, 0, 1)[None]).astype(self.dtype)
        x = self.stem.forward(x)
        feats = []
        for lvl in range(self.config.levels):
            x = self.blocks[lvl].forward(x)
            feats.append(x)
            if lvl < self.config.levels - 1:
                x = self.pools[lvl].forward(x)
        self._feats = feats
        outputs = {}
        for head_name, head in self.heads.items():
            hfeat = feats[-1]
            for j, lvl in enumerate(range(self.config.levels - 2, -1, -1)):
                hfeat = head["ups"][j].forward(hfeat)
                hfeat = hfeat + feats[lvl]
                hfeat = head["convs"][j].forward(hfeat)
            logits = head["final"].forward(hfeat)
            outputs[head_name] = head["out"].forward(logits)
        return outputs["flare"][0, 0], outputs["light"][0, 0]

    def backward(self, dflare: np.ndarray, dheat: np.ndarray) -> None:
        dfeats = [np.zeros_like(f) for f in self._feats]
        for head_name, dup in (("flare", dflare), ("light", dheat)):
            head = self.heads[head_name]
            dy = head["out"].backward(dup[None, None].astype(self.dtype))
            dh = head["final"].backward(dy)
            levels_visited = list(range(self.config.levels - 2, -1, -1))
            for j in reversed(range(len(levels_visited))):
                lvl = levels_visited[j]
                dh = head["convs"][j].backward(dh)
                dfeats[lvl] += dh
                dh = head["ups"][j].backward(dh)
            dfeats[-1] += dh
        dx = dfeats[-1]
        for lvl in range(self.config.levels - 1, -1, -1):
            dx = self.blocks[lvl].backward(dx)
            if lvl > 0:
                dx = self.pools[lvl - 1].backward(dx)
                dx = dx + dfeats[lvl - 1]
        self.stem.backward(dx)


def build_prior_bundle(flare_map: np.ndarray, heat_map: np.ndarray, tau: float = 0.5,
                       window: int = 3, levels: int = 3) -> PriorBundle:
    """Turn the two head outputs into the guidance bundle.

    The mask thresholds the heatmap; peaks come from local-max suppression;
    the contamination map is clamped up to 1 inside the mask (source pixels
    count as maximally contaminated), then everything is downsampled."""
    p_mask = threshold_mask(heat_map, tau)
    p_position = nms_peaks(heat_map.astype(np.float64), tau, window)
    p_flare = np.maximum(flare_map, p_mask)
    bundle = PriorBundle(p_flare=p_flare, p_mask=p_mask, p_position=p_position)
    return downsample_priors(bundle, levels)


def fpn_infer_priors(model: FpnModel, image_hwc: np.ndarray, tau: float = 0.5,
                     window: int = 3, levels: int = 3) -> PriorBundle:
    flare_map, heat_map = model.forward(image_hwc)
    return build_prior_bundle(flare_map, heat_map, tau, window, levels)


def bundle_from_ground_truth(flare: np.ndarray, mask: np.ndarray, sources,
                             levels: int) -> PriorBundle:
    """Oracle bundle straight from synthesis targets (no prior network)."""
    from .geometry import SourceSet
    pos = sources if isinstance(sources, SourceSet) else SourceSet(sources, np.ones(len(sources)))
    return downsample_priors(PriorBundle(flare.copy(), mask.copy(), pos), levels)


def apply_ablation(bundle: PriorBundle, disable_unfold: bool = False,
                   disable_hb: bool = False, disable_rse: bool = False) -> PriorBundle:
    """Feed the targeted mechanisms an empty prior so they fall back to
    raster order / no bypass / unit excitation."""
    return PriorBundle(
        p_flare=None if disable_rse else bundle.p_flare,
        p_mask=None if disable_hb else bundle.p_mask,
        p_position=None if disable_unfold else bundle.p_position,
        per_scale=[apply_ablation(s, disable_unfold, disable_hb, disable_rse)
                   for s in bundle.per_scale],
    )


# ---------------------------------------------------------------------------
# main network


@dataclass
class MainConfig:
    groups: int = 3          # odd: encoder levels + bottleneck + decoder levels
    blocks_per_group: int = 2
    channels: int = 8
    d_state: int = 4
    chunk: int = 64

    @property
    def levels(self) -> int:
        if self.groups < 1 or self.groups % 2 == 0:
            raise ValueError(f"groups must be odd and >= 1, got {self.groups}")
        return (self.groups - 1) // 2


class MainModel(ModelBase):
    """U-shaped restoration network built from scan groups.

    Encoder and decoder are symmetric with additive skips; the terminal conv
    projects to six channels holding the flare-free and pure-flare heads."""

    def __init__(self, config: MainConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or MainConfig()
        self.dtype = dtype
        self.levels = self.config.levels
        rng = np.random.default_rng(seed)
        c = self.config.channels

        def make_group():
            return [RssmBlock(c, self.config.d_state, rng, dtype=dtype,
                              chunk=self.config.chunk)
                    for _ in range(self.config.blocks_per_group)]

        self.stem = Conv2d(3, c, 3, rng, dtype=dtype)
        self.enc_groups = [make_group() for _ in range(self.levels)]
        self.downs = [Conv2d(c, c, 3, rng, stride=2, dtype=dtype) for _ in range(self.levels)]
        self.bottleneck = make_group()
        self.ups = [Upsample2() for _ in range(self.levels)]
        self.up_convs = [Conv2d(c, c, 3, rng, dtype=dtype) for _ in range(self.levels)]
        self.dec_groups = [make_group() for _ in range(self.levels)]
        self.terminal = Conv2d(c, 6, 3, rng, dtype=dtype, init_scale=0.01)

    def named_layers(self):
        out = [("stem", self.stem)]
        for l, group in enumerate(self.enc_groups):
            out += [(f"enc{l}.b{i}", blk) for i, blk in enumerate(group)]
            out.append((f"down{l}", self.downs[l]))
        out += [(f"bot.b{i}", blk) for i, blk in enumerate(self.bottleneck)]
        for l in range(self.levels):
            out.append((f"upconv{l}", self.up_convs[l]))
            out += [(f"dec{l}.b{i}", blk) for i, blk in enumerate(self.dec_groups[l])]
        out.append(("terminal", self.terminal))
        return out

    def forward(self, image_hwc: np.ndarray, bundle: PriorBundle | None = None):
        """image (H,W,3) -> (pred_clean, pred_flare), each (H,W,3), unclamped."""
        bundle = bundle if bundle is not None else PriorBundle.empty()
        h, w = image_hwc.shape[:2]
        div = 1 << self.levels
        if h % div or w % div:
            raise ValueError(f"extents {h}x{w} must be divisible by {div}")
        scales = [bundle.at_scale(l) for l in range(self.levels + 1)]
        x = self.stem.forward(np.ascontiguousarray(
            image_hwc.transpose(2, 0, 1)[None]).astype(self.dtype))
        skips = []
        for l in range(self.levels):
            for blk in self.enc_groups[l]:
                x = blk.forward(x, scales[l])
            skips.append(x)
            x = self.downs[l].forward(x)
        for blk in self.bottleneck:
            x = blk.forward(x, scales[self.levels])
        for l in range(self.levels - 1, -1, -1):
            x = self.ups[l].forward(x)
            x = self.up_convs[l].forward(x)
            x = x + skips[l]
            for blk in self.dec_groups[l]:
                x = blk.forward(x, scales[l])
        out = self.terminal.forward(x)
        pred6 = np.ascontiguousarray(out[0].transpose(1, 2, 0))
        return pred6[:, :, :3], pred6[:, :, 3:]

    def backward(self, dpred6_hwc: np.ndarray) -> None:
        dout = np.ascontiguousarray(dpred6_hwc.transpose(2, 0, 1)[None]).astype(self.dtype)
        dx = self.terminal.backward(dout)
        dskips = [None] * self.levels
        for l in range(self.levels):
            for blk in reversed(self.dec_groups[l]):
                dx = blk.backward(dx)
            dskips[l] = dx
            dx = self.up_convs[l].backward(dx)
            dx = self.ups[l].backward(dx)
        for blk in reversed(self.bottleneck):
            dx = blk.backward(dx)
        for l in range(self.levels - 1, -1, -1):
            dx = self.downs[l].backward(dx)
            dx = dx + dskips[l]
            for blk in reversed(self.enc_groups[l]):
                dx = blk.backward(dx)
        self.stem.backward(dx)


def main_forward(model: MainModel, image_hwc: np.ndarray, bundle: PriorBundle | None):
    return model.forward(image_hwc, bundle)


# ---------------------------------------------------------------------------
# end-to-end gradient verification


def directional_gradient_check(seed: int = 3, height: int = 16, width: int = 16,
                               step: float = 1e-5) -> dict:
    """Directional finite-difference check of the whole main-network gradient
    at float64 on a synthetic scene with oracle priors."""
    from . import losses, synth

    cfg = synth.SynthConfig(height=height, width=width, min_sources=1, max_sources=1)
    sample = synth.make_sample(seed, cfg)
    gt_clean = synth.clean_ground_truth(sample)
    model = MainModel(MainConfig(groups=3, channels=4, d_state=4, chunk=16),
                      seed=seed, dtype=np.float64)
    params = model.params()
    params["terminal.bias"].value[:] = 0.2  # keep head sums inside the clamp interval
    bundle = bundle_from_ground_truth(sample.flare_composite, sample.mask_gt,
                                      sample.sources_gt, model.levels)

    def loss_value() -> float:
        clean, flare = model.forward(sample.input, bundle)
        report = losses.main_loss(np.concatenate([clean, flare], axis=2),
                                  gt_clean, sample.flare_composite, sample.input)
        return report.total

    clean, flare = model.forward(sample.input, bundle)
    report, dpred6 = losses.main_loss_grad(np.concatenate([clean, flare], axis=2),
                                           gt_clean, sample.flare_composite, sample.input)
    model.zero_grads()
    model.backward(dpred6)
    names = sorted(params)
    grad_vec = np.concatenate([params[n].grad.ravel() for n in names])

    rng = np.random.default_rng(seed + 1)
    direction = rng.standard_normal(grad_vec.shape)
    direction /= np.linalg.norm(direction)
    offset = 0
    saved = {n: params[n].value.copy() for n in names}

    def nudge(sign: float) -> None:
        pos = 0
        for n in names:
            size = params[n].value.size
            d = direction[pos:pos + size].reshape(params[n].value.shape)
            params[n].value[...] = saved[n] + sign * step * d
            pos += size

    nudge(+1.0)
    f_plus = loss_value()
    nudge(-1.0)
    f_minus = loss_value()
    for n in names:
        params[n].value[...] = saved[n]
    _ = offset
    fd = (f_plus - f_minus) / (2.0 * step)
    analytic = float(grad_vec @ direction)
    rel_err = abs(analytic - fd) / (abs(fd) + 1e-12)
    return {"analytic": analytic, "finite_difference": fd, "rel_err": rel_err,
            "loss": report.total}
