"""Two-stage training at desk scale, checkpointing, and evaluation.

Stage one fits the prior network on synthetic scenes; stage two freezes it
bit-for-bit and fits the main network under its inferred priors.  Batch
size is 1; the learning rate is halved at the midpoint iteration.  All
randomness flows through a serializable generator so a resumed run
reproduces the uninterrupted one exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio, losses, models, synth
from .geometry import PriorBundle
from .layers import Param
from .losses import EvalMask, LossReport, masked_psnr, psnr, ssim
from .models import FpnModel, MainModel, apply_ablation, fpn_infer_priors


def adam_step(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected adaptive-moment update, in place; t is 1-based."""
    if value.shape != grad.shape:
        raise ValueError(f"value/grad shape mismatch: {value.shape} vs {grad.shape}")
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(value.dtype)
    return value


class Adam:
    def __init__(self, params: dict[str, Param], lr: float = 1e-2,
                 betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float = 1.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        rate = self.lr if lr is None else lr
        if self.clip_norm:
            total = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                                for p in self.params.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                for p in self.params.values():
                    p.grad *= scale
        for name, p in self.params.items():
            adam_step(p.value, p.grad, self.m[name], self.v[name],
                      self.t, rate, self.betas, self.eps)


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state_to_limbs(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    limbs = []
    for v in (st["state"]["state"], st["state"]["inc"]):
        limbs.extend(float((v >> (32 * k)) & 0xFFFFFFFF) for k in range(4))
    limbs.append(float(int(st["has_uint32"])))
    u = int(st["uinteger"])
    limbs.append(float(u & 0xFFFFFFFF))
    limbs.append(float((u >> 32) & 0xFFFFFFFF))
    return np.array(limbs, dtype=np.float64)


def _rng_state_from_limbs(limbs: np.ndarray) -> np.random.Generator:
    vals = [int(x) for x in limbs]
    state = sum(vals[k] << (32 * k) for k in range(4))
    inc = sum(vals[4 + k] << (32 * k) for k in range(4))
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": vals[8],
        "uinteger": vals[9] | (vals[10] << 32),
    }
    return rng


def save_checkpoint(path, iteration: int, params: dict[str, np.ndarray],
                    adam_m: dict[str, np.ndarray] | None = None,
                    adam_v: dict[str, np.ndarray] | None = None,
                    adam_t: int = 0, rng: np.random.Generator | None = None,
                    meta: dict[str, np.ndarray] | None = None) -> None:
    """Text header ``CKPT1 <iter>`` then named DAT1 blocks (parameters,
    optimizer moments, RNG state, numeric metadata).  Round-trips
    bit-identically."""
    blocks: list[tuple[str, np.ndarray]] = []
    for name in sorted(params):
        blocks.append((f"param/{name}", params[name]))
    for tag, moments in (("adam_m", adam_m), ("adam_v", adam_v)):
        if moments is not None:
            for name in sorted(moments):
                blocks.append((f"{tag}/{name}", moments[name]))
    if meta is not None:
        for name in sorted(meta):
            blocks.append((f"meta/{name}", np.asarray(meta[name], dtype=np.float64)))
    blocks.append(("adam_t", np.array([float(adam_t)], dtype=np.float64)))
    if rng is not None:
        blocks.append(("rng_state", _rng_state_to_limbs(rng)))
    parts = [f"CKPT1 {iteration}\n".encode("ascii"),
             f"blocks {len(blocks)}\n".encode("ascii")]
    for name, arr in blocks:
        parts.append(f"name {name}\n".encode("ascii"))
        parts.append(fileio.dat_bytes(np.asarray(arr)))
    Path(path).write_bytes(b"".join(parts))


@dataclass
class Checkpoint:
    iteration: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    rng: np.random.Generator | None
    meta: dict[str, np.ndarray]


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    nl = buf.index(b"\n")
    head = buf[:nl].decode("ascii").split()
    if head[0] != "CKPT1":
        raise ValueError(f"{path} is not a CKPT1 checkpoint")
    iteration = int(head[1])
    pos = nl + 1
    nl2 = buf.index(b"\n", pos)
    n_blocks = int(buf[pos:nl2].decode("ascii").split()[1])
    pos = nl2 + 1
    params, adam_m, adam_v, meta = {}, {}, {}, {}
    adam_t, rng = 0, None
    for _ in range(n_blocks):
        nl3 = buf.index(b"\n", pos)
        name = buf[pos:nl3].decode("ascii").split(" ", 1)[1]
        pos = nl3 + 1
        arr, used = fileio.parse_dat(buf[pos:])
        pos += used
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("adam_m/"):
            adam_m[name[len("adam_m/"):]] = arr
        elif name.startswith("adam_v/"):
            adam_v[name[len("adam_v/"):]] = arr
        elif name.startswith("meta/"):
            meta[name[len("meta/"):]] = arr
        elif name == "adam_t":
            adam_t = int(arr[0])
        elif name == "rng_state":
            rng = _rng_state_from_limbs(arr)
    return Checkpoint(iteration, params, adam_m, adam_v, adam_t, rng, meta)


def save_fpn_checkpoint(path, model: FpnModel, opt: Adam | None, rng, iteration: int) -> None:
    cfg = model.config
    save_checkpoint(path, iteration, model.get_param_values(),
                    opt.m if opt else None, opt.v if opt else None,
                    opt.t if opt else 0, rng,
                    meta={"fpn_config": np.array([cfg.base_channels, cfg.levels,
                                                  cfg.freq_bands, cfg.axial_length])})


def load_fpn_model(path) -> tuple[FpnModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    if "fpn_config" not in ckpt.meta:
        raise ValueError(f"{path} is not a prior-network checkpoint")
    bc, lv, fb, al = (int(v) for v in ckpt.meta["fpn_config"])
    model = FpnModel(models.FpnConfig(bc, lv, fb, al))
    model.set_param_values(ckpt.params)
    return model, ckpt


def save_main_checkpoint(path, model: MainModel, opt: Adam | None, rng, iteration: int) -> None:
    cfg = model.config
    save_checkpoint(path, iteration, model.get_param_values(),
                    opt.m if opt else None, opt.v if opt else None,
                    opt.t if opt else 0, rng,
                    meta={"main_config": np.array([cfg.groups, cfg.blocks_per_group,
                                                   cfg.channels, cfg.d_state, cfg.chunk])})


def load_main_model(path) -> tuple[MainModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    if "main_config" not in ckpt.meta:
        raise ValueError(f"{path} is not a main-network checkpoint")
    g, bpg, ch, ds, chunk = (int(v) for v in ckpt.meta["main_config"])
    model = MainModel(models.MainConfig(g, bpg, ch, ds, chunk))
    model.set_param_values(ckpt.params)
    return model, ckpt


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Record:
    index: int
    seed: int
    background: np.ndarray
    flare: np.ndarray
    light: np.ndarray
    input: np.ndarray
    heatmap: np.ndarray
    mask: np.ndarray
    gt_clean: np.ndarray
    sources: np.ndarray
    glare_mask: np.ndarray | None
    streak_mask: np.ndarray | None


class ToyDataset:
    """Loads a synthesized manifest eagerly; derives the flare-free target
    from the stored fields plus the per-seed gamma draw."""

    def __init__(self, manifest_path, config: synth.SynthConfig | None = None):
        self.manifest_path = Path(manifest_path)
        if not self.manifest_path.exists():
            raise ValueError(f"dataset manifest not found: {manifest_path}")
        config = config or synth.SynthConfig()
        base = self.manifest_path.parent
        self.records: list[Record] = []
        for index, seed, paths in fileio.load_manifest(self.manifest_path):
            arrays = [fileio.load_dat(p).astype(np.float32) for p in paths]
            background, flare, light, inp, heatmap, mask = arrays
            gamma = synth.sample_gamma(seed, config)
            gt_clean = synth.blend_scene(
                background.astype(np.float64), np.zeros_like(light, dtype=np.float64),
                light.astype(np.float64), gamma).astype(np.float32)
            src_path = base / f"sample_{index:04d}" / "sources.txt"
            centers = fileio.load_sources(src_path)[0] if src_path.exists() \
                else np.zeros((0, 2))
            gmask_path = base / "region_masks" / f"glare_{index:04d}.dat"
            smask_path = base / "region_masks" / f"streak_{index:04d}.dat"
            self.records.append(Record(
                index=index, seed=seed, background=background, flare=flare,
                light=light, input=inp, heatmap=heatmap, mask=mask,
                gt_clean=gt_clean, sources=centers,
                glare_mask=fileio.load_dat(gmask_path) if gmask_path.exists() else None,
                streak_mask=fileio.load_dat(smask_path) if smask_path.exists() else None,
            ))

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int) -> Record:
        return self.records[idx]


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    history: list[tuple[int, LossReport]]

    def totals(self) -> list[float]:
        return [rep.total for _, rep in self.history]

    def smoothed_endpoints(self, window: int = 50) -> tuple[float, float]:
        totals = self.totals()
        window = min(window, max(len(totals) // 2, 1))
        return float(np.mean(totals[:window])), float(np.mean(totals[-window:]))


def _schedule(lr: float, iteration: int, total: int) -> float:
    return lr * 0.5 if iteration >= total // 2 else lr


def train_fpn(dataset: ToyDataset, iterations: int, lr: float = 1e-2, seed: int = 0,
              model: FpnModel | None = None, resume: Checkpoint | None = None,
              fpn_config: models.FpnConfig | None = None,
              stop_at: int | None = None) -> tuple[FpnModel, Adam, np.random.Generator, TrainResult]:
    """Stage one: fit the contamination and heatmap heads.

    ``iterations`` fixes the schedule horizon (the rate is halved at its
    midpoint); ``stop_at`` optionally pauses earlier so the run can be
    checkpointed and resumed without perturbing the schedule."""
    model = model or FpnModel(fpn_config, seed=seed)
    opt = Adam(model.params(), lr=lr)
    rng = np.random.default_rng(seed)
    start = 0
    if resume is not None:
        model.set_param_values(resume.params)
        for k in opt.m:
            opt.m[k][...] = resume.adam_m[k]
            opt.v[k][...] = resume.adam_v[k]
        opt.t = resume.adam_t
        rng = resume.rng
        start = resume.iteration
    history = []
    for it in range(start, iterations if stop_at is None else stop_at):
        rec = dataset[int(rng.integers(len(dataset)))]
        pred_flare, pred_heat = model.forward(rec.input)
        report, dflare, dheat = losses.fpn_loss_grad(
            pred_flare, rec.flare, pred_heat, rec.heatmap)
        model.zero_grads()
        model.backward(dflare.astype(model.dtype), dheat.astype(model.dtype))
        opt.step(_schedule(lr, it, iterations))
        history.append((it, report))
    return model, opt, rng, TrainResult(history)


def train_main(dataset: ToyDataset, fpn_model: FpnModel | None, iterations: int,
               lr: float = 1e-2, seed: int = 0, model: MainModel | None = None,
               resume: Checkpoint | None = None,
               main_config: models.MainConfig | None = None,
               stop_at: int | None = None) -> tuple[MainModel, Adam, np.random.Generator, TrainResult]:
    """Stage two: freeze the prior network and fit the main network.

    The prior network only runs inference here; its parameters receive no
    updates and stay bit-identical.
    """
    if fpn_model is None:
        raise ValueError("main training requires a trained prior-network checkpoint")
    model = model or MainModel(main_config, seed=seed)
    fpn_before = {k: v.copy() for k, v in fpn_model.get_param_values().items()}
    bundles = [fpn_infer_priors(fpn_model, rec.input, levels=model.levels)
               for rec in dataset.records]
    opt = Adam(model.params(), lr=lr)
    rng = np.random.default_rng(seed)
    start = 0
    if resume is not None:
        model.set_param_values(resume.params)
        for k in opt.m:
            opt.m[k][...] = resume.adam_m[k]
            opt.v[k][...] = resume.adam_v[k]
        opt.t = resume.adam_t
        rng = resume.rng
        start = resume.iteration
    history = []
    for it in range(start, iterations if stop_at is None else stop_at):
        idx = int(rng.integers(len(dataset)))
        rec = dataset[idx]
        clean, flare = model.forward(rec.input, bundles[idx])
        report, dpred6 = losses.main_loss_grad(
            np.concatenate([clean, flare], axis=2), rec.gt_clean, rec.flare, rec.input)
        model.zero_grads()
        model.backward(dpred6.astype(model.dtype))
        opt.step(_schedule(lr, it, iterations))
        history.append((it, report))
    for k, v in fpn_model.get_param_values().items():
        if not np.array_equal(v, fpn_before[k]):
            raise AssertionError(f"frozen prior-network parameter {k} changed during training")
    return model, opt, rng, TrainResult(history)


# ---------------------------------------------------------------------------
# evaluation


def _nan_or(metric_fn, *args) -> float:
    try:
        return metric_fn(*args)
    except ValueError:
        return float("nan")


def evaluate(main_model: MainModel | None, fpn_model: FpnModel | None,
             dataset: ToyDataset, identity: bool = False,
             disable_unfold: bool = False, disable_hb: bool = False,
             disable_rse: bool = False) -> list[dict]:
    """Per-sample metric rows; ``identity`` scores the input itself."""
    rows = []
    for rec in dataset.records:
        if identity or main_model is None:
            pred_clean = rec.input.copy()
        else:
            if fpn_model is not None:
                bundle = fpn_infer_priors(fpn_model, rec.input, levels=main_model.levels)
            else:
                bundle = PriorBundle.empty()
            bundle = apply_ablation(bundle, disable_unfold, disable_hb, disable_rse)
            clean, _ = main_model.forward(rec.input, bundle)
            pred_clean = np.clip(clean, 0.0, 1.0)
        gt = rec.gt_clean
        light_mask = EvalMask(rec.mask > 0.5, "light")
        clean_mask = EvalMask((rec.flare < 0.02) & (rec.light < 1e-6), "clean")
        row = {
            "sample": rec.index,
            "psnr": psnr(pred_clean, gt),
            "ssim": ssim(pred_clean, gt),
            "light_psnr": _nan_or(masked_psnr, pred_clean, gt, light_mask),
            "clean_psnr": _nan_or(masked_psnr, pred_clean, gt, clean_mask),
            "g_psnr": float("nan"),
            "s_psnr": float("nan"),
            "psnr_identity": psnr(rec.input, gt),
            "pred_clean": pred_clean,
        }
        if rec.glare_mask is not None and rec.glare_mask.any():
            row["g_psnr"] = _nan_or(masked_psnr, pred_clean, gt,
                                    EvalMask(rec.glare_mask > 0.5, "glare"))
        if rec.streak_mask is not None and rec.streak_mask.any():
            row["s_psnr"] = _nan_or(masked_psnr, pred_clean, gt,
                                    EvalMask(rec.streak_mask > 0.5, "streak"))
        rows.append(row)
    return rows


def detection_stats(fpn_model: FpnModel, dataset: ToyDataset, tol_px: float = 2.0,
                    tau: float = 0.5, window: int = 3) -> dict:
    """Fraction of ground-truth sources matched by a detected peak within
    tol_px, plus the false-positive count."""
    matched = total = extra = 0
    for rec in dataset.records:
        _, heat = fpn_model.forward(rec.input)
        from .geometry import nms_peaks
        peaks = nms_peaks(heat.astype(np.float64), tau, window)
        used = set()
        for gx, gy in rec.sources:
            total += 1
            best, best_j = np.inf, -1
            for j in range(peaks.count):
                if j in used:
                    continue
                d = float(np.hypot(peaks.centers[j, 0] - gx, peaks.centers[j, 1] - gy))
                if d < best:
                    best, best_j = d, j
            if best <= tol_px:
                matched += 1
                used.add(best_j)
        extra += max(0, peaks.count - len(used))
    rate = matched / total if total else 0.0
    return {"matched": matched, "total": total, "rate": rate, "false_positives": extra}


def bench_throughput_warning(rows: list[dict], target: float = 1.5) -> None:
    for row in rows:
        if row["length"] >= 16384 and row["speedup"] < target:
            warnings.warn(
                f"chunked scan speedup {row['speedup']:.2f}x below the {target}x "
                f"target at L={row['length']} (performance, not correctness)")
