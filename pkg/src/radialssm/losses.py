"""Training objectives and evaluation metrics.

The prior-network objective combines a Charbonnier term, an error-weighted
BCE (the weight map is detached), an L1 restricted to low-intensity
regions, and a penalty-reduced focal loss on the source heatmap.  The main
objective is L1 on both output heads plus a recomposition-consistency term;
the perceptual slot is reserved and always zero.  Metrics are PSNR (plain
and region-masked) and SSIM.

Every loss comes with a hand-written gradient used by training; the
gradients are checked against finite differences of the (detached)
objectives.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numerics
from .numerics import ShapeError
from .synth import blend_scene

CLAMP = 1e-6


@dataclass
class LossReport:
    total: float
    components: dict[str, float]

    @staticmethod
    def from_components(components: dict[str, float]) -> "LossReport":
        return LossReport(total=float(sum(components.values())), components=components)


@dataclass
class EvalMask:
    region: np.ndarray  # HxW, nonzero means active
    kind: str = "full"

    @staticmethod
    def full(shape) -> "EvalMask":
        return EvalMask(np.ones(shape[:2], dtype=bool), "full")


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {gt.shape}")


def charbonnier(pred: np.ndarray, gt: np.ndarray, eps: float = 1e-3) -> float:
    """Mean sqrt(diff^2 + eps^2); floor is eps at an exact match."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _check_shapes(pred, gt)
    return float(np.mean(np.sqrt((pred - gt) ** 2 + eps * eps)))


def charbonnier_grad(pred: np.ndarray, gt: np.ndarray, eps: float = 1e-3):
    _check_shapes(pred, gt)
    diff = pred - gt
    root = np.sqrt(diff * diff + eps * eps)
    value = float(np.mean(root))
    return value, diff / root / diff.size


def weighted_bce_err(pred: np.ndarray, gt: np.ndarray) -> float:
    """BCE scaled by the bounded error map min(1, 4|pred-gt|), detached."""
    _check_shapes(pred, gt)
    p = np.clip(pred, CLAMP, 1.0 - CLAMP)
    w = np.minimum(1.0, 4.0 * np.abs(p - gt))
    bce = -(gt * np.log(p) + (1.0 - gt) * np.log(1.0 - p))
    return float(np.mean(w * bce))


def weighted_bce_err_grad(pred: np.ndarray, gt: np.ndarray):
    # the weight map carries no gradient (stop-gradient); the clamp is
    # numerical protection only and passes the gradient through, so a
    # saturated sigmoid head keeps a bounded logit gradient
    _check_shapes(pred, gt)
    p = np.clip(pred, CLAMP, 1.0 - CLAMP)
    w = np.minimum(1.0, 4.0 * np.abs(p - gt))
    bce = -(gt * np.log(p) + (1.0 - gt) * np.log(1.0 - p))
    value = float(np.mean(w * bce))
    grad = w * (p - gt) / (p * (1.0 - p)) / pred.size
    return value, grad


def weak_region_l1(pred: np.ndarray, gt: np.ndarray, low_thresh: float = 0.15) -> float:
    """Mean absolute error over pixels whose target is below low_thresh."""
    if not 0.0 < low_thresh < 1.0:
        raise ValueError(f"low_thresh must lie in (0,1), got {low_thresh}")
    _check_shapes(pred, gt)
    region = gt < low_thresh
    if not region.any():
        return 0.0
    return float(np.mean(np.abs(pred[region] - gt[region])))


def weak_region_l1_grad(pred: np.ndarray, gt: np.ndarray, low_thresh: float = 0.15):
    _check_shapes(pred, gt)
    region = gt < low_thresh
    grad = np.zeros_like(pred)
    if not region.any():
        return 0.0, grad
    count = int(region.sum())
    diff = pred - gt
    value = float(np.mean(np.abs(diff[region])))
    grad[region] = np.sign(diff[region]) / count
    return value, grad


def focal_heatmap_loss(pred: np.ndarray, gt_heatmap: np.ndarray,
                       alpha: float = 2.0, beta: float = 4.0) -> float:
    """Penalty-reduced focal loss over a keypoint heatmap.

    Pixels with target exactly 1 are positives; everywhere else the penalty
    is down-weighted by (1 - target)^beta, so near-center responses are
    barely punished.  Normalized by the positive count (1 if there are no
    positives).
    """
    value, _ = focal_heatmap_loss_grad(pred, gt_heatmap, alpha, beta)
    return value


def focal_heatmap_loss_grad(pred: np.ndarray, gt_heatmap: np.ndarray,
                            alpha: float = 2.0, beta: float = 4.0):
    _check_shapes(pred, gt_heatmap)
    q = np.clip(pred, CLAMP, 1.0 - CLAMP)
    pos = gt_heatmap == 1.0
    neg = ~pos
    n = max(int(pos.sum()), 1)
    w_neg = (1.0 - gt_heatmap) ** beta
    log_q = np.log(q)
    log_1q = np.log(1.0 - q)
    terms = np.where(pos, (1.0 - q) ** alpha * log_q, w_neg * q ** alpha * log_1q)
    value = float(-terms.sum() / n)
    # clamp passes the gradient through (numerical protection only)
    dpos = -alpha * (1.0 - q) ** (alpha - 1) * log_q + (1.0 - q) ** alpha / q
    dneg = w_neg * (alpha * q ** (alpha - 1) * log_1q - q ** alpha / (1.0 - q))
    grad = np.where(pos, -dpos, -dneg) / n
    return value, grad


def fpn_loss(pred_flare: np.ndarray, gt_flare: np.ndarray,
             pred_heat: np.ndarray, gt_heat: np.ndarray) -> LossReport:
    """Equal-weight sum of the flare-regression terms and the heatmap term."""
    report, _, _ = fpn_loss_grad(pred_flare, gt_flare, pred_heat, gt_heat)
    return report


def fpn_loss_grad(pred_flare, gt_flare, pred_heat, gt_heat):
    char, dchar = charbonnier_grad(pred_flare, gt_flare)
    err, derr = weighted_bce_err_grad(pred_flare, gt_flare)
    weak, dweak = weak_region_l1_grad(pred_flare, gt_flare)
    hm, dhm = focal_heatmap_loss_grad(pred_heat, gt_heat)
    report = LossReport.from_components({"char": char, "err": err, "weak": weak, "hm": hm})
    return report, dchar + derr + dweak, dhm


def main_loss(pred6: np.ndarray, gt_clean: np.ndarray, gt_flare: np.ndarray,
              input_img: np.ndarray) -> LossReport:
    """L1 on the clean and flare heads plus recomposition consistency.

    The six channels split into the flare-free image (0..2) and the pure
    flare image (3..5); clamped addition of the two must reproduce the
    degraded input.  The perceptual slot is reserved and always 0.
    """
    report, _ = main_loss_grad(pred6, gt_clean, gt_flare, input_img)
    return report


def main_loss_grad(pred6: np.ndarray, gt_clean: np.ndarray, gt_flare: np.ndarray,
                   input_img: np.ndarray):
    if pred6.ndim != 3 or pred6.shape[2] != 6:
        raise ShapeError(f"expected HxWx6 prediction, got {pred6.shape}")
    clean = pred6[:, :, :3]
    flare = pred6[:, :, 3:]
    _check_shapes(clean, gt_clean)
    gt_flare3 = gt_flare if gt_flare.ndim == 3 else np.repeat(gt_flare[:, :, None], 3, axis=2)
    _check_shapes(flare, gt_flare3)

    npix = clean.size
    d1 = clean - gt_clean
    d2 = flare - gt_flare3
    l1 = float(np.mean(np.abs(d1)) + np.mean(np.abs(d2)))
    dclean = np.sign(d1) / npix
    dflare = np.sign(d2) / npix

    total = clean + flare
    recomposed = blend_scene(clean, flare, np.zeros_like(clean), 1.0)
    d3 = recomposed - input_img
    rec = float(np.mean(np.abs(d3)))
    open_interval = (total > 0.0) & (total < 1.0)
    drec = np.sign(d3) / d3.size * open_interval
    dclean = dclean + drec
    dflare = dflare + drec

    report = LossReport.from_components({"l1": l1, "vgg_slot": 0.0, "rec": rec})
    return report, np.concatenate([dclean, dflare], axis=2)


# ---------------------------------------------------------------------------
# metrics

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 100 dB."""
    return masked_psnr(a, b, EvalMask.full(a.shape), peak)


def masked_psnr(a: np.ndarray, b: np.ndarray, mask: EvalMask, peak: float = 1.0) -> float:
    _check_shapes(a, b)
    region = np.asarray(mask.region, dtype=bool)
    if region.shape != a.shape[:2]:
        raise ShapeError(f"mask shape {region.shape} != image shape {a.shape[:2]}")
    if not region.any():
        raise ValueError("metric mask has no active pixels")
    if a.ndim == 3:
        diff = (a - b)[region, :]
    else:
        diff = (a - b)[region]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(peak * peak / mse)), PSNR_CAP)


@lru_cache(maxsize=4)
def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity with an 11x11 gaussian window.

    Color inputs are reduced to grayscale by the channel mean; constants
    use the conventional 0.01/0.03 at unit peak.
    """
    _check_shapes(a, b)
    ga = a.mean(axis=2) if a.ndim == 3 else a
    gb = b.mean(axis=2) if b.ndim == 3 else b
    size = 11
    if ga.shape[0] < size or ga.shape[1] < size:
        raise ValueError(f"image {ga.shape} smaller than the {size}x{size} window")
    win = _gaussian_window(size, 1.5)
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2

    def local_mean(img):
        view = sliding_window_view(img, (size, size))
        return np.einsum("hwij,ij->hw", view, win)

    mu_a = local_mean(ga)
    mu_b = local_mean(gb)
    var_a = local_mean(ga * ga) - mu_a * mu_a
    var_b = local_mean(gb * gb) - mu_b * mu_b
    cov = local_mean(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck_suite(seed: int = 0) -> list[numerics.VjpReport]:
    """Finite-difference checks for every training-path loss gradient.

    The error-weighted BCE is checked against its detached objective, which
    is what the finite differences of the loss itself evaluate since the
    weight map is treated as a constant."""
    rng = np.random.default_rng(seed)
    reports = []
    pred = rng.uniform(0.1, 0.9, size=(6, 7))
    gt = rng.uniform(0.0, 1.0, size=(6, 7))

    reports.append(numerics.vjp_check(
        "charbonnier",
        lambda p: np.asarray(charbonnier(p, gt)),
        lambda up, p: (charbonnier_grad(p, gt)[1] * up,),
        [pred], ["pred"], seed=seed))

    w_det = np.minimum(1.0, 4.0 * np.abs(np.clip(pred, CLAMP, 1 - CLAMP) - gt))

    def bce_detached(p):
        pc = np.clip(p, CLAMP, 1.0 - CLAMP)
        return np.asarray(np.mean(w_det * -(gt * np.log(pc) + (1 - gt) * np.log(1 - pc))))

    reports.append(numerics.vjp_check(
        "weighted_bce_err(detached)",
        bce_detached,
        lambda up, p: (weighted_bce_err_grad(p, gt)[1] * up,),
        [pred], ["pred"], seed=seed))

    reports.append(numerics.vjp_check(
        "weak_region_l1",
        lambda p: np.asarray(weak_region_l1(p, gt)),
        lambda up, p: (weak_region_l1_grad(p, gt)[1] * up,),
        [pred], ["pred"], seed=seed))

    heat = np.zeros((6, 7))
    heat[2, 3] = 1.0
    heat[4, 5] = 0.6
    reports.append(numerics.vjp_check(
        "focal_heatmap_loss",
        lambda p: np.asarray(focal_heatmap_loss(p, heat)),
        lambda up, p: (focal_heatmap_loss_grad(p, heat)[1] * up,),
        [pred], ["pred"], seed=seed))

    pred6 = rng.uniform(0.15, 0.45, size=(6, 7, 6))
    gt_clean = rng.uniform(0.0, 1.0, size=(6, 7, 3))
    gt_flare = rng.uniform(0.0, 1.0, size=(6, 7))
    inp = rng.uniform(0.0, 1.0, size=(6, 7, 3))
    reports.append(numerics.vjp_check(
        "main_loss",
        lambda p: np.asarray(main_loss(p, gt_clean, gt_flare, inp).total),
        lambda up, p: (main_loss_grad(p, gt_clean, gt_flare, inp)[1] * up,),
        [pred6], ["pred6"], seed=seed))
    return reports
