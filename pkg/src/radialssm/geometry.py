"""Geometric prior machinery.

Distance fields to the nearest light source, the radial serialization plan
(visit pixels in order of decreasing distance), Gaussian keypoint heatmaps,
peak extraction, mask thresholding, and per-scale prior preparation.

Coordinates are (x, y) = (column, row) in pixels.  With no sources the
distance field is filled with a large finite sentinel so the plan degrades
to plain raster order and downstream code needs no special casing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics

INF_SENTINEL = float(np.finfo(np.float64).max)


@dataclass(frozen=True)
class SourceSet:
    """Detected light source centers with confidences."""

    centers: np.ndarray      # (K, 2) float, columns (x, y)
    confidences: np.ndarray  # (K,)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "confidences",
                           np.asarray(self.confidences, dtype=np.float64).reshape(-1))
        if self.centers.shape[0] != self.confidences.shape[0]:
            raise ValueError("centers and confidences must have equal length")

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    @staticmethod
    def empty() -> "SourceSet":
        return SourceSet(np.zeros((0, 2)), np.zeros(0))


@dataclass(frozen=True)
class RadialPlan:
    """Permutation over the L = H*W flat pixel indices and its inverse."""

    forward: np.ndarray
    inverse: np.ndarray
    height: int
    width: int

    @property
    def length(self) -> int:
        return self.forward.shape[0]


def compute_distance_map(sources: SourceSet, height: int, width: int) -> np.ndarray:
    """Per-pixel Euclidean distance to the nearest source center.

    Sub-pixel centers are rounded to the integer grid first.  An empty
    source set yields the all-sentinel field.
    """
    if sources.count == 0:
        return np.full((height, width), INF_SENTINEL, dtype=np.float64)
    cx = np.rint(sources.centers[:, 0])
    cy = np.rint(sources.centers[:, 1])
    if np.any(cx < 0) or np.any(cx > width - 1) or np.any(cy < 0) or np.any(cy > height - 1):
        raise ValueError(f"source center outside {width}x{height} image: "
                         f"{sources.centers.tolist()}")
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    dist = np.full((height, width), np.inf, dtype=np.float64)
    for k in range(sources.count):
        dx = xx - cx[k]
        dy = yy - cy[k]
        dist = np.minimum(dist, np.sqrt(dx * dx + dy * dy))
    return dist


def build_radial_plan(dist: np.ndarray) -> RadialPlan:
    """Order flat pixel indices by non-increasing distance, raster-first on ties."""
    h, w = dist.shape
    flat = dist.reshape(-1)
    forward = np.argsort(-flat, kind="stable").astype(np.int64)
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(forward.shape[0], dtype=np.int64)
    return RadialPlan(forward=forward, inverse=inverse, height=h, width=w)


def raster_plan(height: int, width: int) -> RadialPlan:
    idx = np.arange(height * width, dtype=np.int64)
    return RadialPlan(forward=idx, inverse=idx.copy(), height=height, width=width)


def radial_unfold(field: np.ndarray, plan: RadialPlan) -> np.ndarray:
    """Gather an HxW(xD) field into an Lx(D) sequence along the plan."""
    if field.shape[0] != plan.height or field.shape[1] != plan.width:
        raise numerics.ShapeError(
            f"field {field.shape[:2]} does not match plan {plan.height}x{plan.width}")
    flat = field.reshape(plan.length, -1)
    seq = flat[plan.forward]
    if field.ndim == 2:
        return seq.reshape(plan.length)
    return seq


def radial_fold(seq: np.ndarray, plan: RadialPlan) -> np.ndarray:
    """Exact inverse of radial_unfold."""
    if seq.shape[0] != plan.length:
        raise numerics.ShapeError(f"sequence length {seq.shape[0]} != plan length {plan.length}")
    flat = seq.reshape(plan.length, -1)
    out = np.empty_like(flat)
    out[plan.forward] = flat
    if seq.ndim == 1:
        return out.reshape(plan.height, plan.width)
    return out.reshape(plan.height, plan.width, seq.shape[1])


def gaussian_heatmap(sources: SourceSet, height: int, width: int, sigma: float) -> np.ndarray:
    """Max-of-Gaussians keypoint heatmap, exactly 1 at integer centers."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    out = np.zeros((height, width), dtype=np.float64)
    if sources.count == 0:
        return out
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    for k in range(sources.count):
        cx, cy = sources.centers[k]
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        out = np.maximum(out, np.exp(-d2 / (2.0 * sigma * sigma)))
    return out


def nms_peaks(heatmap: np.ndarray, threshold: float, window: int = 3) -> SourceSet:
    """Local maxima of the heatmap above threshold.

    A pixel survives if it is >= every later-raster neighbor and strictly >
    every earlier-raster neighbor in its window, so a plateau keeps only its
    raster-first pixel.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    h, w = heatmap.shape
    r = window // 2
    padded = np.full((h + 2 * r, w + 2 * r), -np.inf, dtype=np.float64)
    padded[r:r + h, r:r + w] = heatmap
    keep = heatmap >= threshold
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            if di == 0 and dj == 0:
                continue
            neigh = padded[r + di:r + di + h, r + dj:r + dj + w]
            if di < 0 or (di == 0 and dj < 0):
                keep &= heatmap > neigh
            else:
                keep &= heatmap >= neigh
    ys, xs = np.nonzero(keep)
    centers = np.stack([xs.astype(np.float64), ys.astype(np.float64)], axis=1)
    return SourceSet(centers, heatmap[ys, xs])


def threshold_mask(prob: np.ndarray, tau: float) -> np.ndarray:
    """Binary map: 1 where prob >= tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0,1), got {tau}")
    return (prob >= tau).astype(prob.dtype)


@dataclass
class PriorBundle:
    """Contamination map, source mask and source coordinates, plus halved copies.

    Any field may be None, meaning that prior is unavailable; consumers then
    fall back to their unguided behavior (raster order, no bypass, unit
    excitation).
    """

    p_flare: np.ndarray | None
    p_mask: np.ndarray | None
    p_position: SourceSet | None
    per_scale: list["PriorBundle"] = field(default_factory=list)

    @staticmethod
    def empty() -> "PriorBundle":
        return PriorBundle(None, None, None)

    def at_scale(self, level: int) -> "PriorBundle":
        if level == 0:
            return self
        if level - 1 < len(self.per_scale):
            return self.per_scale[level - 1]
        return PriorBundle.empty()


def downsample_priors(bundle: PriorBundle, levels: int) -> PriorBundle:
    """Fill per_scale with halved copies: averaged contamination, max-pooled
    mask (conservative), floor-halved source coordinates."""
    def _shape_of(b: PriorBundle):
        for f in (b.p_flare, b.p_mask):
            if f is not None:
                return f.shape
        return None

    shape = _shape_of(bundle)
    if shape is not None:
        h, w = shape
        if h % (1 << levels) or w % (1 << levels):
            raise ValueError(f"extents {h}x{w} not divisible by 2^{levels}")
    out = PriorBundle(bundle.p_flare, bundle.p_mask, bundle.p_position, [])
    flare, mask, pos = bundle.p_flare, bundle.p_mask, bundle.p_position
    for _ in range(levels):
        if flare is not None:
            flare = numerics.avg_pool2(flare[None, None])[0, 0]
        if mask is not None:
            mask = numerics.max_pool2(mask[None, None])[0, 0]
        if pos is not None:
            pos = SourceSet(np.floor(pos.centers / 2.0), pos.confidences.copy())
        out.per_scale.append(PriorBundle(flare, mask, pos, []))
    return out
