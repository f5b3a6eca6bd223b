"""Procedural training-pair synthesis.

Scenes are built from a procedural background, one to four flare templates
(isotropic glare plus oriented streak lobes, every component decaying
radially from its source center), and a saturated source disc.  Components
get independent random affine warps, are accumulated with clamping, and are
blended with the background in gamma-linearized space.

Image fields are HxWxC float arrays in [0,1].  All randomness is drawn from
per-seed generators so equal seeds give bit-identical samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import fileio
from .geometry import SourceSet, gaussian_heatmap

_GAMMA_SALT = 0x67616D6D61  # decouples the gamma draw from the main sample stream


@dataclass
class Streak:
    angle: float   # radians
    length: float  # decay length along the ridge, pixels
    width: float   # gaussian half-width across the ridge, pixels
    gain: float


@dataclass
class FlareTemplate:
    center: tuple[float, float]  # (x, y), sub-pixel allowed
    glare_sigma: float
    glare_gain: float
    streaks: list[Streak] = dc_field(default_factory=list)
    source_radius: float = 1.5
    source_gain: float = 1.0


@dataclass
class AffineParams:
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)  # (dx, dy) pixels
    scale: float = 1.0
    flip: bool = False


@dataclass
class SynthConfig:
    height: int = 32
    width: int = 32
    min_sources: int = 1
    max_sources: int = 2
    heatmap_sigma: float | None = None  # defaults to 2 * height / 32
    gamma_range: tuple[float, float] = (1.8, 2.2)
    glare_gain_range: tuple[float, float] = (0.35, 0.8)
    glare_sigma_range: tuple[float, float] = (3.0, 7.0)
    streak_count_range: tuple[int, int] = (1, 2)
    source_radius_range: tuple[float, float] = (1.0, 2.2)
    noise_amplitude: float = 0.015
    min_separation: float = 8.0

    @property
    def sigma(self) -> float:
        return self.heatmap_sigma if self.heatmap_sigma is not None else 2.0 * self.height / 32.0


@dataclass
class SceneSample:
    background: np.ndarray
    flare_composite: np.ndarray
    light_image: np.ndarray
    input: np.ndarray
    heatmap_gt: np.ndarray
    mask_gt: np.ndarray
    sources_gt: SourceSet
    gamma: float
    glare_only: np.ndarray
    streak_only: np.ndarray


def flare_intensity(template: FlareTemplate, xs: np.ndarray, ys: np.ndarray,
                    glare_only: bool = False) -> np.ndarray:
    """Continuous flare intensity at (x, y) points.

    Isotropic gaussian glare plus oriented ridge lobes with exponential
    decay along the ridge; every term is non-increasing along any ray from
    the center.  Values below 1e-6 are zeroed so the flare has bounded
    support (monotonicity-preserving, since the intensity never recovers
    once below the threshold).
    """
    cx, cy = template.center
    dx = np.asarray(xs, dtype=np.float64) - cx
    dy = np.asarray(ys, dtype=np.float64) - cy
    r2 = dx * dx + dy * dy
    out = template.glare_gain * np.exp(-r2 / (2.0 * template.glare_sigma ** 2))
    if not glare_only:
        for s in template.streaks:
            ca, sa = math.cos(s.angle), math.sin(s.angle)
            along = dx * ca + dy * sa
            across = -dx * sa + dy * ca
            out = out + s.gain * np.exp(-np.abs(along) / s.length) \
                * np.exp(-(across * across) / (2.0 * s.width ** 2))
    out = np.clip(out, 0.0, 1.0)
    out[out < 1e-6] = 0.0
    return out


def render_flare(template: FlareTemplate, height: int, width: int):
    """Sample (flare, light, glare-only) fields for one template on the grid.

    The light is a soft-edged saturated disc of the template's radius."""
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    flare = flare_intensity(template, xx, yy)
    glare = flare_intensity(template, xx, yy, glare_only=True)
    cx, cy = template.center
    r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    light = template.source_gain * np.clip(template.source_radius - r + 0.5, 0.0, 1.0)
    return flare, light, glare


def random_affine(field: np.ndarray, params: AffineParams) -> np.ndarray:
    """Bilinear affine warp about the image center; outside fills with 0."""
    if params.scale <= 0:
        raise ValueError(f"scale must be positive, got {params.scale}")
    h, w = field.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ca, sa = math.cos(params.rotation), math.sin(params.rotation)
    tx, ty = params.translation
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    # invert: output pixel -> source pixel
    qx = xx - cx - tx
    qy = yy - cy - ty
    sx = (ca * qx + sa * qy) / params.scale
    sy = (-sa * qx + ca * qy) / params.scale
    if params.flip:
        sx = -sx
    sx = sx + cx
    sy = sy + cy
    eps = 1e-6  # tolerate round-off in the inverse map at the border
    inside = (sx >= -eps) & (sx <= w - 1 + eps) & (sy >= -eps) & (sy <= h - 1 + eps)
    sxc = np.clip(sx, 0, w - 1)
    syc = np.clip(sy, 0, h - 1)
    x0 = np.floor(sxc).astype(np.int64)
    y0 = np.floor(syc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sxc - x0
    fy = syc - y0
    if field.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        inside_w = inside[..., None]
    else:
        inside_w = inside
    out = (field[y0, x0] * (1 - fx) * (1 - fy) + field[y0, x1] * fx * (1 - fy)
           + field[y1, x0] * (1 - fx) * fy + field[y1, x1] * fx * fy)
    return out * inside_w


def transform_point(point: tuple[float, float], params: AffineParams,
                    height: int, width: int) -> tuple[float, float]:
    """Apply the same affine map random_affine uses to a single (x, y) point."""
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    px, py = point[0] - cx, point[1] - cy
    if params.flip:
        px = -px
    ca, sa = math.cos(params.rotation), math.sin(params.rotation)
    qx = params.scale * (ca * px - sa * py)
    qy = params.scale * (sa * px + ca * py)
    return qx + cx + params.translation[0], qy + cy + params.translation[1]


def compose_multisource(templates: list[FlareTemplate], affines: list[AffineParams],
                        height: int, width: int):
    """Warp each rendered pair independently, then accumulate with clamping."""
    if not templates:
        raise ValueError("compose_multisource requires at least one template")
    if len(templates) != len(affines):
        raise ValueError("templates and affines must pair up")
    flare_sum = np.zeros((height, width), dtype=np.float64)
    light_sum = np.zeros((height, width), dtype=np.float64)
    glare_sum = np.zeros((height, width), dtype=np.float64)
    centers = []
    for tpl, aff in zip(templates, affines):
        flare, light, glare = render_flare(tpl, height, width)
        flare_sum += random_affine(flare, aff)
        light_sum += random_affine(light, aff)
        glare_sum += random_affine(glare, aff)
        centers.append(transform_point(tpl.center, aff, height, width))
    flare_c = np.clip(flare_sum, 0.0, 1.0)
    light_c = np.clip(light_sum, 0.0, 1.0)
    glare_c = np.clip(glare_sum, 0.0, 1.0)
    sources = SourceSet(np.array(centers, dtype=np.float64).reshape(-1, 2),
                        np.ones(len(centers)))
    return flare_c, light_c, sources, glare_c


def blend_scene(background: np.ndarray, flare_composite: np.ndarray,
                light_composite: np.ndarray, gamma: float) -> np.ndarray:
    """Linearize, add the flare and light energy, clamp, de-linearize.

    gamma == 1 skips the power maps, making this plain clamped addition
    (also safe for unclamped network outputs in the consistency loss).
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    flare = flare_composite if flare_composite.ndim == background.ndim \
        else flare_composite[..., None]
    light = light_composite if light_composite.ndim == background.ndim \
        else light_composite[..., None]
    if gamma == 1.0:
        return np.clip(background + flare + light, 0.0, 1.0)
    lin = np.power(np.clip(background, 0.0, 1.0), gamma) \
        + np.power(np.clip(flare, 0.0, 1.0), gamma) \
        + np.power(np.clip(light, 0.0, 1.0), gamma)
    return np.power(np.clip(lin, 0.0, 1.0), 1.0 / gamma)


def sample_gamma(seed: int, config: SynthConfig) -> float:
    rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(_GAMMA_SALT))
    lo, hi = config.gamma_range
    return float(lo + (hi - lo) * rng.random())


def _procedural_background(rng: np.random.Generator, height: int, width: int,
                           noise_amplitude: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    theta = rng.uniform(0, 2 * math.pi)
    ramp = (xx * math.cos(theta) + yy * math.sin(theta) + 1.5) / 3.0
    lo = rng.uniform(0.05, 0.25, size=3)
    hi = rng.uniform(0.3, 0.6, size=3)
    img = lo[None, None, :] + ramp[:, :, None] * (hi - lo)[None, None, :]
    for _ in range(rng.integers(1, 4)):
        cx = rng.uniform(0, width - 1)
        cy = rng.uniform(0, height - 1)
        radius = rng.uniform(height / 8, height / 3)
        color = rng.uniform(0.0, 0.55, size=3)
        d2 = (xx * (width - 1) - cx) ** 2 + (yy * (height - 1) - cy) ** 2
        blob = np.exp(-d2 / (2 * radius ** 2))
        img = img * (1 - blob[:, :, None]) + blob[:, :, None] * color[None, None, :]
    img += rng.normal(0.0, noise_amplitude, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _dilate1(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] = np.maximum(out[1:, :], mask[:-1, :])
    out[:-1, :] = np.maximum(out[:-1, :], mask[1:, :])
    out[:, 1:] = np.maximum(out[:, 1:], out[:, :-1])
    out[:, :-1] = np.maximum(out[:, :-1], out[:, 1:])
    return out


def _draw_template(rng: np.random.Generator, config: SynthConfig) -> FlareTemplate:
    h, w = config.height, config.width
    margin = h / 4
    center = (rng.uniform(margin, w - 1 - margin), rng.uniform(margin, h - 1 - margin))
    streaks = []
    for _ in range(rng.integers(config.streak_count_range[0], config.streak_count_range[1] + 1)):
        streaks.append(Streak(
            angle=rng.uniform(0, math.pi),
            length=rng.uniform(h / 4, h / 1.5),
            width=rng.uniform(0.8, 1.8),
            gain=rng.uniform(0.3, 0.8),
        ))
    return FlareTemplate(
        center=center,
        glare_sigma=rng.uniform(*config.glare_sigma_range),
        glare_gain=rng.uniform(*config.glare_gain_range),
        streaks=streaks,
        source_radius=rng.uniform(*config.source_radius_range),
        source_gain=rng.uniform(0.92, 1.0),
    )


def _draw_affine(rng: np.random.Generator, config: SynthConfig) -> AffineParams:
    h = config.height
    return AffineParams(
        rotation=rng.uniform(-math.pi, math.pi),
        translation=(rng.uniform(-h / 8, h / 8), rng.uniform(-h / 8, h / 8)),
        scale=rng.uniform(0.85, 1.2),
        flip=bool(rng.random() < 0.5),
    )


def make_sample(rng_seed: int, config: SynthConfig | None = None) -> SceneSample:
    """Deterministically synthesize one scene from its seed."""
    config = config or SynthConfig()
    rng = np.random.default_rng(rng_seed)
    h, w = config.height, config.width
    background = _procedural_background(rng, h, w, config.noise_amplitude)

    n_src = int(rng.integers(config.min_sources, config.max_sources + 1))
    templates: list[FlareTemplate] = []
    affines: list[AffineParams] = []
    placed: list[tuple[float, float]] = []
    for _ in range(n_src):
        for _attempt in range(64):
            tpl = _draw_template(rng, config)
            aff = _draw_affine(rng, config)
            cx, cy = transform_point(tpl.center, aff, h, w)
            margin = tpl.source_radius + 2.0
            if not (margin <= cx <= w - 1 - margin and margin <= cy <= h - 1 - margin):
                continue
            if any(math.hypot(cx - px, cy - py) < config.min_separation for px, py in placed):
                continue
            placed.append((cx, cy))
            templates.append(tpl)
            affines.append(aff)
            break
        else:
            raise RuntimeError("could not place a source after 64 attempts")

    flare_c, light_c, sources, glare_c = compose_multisource(templates, affines, h, w)
    streak_c = np.clip(flare_c - glare_c, 0.0, 1.0)
    gamma = sample_gamma(rng_seed, config)
    inp = blend_scene(background, flare_c, light_c, gamma)

    rounded = SourceSet(np.rint(sources.centers), sources.confidences.copy())
    heat = gaussian_heatmap(rounded, h, w, config.sigma)
    mask = _dilate1((light_c > 1e-3).astype(np.float64))
    return SceneSample(
        background=background,
        flare_composite=flare_c,
        light_image=light_c,
        input=inp,
        heatmap_gt=heat,
        mask_gt=mask,
        sources_gt=rounded,
        gamma=gamma,
        glare_only=glare_c,
        streak_only=streak_c,
    )


def clean_ground_truth(sample_or_parts, gamma: float | None = None) -> np.ndarray:
    """Flare-free target: the background blended with the preserved light."""
    if isinstance(sample_or_parts, SceneSample):
        s = sample_or_parts
        return blend_scene(s.background, np.zeros_like(s.light_image), s.light_image, s.gamma)
    background, light = sample_or_parts
    return blend_scene(background, np.zeros_like(light), light, gamma)


RECORD_KEYS = ("background", "flare", "light", "input", "heatmap", "mask")


def write_dataset(n: int, config: SynthConfig, out_dir, base_seed: int = 0) -> Path:
    """Write n records and a manifest; returns the manifest path.

    Each record contributes six DAT1 tensors (listed in its manifest row),
    8-bit PPM display copies of the image fields, a source list, and glare
    and streak region masks for the region-restricted metrics.
    """
    out = fileio.ensure_dir(out_dir)
    fileio.ensure_dir(out / "region_masks")
    rows = []
    for i in range(n):
        seed = base_seed + i
        sample = make_sample(seed, config)
        rec = f"sample_{i:04d}"
        rec_dir = fileio.ensure_dir(out / rec)
        arrays = {
            "background": sample.background,
            "flare": sample.flare_composite,
            "light": sample.light_image,
            "input": sample.input,
            "heatmap": sample.heatmap_gt,
            "mask": sample.mask_gt,
        }
        paths = []
        for key in RECORD_KEYS:
            rel = f"{rec}/{key}.dat"
            fileio.save_dat(out / rel, arrays[key].astype(np.float32))
            paths.append(rel)
        for key in ("background", "input"):
            fileio.save_ppm(rec_dir / f"{key}.ppm", arrays[key])
        for key in ("flare", "light"):
            fileio.save_ppm(rec_dir / f"{key}.ppm", np.repeat(arrays[key][:, :, None], 3, axis=2))
        fileio.save_sources(rec_dir / "sources.txt", sample.sources_gt.centers,
                            sample.sources_gt.confidences)
        fileio.save_dat(out / "region_masks" / f"glare_{i:04d}.dat",
                        (sample.glare_only > 0.02).astype(np.float32))
        fileio.save_dat(out / "region_masks" / f"streak_{i:04d}.dat",
                        (sample.streak_only > 0.02).astype(np.float32))
        rows.append((i, seed, paths))
    manifest = out / "manifest.tsv"
    fileio.save_manifest(manifest, rows)
    return manifest
