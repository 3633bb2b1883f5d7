"""Synthetic blob volumes and smooth ground-truth deformations.

Stands in for real cleared-tissue acquisitions: sparse bright cell-like
blobs on a dark background, deformed by a smooth random field whose
ground truth is known, so registration quality can be scored exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .volio import DisplacementField, LandmarkSet, Volume, make_field, make_volume, normalize_intensity
from .warp import warp_volume

TAPER_VOXELS = 4


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    blob_count: int = 50
    blob_sigma_range: tuple[float, float] = (2.0, 4.0)
    field_amplitude: float = 2.0
    field_smoothness: float = 8.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    landmark_count: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.field_amplitude < 0:
            raise ConfigError(f"field_amplitude must be >= 0, got {self.field_amplitude}")
        if self.field_smoothness <= 0:
            raise ConfigError(f"field_smoothness must be > 0, got {self.field_smoothness}")
        if self.blob_count < 0:
            raise ConfigError(f"blob_count must be >= 0, got {self.blob_count}")


def _draw_blobs(config: SynthConfig) -> list[tuple[np.ndarray, float]]:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    lo, hi = config.blob_sigma_range
    # keep centers clear of the taper band, but never let the margin
    # swallow a small axis entirely
    margins = [min(TAPER_VOXELS + 2, (n - 1) / 2.0) for n in config.dims]
    los = margins
    his = [n - 1 - m for n, m in zip(config.dims, margins)]
    blobs = []
    for _ in range(config.blob_count):
        center = rng.uniform(los, his)
        sigma = rng.uniform(lo, hi)
        blobs.append((center, sigma))
    return blobs


def make_blob_volume(config: SynthConfig) -> Volume:
    """Sum of isotropic Gaussian bumps at seeded random centers, normalized to [0, 1]."""
    if min(config.dims) < 8:
        raise ConfigError(f"dims must be >= 8 per axis, got {config.dims}")
    vox = np.zeros(config.dims, dtype=np.float64)
    for center, sigma in _draw_blobs(config):
        _add_blob(vox, center, sigma)
    return normalize_intensity(make_volume(vox, config.spacing))


def _add_blob(vox: np.ndarray, center, sigma: float) -> None:
    # evaluate only within 4 sigma of the center
    reach = 4.0 * sigma
    slices = []
    axes = []
    for axis, c in enumerate(center):
        a = max(0, int(np.floor(c - reach)))
        b = min(vox.shape[axis], int(np.ceil(c + reach)) + 1)
        slices.append(slice(a, b))
        axes.append(np.arange(a, b, dtype=np.float64) - c)
    dx, dy, dz = np.meshgrid(*axes, indexing="ij")
    r2 = dx * dx + dy * dy + dz * dz
    vox[tuple(slices)] += np.exp(-r2 / (2.0 * sigma * sigma))


def _boundary_taper(dims) -> np.ndarray:
    """Separable window: 0 at each face, cosine ramp over TAPER_VOXELS, 1 inside."""
    weights = []
    for n in dims:
        idx = np.arange(n, dtype=np.float64)
        dist = np.minimum(idx, n - 1 - idx)
        t = np.clip(dist / TAPER_VOXELS, 0.0, 1.0)
        weights.append(np.sin(0.5 * np.pi * t) ** 2)
    wx, wy, wz = np.meshgrid(*weights, indexing="ij")
    return wx * wy * wz


def make_smooth_field(config: SynthConfig) -> DisplacementField:
    """Gaussian-smoothed white noise per component, tapered to zero at the
    boundary and rescaled so the largest displacement magnitude equals
    field_amplitude."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    comps = np.stack(
        [
            gaussian_filter(rng.standard_normal(config.dims), config.field_smoothness)
            for _ in range(3)
        ]
    )
    comps *= _boundary_taper(config.dims)[None]
    if config.field_amplitude == 0:
        comps[:] = 0.0
    else:
        mag = np.sqrt((comps**2).sum(axis=0))
        peak = float(mag.max())
        if peak > 0:
            comps *= config.field_amplitude / peak
    return make_field(comps, config.spacing)


def make_pair(
    config: SynthConfig,
) -> tuple[Volume, Volume, DisplacementField, LandmarkSet, LandmarkSet]:
    """Build (source, target, truth, landmarks_src, landmarks_tgt).

    target is a blob volume and source(x) = target(x + truth(x)), so the
    forward flow recovering the pair is exactly `truth`. Landmark pairs
    sit on blob centers and are related by tgt = src + truth(src).
    """
    target = make_blob_volume(config)
    truth = make_smooth_field(config)
    source = warp_volume(target, truth)

    names = []
    src_pts = []
    tgt_pts = []
    for center, _ in _draw_blobs(config):
        if len(names) >= config.landmark_count:
            break
        u = _sample_field(truth.components, center)
        q = center + u
        if ((q < 0) | (q > np.array(config.dims) - 1)).any():
            continue
        names.append(f"p{len(names) + 1}")
        src_pts.append(center)
        tgt_pts.append(q)
    landmarks_src = LandmarkSet(
        names=tuple(names), coords=np.asarray(src_pts).reshape(len(names), 3),
        spacing=config.spacing,
    )
    landmarks_tgt = LandmarkSet(
        names=tuple(names), coords=np.asarray(tgt_pts).reshape(len(names), 3),
        spacing=config.spacing,
    )
    return source, target, truth, landmarks_src, landmarks_tgt


def _sample_field(components: np.ndarray, point: np.ndarray) -> np.ndarray:
    """Trilinear lookup of the three components at one point (numpy path)."""
    out = np.zeros(3)
    base = np.floor(point).astype(int)
    frac = point - base
    for corner in range(8):
        offs = np.array([(corner >> a) & 1 for a in range(3)])
        idx = base + offs
        if (idx < 0).any() or (idx >= np.array(components.shape[1:])).any():
            continue
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac))
        out += w * components[:, idx[0], idx[1], idx[2]]
    return out
