"""Similarity metrics, landmark error reports and visual diagnostics.

Intensity metrics assume inputs scaled to [0, 1]; values outside that
range land in the edge histogram bins. All statistics run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ValidationError
from .volio import DisplacementField, LandmarkSet
from .warp import warp_landmarks

HIST_BINS = 32


def _as_array(x) -> np.ndarray:
    voxels = getattr(x, "voxels", x)
    return np.asarray(voxels, dtype=np.float64)


def global_cc(a, b) -> float:
    """Pearson correlation over all voxels; 0 when either input is constant."""
    av = _as_array(a).ravel()
    bv = _as_array(b).ravel()
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    # mean() is not exact for constant input, so test constancy directly
    if av.min() == av.max() or bv.min() == bv.max():
        return 0.0
    da = av - av.mean()
    db = bv - bv.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 or vb == 0.0:
        return 0.0
    return float(da @ db) / np.sqrt(va * vb)


def _bin_indices(x: np.ndarray, bins: int) -> np.ndarray:
    return np.clip((x * bins).astype(np.int64), 0, bins - 1)


def entropy(a, bins: int = HIST_BINS) -> float:
    """Shannon entropy in nats of the binned intensity distribution."""
    idx = _bin_indices(_as_array(a).ravel(), bins)
    p = np.bincount(idx, minlength=bins) / idx.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def mutual_information(a, b, bins: int = HIST_BINS) -> float:
    """Mutual information in nats from a joint intensity histogram.

    Shares the binning rule with entropy(), so identical inputs give
    back exactly the marginal entropy.
    """
    ia = _bin_indices(_as_array(a).ravel(), bins)
    ib = _bin_indices(_as_array(b).ravel(), bins)
    if ia.shape != ib.shape:
        raise ValueError(f"shape mismatch: {ia.shape} vs {ib.shape}")
    joint = np.bincount(ia * bins + ib, minlength=bins * bins) / ia.size
    pa = joint.reshape(bins, bins).sum(axis=1)
    pb = joint.reshape(bins, bins).sum(axis=0)
    outer = np.outer(pa, pb).ravel()
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / outer[mask])).sum())


@dataclass(frozen=True)
class LandmarkReport:
    distances_mm: dict[str, float]
    mean_mm: float
    std_mm: float
    max_mm: float

    def as_dict(self) -> dict:
        return {
            "mean_mm": self.mean_mm,
            "std_mm": self.std_mm,
            "max_mm": self.max_mm,
            "distances_mm": dict(self.distances_mm),
        }


def landmark_report(
    fixed: LandmarkSet,
    moving: LandmarkSet,
    field: DisplacementField | None = None,
    nearest: bool = False,
) -> LandmarkReport:
    """Physical-space distances between transported moving and fixed landmarks.

    Points are matched by name and must correspond one-to-one. The field,
    when given, must map moving-frame points toward the fixed frame (the
    same field that resamples the fixed image into the moving frame);
    passing None scores the identity transform. Distances use the fixed
    set's voxel spacing, and the spread is the population deviation.
    """
    if set(fixed.names) != set(moving.names):
        missing = set(fixed.names) ^ set(moving.names)
        raise ValidationError(f"landmark sets differ, unmatched names: {sorted(missing)}")
    moved = warp_landmarks(moving, field, nearest=nearest) if field is not None else moving
    moved_by_name = dict(zip(moved.names, moved.coords))
    spacing = np.asarray(fixed.spacing, dtype=np.float64)
    distances = {}
    for name, ref in zip(fixed.names, fixed.coords):
        delta = (moved_by_name[name] - ref) * spacing
        distances[name] = float(np.sqrt((delta**2).sum()))
    values = np.array(list(distances.values()))
    return LandmarkReport(
        distances_mm=distances,
        mean_mm=float(values.mean()),
        std_mm=float(values.std()),
        max_mm=float(values.max()),
    )


def difference_image(a, b) -> np.ndarray:
    """Per-voxel agreement as uint8: 255 where equal, 0 at unit difference."""
    d = np.abs(_as_array(a) - _as_array(b))
    return np.rint(255.0 * np.clip(1.0 - d, 0.0, 1.0)).astype(np.uint8)


def overlay_slice(a, b, axis: int = 2, index: int | None = None) -> np.ndarray:
    """Red/green composite of one slice from each volume, as (H, W, 3) uint8.

    Grey pixels mean agreement; red or green fringes show where only one
    volume has intensity.
    """
    av = _as_array(a)
    bv = _as_array(b)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    if not 0 <= axis <= 2:
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if index is None:
        index = av.shape[axis] // 2
    sl_a = np.take(av, index, axis=axis)
    sl_b = np.take(bv, index, axis=axis)
    rgb = np.zeros((*sl_a.shape, 3), dtype=np.uint8)
    rgb[..., 0] = np.rint(255.0 * np.clip(sl_a, 0.0, 1.0))
    rgb[..., 1] = np.rint(255.0 * np.clip(sl_b, 0.0, 1.0))
    return rgb


def save_png(image: np.ndarray, path) -> None:
    """Write a uint8 grayscale or RGB array as a PNG file."""
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {image.dtype}")
    Image.fromarray(image).save(path)
