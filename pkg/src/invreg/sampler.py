"""Probabilistic patch selection for training.

A proposed patch window is accepted with probability min(1, w(mu))
where mu is the mean intensity of the averaged source/target patch
contents and w is a plateau-then-exponential-decay weight: windows of
moderate mean intensity are always kept, bright windows are kept with
exponentially decreasing probability, and near-empty windows are
rejected outright. This spreads training windows across tissue instead
of concentrating on the few brightest regions.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, SamplingBudgetError
from .volio import Volume

ARCHIVE_MAGIC = b"IVP1"
_ARCHIVE_HEADER = struct.Struct("<4s2I")
_ORIGIN = struct.Struct("<3I")


@dataclass(frozen=True)
class PatchSpec:
    """Axis-aligned cubic window: origin voxel plus edge length."""

    origin: tuple[int, int, int]
    size: int

    def slices(self) -> tuple[slice, slice, slice]:
        i, j, k = self.origin
        return slice(i, i + self.size), slice(j, j + self.size), slice(k, k + self.size)

    def validate(self, dims) -> None:
        for o, d in zip(self.origin, dims):
            if o < 0 or o + self.size > d:
                raise ConfigError(f"patch {self} does not fit inside dims {tuple(dims)}")


@dataclass(frozen=True)
class SamplerConfig:
    low: float = 0.1
    high: float = 0.35
    decay: float = 6.6
    scale: float = 10.0
    patch_size: int = 64
    seed: int = 0
    max_draw_factor: int = 1000
    # legacy fixed-threshold mode: accept iff mu >= legacy_threshold.
    # Documented for comparison only; biased toward bright regions.
    legacy_threshold: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.low < self.high <= 1.0):
            raise ConfigError(f"need 0 <= low < high <= 1, got low={self.low} high={self.high}")
        if self.decay <= 0:
            raise ConfigError(f"decay constant must be > 0, got {self.decay}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")


def patch_weight(mean_intensity: float, config: SamplerConfig) -> float:
    """Selection weight for a window of the given mean intensity."""
    x = float(mean_intensity)
    if config.low <= x <= config.high:
        return 1.0
    if x > config.high:
        return config.scale * math.exp(-config.decay * x)
    return 0.0


def propose_patches(
    source: Volume, target: Volume, n_draws: int, config: SamplerConfig, rng=None
):
    """Draw n_draws uniform windows and Bernoulli-accept each by its weight.

    Returns (specs, accepted, mus): all proposed windows, a boolean accept
    mask, and the mean intensities the decisions were based on.
    """
    if source.dims != target.dims:
        raise ValueError(f"dims mismatch: {source.dims} vs {target.dims}")
    p = config.patch_size
    if any(d < p for d in source.dims):
        raise ConfigError(f"patch_size {p} exceeds volume dims {source.dims}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    highs = [d - p + 1 for d in source.dims]
    origins = rng.integers(0, highs, size=(n_draws, 3))
    unif = rng.random(n_draws)
    specs = []
    accepted = np.zeros(n_draws, dtype=bool)
    mus = np.zeros(n_draws)
    for idx in range(n_draws):
        spec = PatchSpec(origin=tuple(int(v) for v in origins[idx]), size=p)
        sl = spec.slices()
        mu = 0.5 * (float(source.voxels[sl].mean()) + float(target.voxels[sl].mean()))
        mus[idx] = mu
        if config.legacy_threshold is not None:
            accepted[idx] = mu >= config.legacy_threshold
        else:
            accepted[idx] = unif[idx] < min(1.0, patch_weight(mu, config))
        specs.append(spec)
    return specs, accepted, mus


def sample_patches(
    source: Volume, target: Volume, n: int, config: SamplerConfig, rng=None
) -> list[PatchSpec]:
    """Rejection-sample n accepted windows; deterministic under config.seed.

    An explicit rng overrides the config seed, letting callers derive
    per-step streams. Raises SamplingBudgetError after max_draw_factor * n
    proposals, which happens when no window has acceptable mean intensity
    (blank volumes).
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    budget = config.max_draw_factor * max(1, n)
    chunk = max(64, 2 * n)
    out: list[PatchSpec] = []
    drawn = 0
    while len(out) < n:
        take = min(chunk, budget - drawn)
        if take <= 0:
            raise SamplingBudgetError(
                f"accepted {len(out)}/{n} patches after {drawn} draws; "
                f"mean patch intensity may be outside the acceptable band everywhere"
            )
        specs, accepted, _ = propose_patches(source, target, take, config, rng=rng)
        drawn += take
        for spec, ok in zip(specs, accepted):
            if ok:
                out.append(spec)
                if len(out) == n:
                    break
    return out


def extract_patch(volume: Volume, spec: PatchSpec) -> np.ndarray:
    """Copy the window contents as a (P, P, P) float32 array."""
    spec.validate(volume.dims)
    return np.ascontiguousarray(volume.voxels[spec.slices()], dtype=np.float32)


def write_patch_csv(specs: list[PatchSpec], path) -> None:
    lines = ["i,j,k,P"]
    lines += [f"{s.origin[0]},{s.origin[1]},{s.origin[2]},{s.size}" for s in specs]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_patch_csv(path) -> list[PatchSpec]:
    specs = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "i,j,k,P":
            raise ValueError(f"{path}: expected header 'i,j,k,P', got {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            i, j, k, p = (int(v) for v in line.split(","))
            specs.append(PatchSpec(origin=(i, j, k), size=p))
    return specs


def write_patch_archive(path, source: Volume, target: Volume, specs: list[PatchSpec]) -> None:
    """Store pre-extracted patch pairs so training can skip the volumes.

    Layout: 4-byte magic, uint32 record count, uint32 patch edge, then
    per record the uint32 origin triple followed by the source and
    target patch voxels as little-endian float32 in i-fastest order.
    """
    if not specs:
        raise ConfigError("refusing to write an empty patch archive")
    sizes = {s.size for s in specs}
    if len(sizes) != 1:
        raise ConfigError(f"archive patches must share one size, got {sorted(sizes)}")
    p = specs[0].size
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_HEADER.pack(ARCHIVE_MAGIC, len(specs), p))
        for spec in specs:
            fh.write(_ORIGIN.pack(*spec.origin))
            fh.write(extract_patch(source, spec).tobytes(order="F"))
            fh.write(extract_patch(target, spec).tobytes(order="F"))


def read_patch_archive(path) -> tuple[list[PatchSpec], np.ndarray, np.ndarray]:
    """Load an archive back as (specs, source patches, target patches)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _ARCHIVE_HEADER.size:
        raise FormatError(path, len(data), "truncated archive header")
    magic, count, p = _ARCHIVE_HEADER.unpack_from(data, 0)
    if magic != ARCHIVE_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}, expected {ARCHIVE_MAGIC!r}")
    if count < 1 or p < 1:
        raise FormatError(path, 4, f"invalid record count {count} or patch size {p}")
    patch_bytes = 4 * p**3
    record = _ORIGIN.size + 2 * patch_bytes
    expected = _ARCHIVE_HEADER.size + count * record
    if len(data) != expected:
        raise FormatError(path, len(data), f"expected {expected} bytes, found {len(data)}")
    specs = []
    src = np.empty((count, p, p, p), dtype=np.float32)
    tgt = np.empty((count, p, p, p), dtype=np.float32)
    offset = _ARCHIVE_HEADER.size
    for n in range(count):
        specs.append(PatchSpec(origin=_ORIGIN.unpack_from(data, offset), size=p))
        offset += _ORIGIN.size
        for dest in (src, tgt):
            grid = np.frombuffer(data, dtype="<f4", count=p**3, offset=offset)
            dest[n] = grid.reshape((p, p, p), order="F")
            offset += patch_bytes
    return specs, src, tgt
