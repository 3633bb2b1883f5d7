"""Volume, displacement-field, and landmark I/O.

Two minimal binary containers keep tests byte-exact and avoid any
medical-imaging dependency:

IVL1 volume file
    bytes 0-3    ASCII magic "IVL1"
    bytes 4-15   nx, ny, nz as unsigned 32-bit little-endian
    bytes 16-27  sx, sy, sz spacing (mm/voxel) as IEEE-754 float32 LE
    bytes 28-    nx*ny*nz float32 LE voxels, index i fastest, then j, then k

IVF1 field file
    same 28-byte header with magic "IVF1"; payload is the ux grid,
    then uy, then uz, each laid out like a volume payload.
    Displacements are in voxels.

Landmark file: UTF-8 CSV lines "name,x,y,z" with continuous voxel
coordinates; '#' starts a comment line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, LandmarkParseError, ValidationError

MAGIC_VOLUME = b"IVL1"
MAGIC_FIELD = b"IVF1"
_HEADER = struct.Struct("<4s3I3f")

# All resampling in this package reads input at x + u(x) (backward
# warping) and treats samples outside the grid as zero. Recorded in
# run manifests since the binary headers have no free field.
WARP_CONVENTION = "backward-warp, zero-padded"


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar image. voxels has shape (nx, ny, nz), float32."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    voxels: np.ndarray

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValidationError(f"volume dims must be three counts >= 1, got {self.dims}")
        if len(self.spacing) != 3 or any(not (s > 0) for s in self.spacing):
            raise ValidationError(f"volume spacing must be positive, got {self.spacing}")
        if tuple(self.voxels.shape) != tuple(self.dims):
            raise ValidationError(
                f"voxel array shape {self.voxels.shape} does not match dims {self.dims}"
            )


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement in voxels. components has shape (3, nx, ny, nz)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    components: np.ndarray

    def __post_init__(self):
        if tuple(self.components.shape) != (3, *self.dims):
            raise ValidationError(
                f"component array shape {self.components.shape} does not match dims {self.dims}"
            )
        if len(self.spacing) != 3 or any(not (s > 0) for s in self.spacing):
            raise ValidationError(f"field spacing must be positive, got {self.spacing}")

    @property
    def ux(self) -> np.ndarray:
        return self.components[0]

    @property
    def uy(self) -> np.ndarray:
        return self.components[1]

    @property
    def uz(self) -> np.ndarray:
        return self.components[2]


@dataclass(frozen=True)
class LandmarkSet:
    """Named points in continuous voxel coordinates, order-preserving."""

    names: tuple[str, ...]
    coords: np.ndarray  # (N, 3) float64
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise ValidationError("landmark names must be unique")
        if self.coords.shape != (len(self.names), 3):
            raise ValidationError(
                f"coords shape {self.coords.shape} does not match {len(self.names)} names"
            )

    def __len__(self) -> int:
        return len(self.names)


def make_volume(voxels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Volume:
    vox = np.ascontiguousarray(voxels, dtype=np.float32)
    return Volume(dims=tuple(vox.shape), spacing=tuple(float(s) for s in spacing), voxels=vox)


def make_field(components: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
    comp = np.ascontiguousarray(components, dtype=np.float32)
    return DisplacementField(
        dims=tuple(comp.shape[1:]), spacing=tuple(float(s) for s in spacing), components=comp
    )


def _read_header(path: Path, data: bytes, magic: bytes):
    if len(data) < _HEADER.size:
        raise FormatError(path, len(data), f"file truncated inside the {_HEADER.size}-byte header")
    got, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(data, 0)
    if got != magic:
        raise FormatError(path, 0, f"bad magic {got!r}, expected {magic!r}")
    if min(nx, ny, nz) < 1:
        raise FormatError(path, 4, f"dims must be >= 1, got ({nx}, {ny}, {nz})")
    if not (sx > 0 and sy > 0 and sz > 0):
        raise FormatError(path, 16, f"spacing must be positive, got ({sx}, {sy}, {sz})")
    return (nx, ny, nz), (sx, sy, sz)


def _payload_to_grid(data: bytes, offset: int, dims) -> np.ndarray:
    nx, ny, nz = dims
    count = nx * ny * nz
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    # i-fastest layout is Fortran order for an (nx, ny, nz) array
    return np.ascontiguousarray(flat.reshape(dims, order="F"))


def _grid_to_bytes(grid: np.ndarray) -> bytes:
    return np.asarray(grid, dtype="<f4").tobytes(order="F")


def read_volume(path) -> Volume:
    path = Path(path)
    data = path.read_bytes()
    dims, spacing = _read_header(path, data, MAGIC_VOLUME)
    expected = dims[0] * dims[1] * dims[2] * 4
    actual = len(data) - _HEADER.size
    if actual != expected:
        raise FormatError(
            path, _HEADER.size, f"payload is {actual} bytes, dims imply {expected}"
        )
    return Volume(dims=dims, spacing=spacing, voxels=_payload_to_grid(data, _HEADER.size, dims))


def write_volume(volume: Volume, path) -> None:
    path = Path(path)
    nx, ny, nz = volume.dims
    header = _HEADER.pack(MAGIC_VOLUME, nx, ny, nz, *volume.spacing)
    path.write_bytes(header + _grid_to_bytes(volume.voxels))


def read_field(path, strict: bool = False) -> DisplacementField:
    """Read an IVF1 field. strict=True additionally rejects non-finite values."""
    path = Path(path)
    data = path.read_bytes()
    dims, spacing = _read_header(path, data, MAGIC_FIELD)
    n = dims[0] * dims[1] * dims[2]
    expected = 3 * n * 4
    actual = len(data) - _HEADER.size
    if actual != expected:
        raise FormatError(
            path, _HEADER.size, f"payload is {actual} bytes, dims imply {expected}"
        )
    comps = np.stack(
        [_payload_to_grid(data, _HEADER.size + c * n * 4, dims) for c in range(3)]
    )
    if strict and not np.isfinite(comps).all():
        raise ValidationError(f"{path}: field contains non-finite displacement values")
    return DisplacementField(dims=dims, spacing=spacing, components=comps)


def write_field(field_: DisplacementField, path, validate: bool = True) -> None:
    if validate and not np.isfinite(field_.components).all():
        raise ValidationError("refusing to write field with non-finite values")
    path = Path(path)
    nx, ny, nz = field_.dims
    header = _HEADER.pack(MAGIC_FIELD, nx, ny, nz, *field_.spacing)
    payload = b"".join(_grid_to_bytes(field_.components[c]) for c in range(3))
    path.write_bytes(header + payload)


def normalize_intensity(volume: Volume) -> Volume:
    """Rescale voxels to [0, 1] by (v - min) / (max - min).

    A constant volume maps to all zeros.
    """
    vox = volume.voxels
    lo = float(vox.min())
    hi = float(vox.max())
    if hi == lo:
        out = np.zeros_like(vox)
    else:
        out = (vox - lo) / np.float32(hi - lo)
    return Volume(dims=volume.dims, spacing=volume.spacing, voxels=out.astype(np.float32))


def read_landmarks(path, spacing=(1.0, 1.0, 1.0), bounds=None) -> LandmarkSet:
    """Parse a landmark CSV. bounds, if given, is a dims tuple used to
    reject coordinates outside [0, dim-1] per axis."""
    path = Path(path)
    names: list[str] = []
    coords: list[tuple[float, float, float]] = []
    seen = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise LandmarkParseError(path, lineno, f"expected 'name,x,y,z', got {raw!r}")
        name = parts[0]
        if name in seen:
            raise LandmarkParseError(path, lineno, f"duplicate landmark name {name!r}")
        try:
            xyz = tuple(float(p) for p in parts[1:])
        except ValueError:
            raise LandmarkParseError(path, lineno, f"non-numeric coordinate in {raw!r}") from None
        if bounds is not None:
            for axis, (c, d) in enumerate(zip(xyz, bounds)):
                if not (0.0 <= c <= d - 1):
                    raise LandmarkParseError(
                        path, lineno, f"coordinate {c} outside [0, {d - 1}] on axis {axis}"
                    )
        seen.add(name)
        names.append(name)
        coords.append(xyz)
    arr = np.asarray(coords, dtype=np.float64).reshape(len(names), 3)
    return LandmarkSet(names=tuple(names), coords=arr, spacing=tuple(float(s) for s in spacing))


def write_landmarks(landmarks: LandmarkSet, path) -> None:
    lines = [
        f"{name},{x:.8g},{y:.8g},{z:.8g}"
        for name, (x, y, z) in zip(landmarks.names, landmarks.coords)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
