"""Trilinear resampling, field composition, and landmark transport.

Convention (fixed for the whole package): backward warping, i.e.
output(x) = input(x + u(x)) with u in voxels, and zero padding for
samples outside [0, n-1] on any axis. Sampling at exact integer
coordinates reproduces the stored voxel bit-for-bit.

The core operates on torch tensors so image- and field-gradients flow
through resampling during training; thin adapters accept the numpy
container types.
"""

from __future__ import annotations

import numpy as np
import torch

from .volio import DisplacementField, LandmarkSet, Volume


def sample_at_points(vol: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Trilinear lookup of vol (X, Y, Z) at points (..., 3). Out-of-domain
    corners contribute zero. Differentiable in vol and points."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    return _interp(vol[None, None], x[None], y[None], z[None])[0, 0]


def warp_tensor(vol: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warp a (X, Y, Z) tensor by a (3, X, Y, Z) displacement tensor."""
    return warp_batch(vol[None, None], flow[None])[0, 0]


def warp_batch(vols: torch.Tensor, flows: torch.Tensor) -> torch.Tensor:
    """Warp (B, C, X, Y, Z) by per-item flows (B, 3, X, Y, Z)."""
    if vols.shape[0] != flows.shape[0] or vols.shape[2:] != flows.shape[2:]:
        raise ValueError(f"volume shape {tuple(vols.shape)} does not match flow shape {tuple(flows.shape)}")
    grid = _base_grid(vols.shape[2:], flows.dtype, flows.device)
    x = grid[0] + flows[:, 0]
    y = grid[1] + flows[:, 1]
    z = grid[2] + flows[:, 2]
    return _interp(vols, x, y, z)


def _base_grid(dims, dtype, device) -> torch.Tensor:
    axes = [torch.arange(n, dtype=dtype, device=device) for n in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def _interp(vols: torch.Tensor, x: torch.Tensor, y: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Batched trilinear interpolation. vols: (B, C, X, Y, Z); x/y/z: (B, ...)
    shared across channels. Zero-pads the volume (one voxel low, two high)
    and clamps floor indices into the border, so out-of-domain corners read
    stored zeros and every corner sits at a fixed scalar offset from the
    floor corner. All eight corners then come from one gather."""
    b, c = vols.shape[:2]
    nx, ny, nz = vols.shape[2:]
    padded = torch.nn.functional.pad(vols, (1, 2, 1, 2, 1, 2))
    flat = padded.reshape(b, c, -1)

    shape = x.shape
    # Coordinates at or beyond one voxel outside the domain sample zeros
    # only, so clamping them to the [-1, n] shell preserves the value and
    # keeps every corner index inside the padded array.
    x = x.reshape(b, -1).clamp(-1.0, float(nx))
    y = y.reshape(b, -1).clamp(-1.0, float(ny))
    z = z.reshape(b, -1).clamp(-1.0, float(nz))
    m = x.shape[1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    z0 = torch.floor(z)
    # Unsqueeze a channel axis so weights broadcast against gathered values.
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    fz = (z - z0)[:, None]

    sx = (ny + 3) * (nz + 3)
    sy = nz + 3
    ix = x0.long()
    iy = y0.long()
    iz = z0.long()
    # The trailing constant shifts (-1, -1, -1) to the padded origin.
    base = ix * sx + iy * sy + iz + (sx + sy + 1)
    offs = torch.tensor(
        [0, 1, sy, sy + 1, sx, sx + 1, sx + sy, sx + sy + 1], device=vols.device
    )
    lin = (base[:, None, :] + offs[None, :, None]).reshape(b, -1)
    vals = flat.gather(2, lin[:, None, :].expand(b, c, -1)).reshape(b, c, 8, m)

    v = vals.view(b, c, 4, 2, m)
    vz = torch.lerp(v[:, :, :, 0], v[:, :, :, 1], fz[:, :, None])
    vz = vz.view(b, c, 2, 2, m)
    vy = torch.lerp(vz[:, :, :, 0], vz[:, :, :, 1], fy[:, :, None])
    out = torch.lerp(vy[:, :, 0], vy[:, :, 1], fx)
    return out.reshape(b, c, *shape[1:])


def _check_dims(a_dims, b_dims):
    if tuple(a_dims) != tuple(b_dims):
        raise ValueError(f"dims mismatch: {tuple(a_dims)} vs {tuple(b_dims)}")


def trilinear_sample(volume: Volume, point) -> float:
    """Sample one continuous (x, y, z) point from a Volume."""
    vol = torch.from_numpy(np.asarray(volume.voxels, dtype=np.float64))
    pt = torch.as_tensor(point, dtype=torch.float64)
    return float(sample_at_points(vol, pt))


def warp_volume(volume: Volume, field: DisplacementField) -> Volume:
    """out(x) = volume(x + u(x)) for every voxel x."""
    _check_dims(volume.dims, field.dims)
    vol = torch.from_numpy(np.asarray(volume.voxels, dtype=np.float64))
    flow = torch.from_numpy(np.asarray(field.components, dtype=np.float64))
    with torch.no_grad():
        out = warp_tensor(vol, flow)
    return Volume(dims=volume.dims, spacing=volume.spacing, voxels=out.numpy().astype(np.float32))


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Displacement of applying inner then outer:
    u(x) = u_inner(x) + u_outer(x + u_inner(x))."""
    _check_dims(outer.dims, inner.dims)
    inner_t = torch.from_numpy(np.asarray(inner.components, dtype=np.float64))
    outer_t = torch.from_numpy(np.asarray(outer.components, dtype=np.float64))
    with torch.no_grad():
        sampled = warp_batch(outer_t[None], inner_t[None])[0]
        combined = inner_t + sampled
    return DisplacementField(
        dims=inner.dims, spacing=inner.spacing,
        components=combined.numpy().astype(np.float32),
    )


def warp_landmarks(
    landmarks: LandmarkSet, field: DisplacementField, nearest: bool = False
) -> LandmarkSet:
    """Transport points by p' = p + u(p), u sampled trilinearly at p.

    nearest=True reads u at the rounded voxel instead, for protocols
    that extract the displacement of the containing voxel.
    """
    coords = np.asarray(landmarks.coords, dtype=np.float64)
    if nearest:
        pts = torch.from_numpy(np.rint(coords))
    else:
        pts = torch.from_numpy(coords)
    flow = torch.from_numpy(np.asarray(field.components, dtype=np.float64))
    with torch.no_grad():
        u = torch.stack([sample_at_points(flow[c], pts) for c in range(3)], dim=-1)
    return LandmarkSet(
        names=landmarks.names,
        coords=coords + u.numpy(),
        spacing=landmarks.spacing,
    )
