"""Spatial-transform algebra: trilinear sampling, warping, composition,
gradients and Jacobian folding analysis.

Two layers live here.  The tensor kernels (``*_tensor``/``*_channels``
functions) operate on raw torch tensors in whatever dtype they are given and
are differentiable end to end; the training pipeline calls them inside the
autograd graph.  The typed wrappers at the bottom take the immutable core
types, run the same kernels in float64 and hand back numpy-backed values.

Sampling uses 8-corner trilinear interpolation with a clamp-to-edge border
policy: positions outside the grid read the nearest boundary voxel, which
avoids fake intensity edges in the similarity losses.

Composition convention: ``compose(u_prev, v_res)[x] = v_res[x] +
u_prev[x + v_res[x]]``, i.e. the residual acts in the warped frame, so
``warp(I, compose(u, v))`` tracks ``warp(warp(I, u), v)`` for smooth fields.
"""

from __future__ import annotations

import numpy as np
import torch

from .core import (
    DisplacementField,
    LabelMask,
    ValidationError,
    Volume,
    check_field_matches,
    check_same_shape,
)

Tensor = torch.Tensor


# --- tensor kernels (differentiable) -----------------------------------------

def identity_grid(spatial, dtype=torch.float64, device=None) -> Tensor:
    """Voxel-coordinate grid of shape (H, W, T, 3)."""
    axes = [torch.arange(s, dtype=dtype, device=device) for s in spatial]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)


def sample_channels(vol: Tensor, pos: Tensor) -> Tensor:
    """Trilinear sampling of a (C, H, W, T) tensor at positions (..., 3).

    Positions are absolute voxel coordinates; out-of-range coordinates are
    clamped to the boundary.  Returns (C, ...).  Differentiable w.r.t. both
    ``vol`` and ``pos``.
    """
    c = vol.shape[0]
    spatial = vol.shape[1:]
    out_shape = pos.shape[:-1]
    p = pos.reshape(-1, 3)

    hi = torch.tensor([s - 1 for s in spatial], dtype=vol.dtype, device=vol.device)
    p = torch.minimum(torch.clamp(p, min=0), hi)

    with torch.no_grad():
        i0 = p.floor().long()
        for a in range(3):
            i0[:, a].clamp_(0, max(spatial[a] - 2, 0))
        i1 = torch.stack(
            [torch.clamp(i0[:, a] + 1, max=spatial[a] - 1) for a in range(3)], dim=1
        )
    frac = p - i0.to(p.dtype)

    vflat = vol.reshape(c, -1)
    w_, t_ = spatial[1], spatial[2]
    out = torch.zeros((c, p.shape[0]), dtype=vol.dtype, device=vol.device)
    for bx in (0, 1):
        ix = i1[:, 0] if bx else i0[:, 0]
        wx = frac[:, 0] if bx else 1.0 - frac[:, 0]
        for by in (0, 1):
            iy = i1[:, 1] if by else i0[:, 1]
            wy = frac[:, 1] if by else 1.0 - frac[:, 1]
            for bz in (0, 1):
                iz = i1[:, 2] if bz else i0[:, 2]
                wz = frac[:, 2] if bz else 1.0 - frac[:, 2]
                idx = (ix * w_ + iy) * t_ + iz
                out = out + vflat[:, idx] * (wx * wy * wz)
    return out.reshape(c, *out_shape)


def warp_channels(vol: Tensor, phi: Tensor) -> Tensor:
    """Warp a (C, H, W, T) tensor by a (H, W, T, 3) displacement field."""
    grid = identity_grid(phi.shape[:3], dtype=phi.dtype, device=phi.device)
    return sample_channels(vol, grid + phi)


def compose_fields(u_prev: Tensor, v_res: Tensor) -> Tensor:
    """Accumulate a residual field onto a previous one (both (H, W, T, 3))."""
    grid = identity_grid(v_res.shape[:3], dtype=v_res.dtype, device=v_res.device)
    u_moved = sample_channels(u_prev.permute(3, 0, 1, 2), grid + v_res)
    return v_res + u_moved.permute(1, 2, 3, 0)


def _diff_along(g: Tensor, dim: int) -> Tensor:
    """Central differences in the interior, one-sided at the two boundary
    slices; zero along axes of size 1 (no measurable variation)."""
    n = g.shape[dim]
    if n == 1:
        return torch.zeros_like(g)
    first = g.narrow(dim, 1, 1) - g.narrow(dim, 0, 1)
    last = g.narrow(dim, n - 1, 1) - g.narrow(dim, n - 2, 1)
    if n == 2:
        return torch.cat([first, last], dim=dim)
    central = (g.narrow(dim, 2, n - 2) - g.narrow(dim, 0, n - 2)) / 2.0
    return torch.cat([first, central, last], dim=dim)


def spatial_gradient_tensor(g: Tensor) -> Tensor:
    """Per-axis derivative of a (..., H, W, T) tensor, stacked last: (..., H, W, T, 3)."""
    nd = g.dim()
    return torch.stack([_diff_along(g, nd - 3 + a) for a in range(3)], dim=-1)


def jacobian_determinant_tensor(phi: Tensor) -> Tensor:
    """Per-voxel det(Id + du/dx) of a (H, W, T, 3) field; returns (H, W, T)."""
    comp = phi.permute(3, 0, 1, 2)
    j = spatial_gradient_tensor(comp)  # (3, H, W, T, 3): j[i, ..., a] = d phi_i / d x_a
    a00 = 1.0 + j[0, ..., 0]
    a01 = j[0, ..., 1]
    a02 = j[0, ..., 2]
    a10 = j[1, ..., 0]
    a11 = 1.0 + j[1, ..., 1]
    a12 = j[1, ..., 2]
    a20 = j[2, ..., 0]
    a21 = j[2, ..., 1]
    a22 = 1.0 + j[2, ..., 2]
    return (
        a00 * (a11 * a22 - a12 * a21)
        - a01 * (a10 * a22 - a12 * a20)
        + a02 * (a10 * a21 - a11 * a20)
    )


def interior_mask(shape, device=None) -> Tensor:
    """Boolean (H, W, T) tensor marking voxels with a full central stencil."""
    m = torch.zeros(shape, dtype=torch.bool, device=device)
    if min(shape) > 2:
        m[1:-1, 1:-1, 1:-1] = True
    return m


# --- typed wrappers -----------------------------------------------------------

def _t(a: np.ndarray) -> Tensor:
    # copy: core arrays are read-only and torch tensors must not alias them
    return torch.from_numpy(np.array(a, dtype=np.float64))


def trilinear_sample(v: Volume, p) -> float:
    """Interpolate a volume at one continuous position (border-clamped)."""
    pos = np.asarray(p, dtype=np.float64)
    if pos.shape != (3,) or not np.all(np.isfinite(pos)):
        raise ValidationError(f"position must be 3 finite coordinates, got {p!r}")
    out = sample_channels(_t(v.data)[None], _t(pos)[None])
    return float(out[0, 0])


def warp(v: Volume, phi: DisplacementField) -> Volume:
    """Resample ``v`` at x + phi[x]: output voxel x reads the source at its
    displaced position."""
    check_field_matches(v, phi)
    out = warp_channels(_t(v.data)[None], _t(phi.data))[0]
    return Volume(out.numpy(), spacing=v.spacing)


def warp_nearest(labels: np.ndarray, phi: DisplacementField) -> np.ndarray:
    """Warp an integer label map with nearest-neighbour sampling.

    Trilinear interpolation is meaningless on labels; positions are rounded
    to the nearest voxel (border-clamped) and the label copied.
    """
    lab = np.asarray(labels)
    if lab.shape != phi.shape:
        raise ValidationError(f"label shape {lab.shape} does not match field {phi.shape}")
    grid = identity_grid(phi.shape, dtype=torch.float64).numpy()
    pos = np.rint(grid + phi.data).astype(np.int64)
    for a, s in enumerate(lab.shape):
        np.clip(pos[..., a], 0, s - 1, out=pos[..., a])
    return lab[pos[..., 0], pos[..., 1], pos[..., 2]]


def compose(u_prev: DisplacementField, v_res: DisplacementField) -> DisplacementField:
    """Combine a previous field with a residual so one warp replaces two."""
    check_same_shape(u_prev, v_res, "displacement fields")
    out = compose_fields(_t(u_prev.data), _t(v_res.data))
    return DisplacementField(out.numpy())


def spatial_gradient(g) -> np.ndarray:
    """Finite-difference gradient of a scalar grid; returns (H, W, T, 3)."""
    data = g.data if isinstance(g, Volume) else np.asarray(g, dtype=np.float64)
    if data.ndim != 3:
        raise ValidationError(f"spatial_gradient expects a (H, W, T) grid, got {data.shape}")
    return spatial_gradient_tensor(_t(data)).numpy()


def jacobian_determinant(phi: DisplacementField) -> np.ndarray:
    return jacobian_determinant_tensor(_t(phi.data)).numpy()


def count_negative_jacobian(phi: DisplacementField, m: LabelMask) -> int:
    """Folding voxels: det < 0 inside the mask, boundary voxels excluded
    (one-sided stencils there are artifacts, not foldings)."""
    check_same_shape(phi, m, "field and mask")
    det = jacobian_determinant(phi)
    interior = interior_mask(phi.shape).numpy()
    return int(np.count_nonzero((det < 0) & (m.data > 0) & interior))
