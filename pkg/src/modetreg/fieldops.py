"""Differentiable geometric primitives on displacement fields.

Volumes are tensors shaped (C, H, W, L); fields are shaped (3, h, w, l) with
displacements in voxel units of their own grid. ``warp``, ``compose`` and
``upsample2`` stay inside the autograd graph; the Jacobian analysis
functions return plain numpy results.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .volgrid import DisplacementField, LabelMap, Volume

_OOB = ("zeros", "border")
_MODES = ("trilinear", "nearest")


def as_tensor(x, dtype=None) -> torch.Tensor:
    """Tensor view of a tensor, numpy array or grid container."""
    if isinstance(x, (Volume, DisplacementField)):
        x = x.data
    elif isinstance(x, LabelMap):
        x = x.data[None]
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    arr = np.asarray(x)
    if dtype is None:
        dtype = torch.float64 if arr.dtype == np.float64 else torch.float32
    return torch.as_tensor(np.array(arr), dtype=dtype)


def identity_grid(shape, dtype=torch.float32) -> torch.Tensor:
    axes = [torch.arange(s, dtype=dtype) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def warp(src, field, mode: str = "trilinear", oob: str = "border") -> torch.Tensor:
    """Resample ``src`` at p + u(p).

    ``oob="zeros"`` treats samples outside the grid as 0 (corner-wise for
    trilinear), ``oob="border"`` clamps sample coordinates into the grid.
    """
    if mode not in _MODES:
        raise ValueError(f"warp: mode must be one of {_MODES}, got {mode!r}")
    if oob not in _OOB:
        raise ValueError(f"warp: oob must be one of {_OOB}, got {oob!r}")
    field = as_tensor(field)
    src = as_tensor(src, dtype=field.dtype)
    squeeze = src.dim() == 3
    if squeeze:
        src = src[None]
    if field.dim() != 4 or field.shape[0] != 3:
        raise ValueError(f"warp: field must be (3, h, w, l), got {tuple(field.shape)}")
    if tuple(src.shape[1:]) != tuple(field.shape[1:]):
        raise ValueError(
            f"warp: field shape {tuple(field.shape[1:])} does not match source {tuple(src.shape[1:])}")

    shape = src.shape[1:]
    sizes = torch.tensor(shape, dtype=field.dtype).view(3, 1, 1, 1)
    coords = identity_grid(shape, field.dtype) + field
    if oob == "border":
        coords = torch.minimum(coords.clamp(min=0), sizes - 1)
    flat = src.reshape(src.shape[0], -1)
    strides = (shape[1] * shape[2], shape[2], 1)

    if mode == "nearest":
        idx = torch.floor(coords.detach() + 0.5).long()
        return _gather(flat, idx, shape, strides, oob).reshape(src.shape if not squeeze else shape)

    base = torch.floor(coords.detach())
    frac = coords - base
    base = base.long()
    out = 0
    for dx in (0, 1):
        wx = frac[0] if dx else 1 - frac[0]
        for dy in (0, 1):
            wy = frac[1] if dy else 1 - frac[1]
            for dz in (0, 1):
                wz = frac[2] if dz else 1 - frac[2]
                corner = base + torch.tensor([dx, dy, dz]).view(3, 1, 1, 1)
                vals = _gather(flat, corner, shape, strides, oob)
                out = out + vals.reshape(src.shape) * (wx * wy * wz)
    return out[0] if squeeze else out


def _gather(flat, idx, shape, strides, oob):
    valid = None
    if oob == "zeros":
        valid = ((idx >= 0) & (idx < torch.tensor(shape).view(3, 1, 1, 1))).all(0)
    hi = torch.tensor(shape).view(3, 1, 1, 1) - 1
    idx = torch.minimum(idx.clamp(min=0), hi)
    lin = idx[0] * strides[0] + idx[1] * strides[1] + idx[2]
    vals = flat[:, lin.reshape(-1)]
    if valid is not None:
        vals = vals * valid.reshape(1, -1).to(flat.dtype)
    return vals


def compose(phi_prev, phi_new) -> torch.Tensor:
    """Field equivalent to warping by ``phi_prev`` and then by ``phi_new``."""
    phi_prev = as_tensor(phi_prev)
    phi_new = as_tensor(phi_new, dtype=phi_prev.dtype)
    if phi_prev.shape != phi_new.shape:
        raise ValueError(
            f"compose: shape mismatch {tuple(phi_prev.shape)} vs {tuple(phi_new.shape)}")
    return phi_new + warp(phi_prev, phi_new, "trilinear", "border")


def upsample2(field) -> torch.Tensor:
    """Double the grid (voxel-centre trilinear) and rescale displacements by 2."""
    field = as_tensor(field)
    up = F.interpolate(field[None], scale_factor=2, mode="trilinear", align_corners=False)
    return 2.0 * up[0]


def jacobian_determinants(field) -> np.ndarray:
    """Determinant of the central-difference Jacobian of p + u(p).

    Boundary voxels carry no estimate and are set to 1.
    """
    u = np.asarray(as_tensor(field).detach().to(torch.float64))
    if u.ndim != 4 or u.shape[0] != 3:
        raise ValueError(f"jacobian_determinants: field must be (3, h, w, l), got {u.shape}")
    if min(u.shape[1:]) < 3:
        raise ValueError(f"jacobian_determinants: need at least 3 voxels per axis, got {u.shape[1:]}")
    inner = (slice(1, -1),) * 3
    jac = np.empty((3, 3) + tuple(s - 2 for s in u.shape[1:]))
    for j in range(3):
        fwd = [slice(1, -1)] * 3
        bwd = [slice(1, -1)] * 3
        fwd[j], bwd[j] = slice(2, None), slice(None, -2)
        for i in range(3):
            jac[i, j] = 0.5 * (u[i][tuple(fwd)] - u[i][tuple(bwd)]) + (i == j)
    det = np.ones(u.shape[1:])
    det[inner] = np.linalg.det(np.moveaxis(jac, (0, 1), (-2, -1)))
    return det


def folding_fraction(field) -> float:
    """Fraction of interior voxels whose Jacobian determinant is <= 0."""
    det = jacobian_determinants(field)[(slice(1, -1),) * 3]
    return float(np.count_nonzero(det <= 0) / det.size)
