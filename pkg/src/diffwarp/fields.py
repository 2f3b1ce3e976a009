"""Displacement-field kernels: warping, spatial gradients, field scaling.

Conventions used throughout the package:

* a volume is a ``(D, H, W)`` tensor of scalar intensities,
* a displacement field is a ``(3, D, H, W)`` tensor whose components are
  offsets in voxel units, ordered like the volume axes (d, h, w),
* warping is "pull": the output voxel at index ``p`` samples the input
  at ``p + field(p)``; samples outside the grid clamp to the border.

All functions are pure and differentiable where it matters (trilinear
warping and gradients support autograd through both arguments).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

__all__ = ["warp_trilinear", "warp_nearest", "spatial_gradient", "scale_field"]


def _check_pair(vol: torch.Tensor, field: torch.Tensor) -> None:
    if vol.dim() != 3:
        raise ValueError(f"expected a (D, H, W) volume, got shape {tuple(vol.shape)}")
    if field.dim() != 4 or field.shape[0] != 3:
        raise ValueError(f"expected a (3, D, H, W) field, got shape {tuple(field.shape)}")
    if field.shape[1:] != vol.shape:
        raise ValueError(
            f"field spatial shape {tuple(field.shape[1:])} does not match "
            f"volume shape {tuple(vol.shape)}"
        )


def _sample_grid(field: torch.Tensor) -> torch.Tensor:
    """Absolute sampling coordinates p + field(p), shape (3, D, H, W)."""
    d, h, w = field.shape[1:]
    base = torch.meshgrid(
        torch.arange(d, dtype=field.dtype, device=field.device),
        torch.arange(h, dtype=field.dtype, device=field.device),
        torch.arange(w, dtype=field.dtype, device=field.device),
        indexing="ij",
    )
    return torch.stack(base, dim=0) + field


def warp_trilinear(vol: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Warp ``vol`` by ``field`` with trilinear interpolation.

    Out-of-bounds sampling coordinates are clamped to the boundary
    (border replication). Differentiable w.r.t. both inputs.
    """
    _check_pair(vol, field)
    if not torch.isfinite(field).all():
        raise ValueError("displacement field contains non-finite components")

    d, h, w = vol.shape
    coords = _sample_grid(field)
    # grid_sample wants normalized coords in (x, y, z) = (w, h, d) order
    sizes = torch.tensor([d, h, w], dtype=vol.dtype, device=vol.device)
    norm = 2.0 * coords / (sizes - 1).view(3, 1, 1, 1) - 1.0
    grid = norm.flip(0).permute(1, 2, 3, 0).unsqueeze(0)  # (1, D, H, W, 3)
    out = F.grid_sample(
        vol.view(1, 1, d, h, w),
        grid,
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )
    return out.view(d, h, w)


def warp_nearest(seg: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Warp an integer label map by rounding p + field(p) to the nearest voxel.

    Never invents labels; not differentiable (labels are discrete).
    """
    _check_pair(seg, field)
    d, h, w = seg.shape
    coords = _sample_grid(field.detach().float()).round().long()
    coords[0].clamp_(0, d - 1)
    coords[1].clamp_(0, h - 1)
    coords[2].clamp_(0, w - 1)
    flat = (coords[0] * h + coords[1]) * w + coords[2]
    return seg.reshape(-1)[flat.reshape(-1)].reshape(d, h, w)


def spatial_gradient(field: torch.Tensor) -> torch.Tensor:
    """Forward finite differences of every field component along every axis.

    Returns a ``(3, 3, D, H, W)`` tensor indexed ``[component, axis]``;
    the difference at the last index along each axis is defined as 0, so
    any spatially constant field has an exactly zero gradient.
    """
    if field.dim() != 4 or field.shape[0] != 3:
        raise ValueError(f"expected a (3, D, H, W) field, got shape {tuple(field.shape)}")
    if not torch.isfinite(field).all():
        raise ValueError("displacement field contains non-finite components")
    zeros_d = torch.zeros_like(field[:, :1, :, :])
    zeros_h = torch.zeros_like(field[:, :, :1, :])
    zeros_w = torch.zeros_like(field[:, :, :, :1])
    grad_d = torch.cat([field[:, 1:, :, :] - field[:, :-1, :, :], zeros_d], dim=1)
    grad_h = torch.cat([field[:, :, 1:, :] - field[:, :, :-1, :], zeros_h], dim=2)
    grad_w = torch.cat([field[:, :, :, 1:] - field[:, :, :, :-1], zeros_w], dim=3)
    return torch.stack([grad_d, grad_h, grad_w], dim=1)  # (component, axis, D, H, W)


def scale_field(field: torch.Tensor, gamma: float) -> torch.Tensor:
    """Multiply every displacement component by ``gamma`` in [0, 1]."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return field * gamma
