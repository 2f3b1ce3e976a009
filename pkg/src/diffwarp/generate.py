"""Inference: estimate the latent code once, then scale it to sweep frames."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .fields import scale_field, warp_trilinear
from .networks import ModelWeights, deformation_forward, diffusion_forward

__all__ = [
    "FrameResult",
    "estimate_latent",
    "generate_frame",
    "generate_sequence",
    "baseline_scaled_sequence",
]


@dataclass
class FrameResult:
    gamma: float
    field: torch.Tensor  # (3, D, H, W)
    frame: torch.Tensor  # (D, H, W)


@torch.no_grad()
def estimate_latent(
    w: ModelWeights, source: torch.Tensor, target: torch.Tensor
) -> torch.Tensor:
    """Latent code for a pair: the clean target is fed at timestep 0."""
    return diffusion_forward(w, source, target, target, t=0)


@torch.no_grad()
def generate_frame(
    w: ModelWeights, source: torch.Tensor, code: torch.Tensor, gamma: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Deform the source by the field predicted from the scaled code."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    field = deformation_forward(w, source, gamma * code)
    return field, warp_trilinear(source, field)


def generate_sequence(
    w: ModelWeights, source: torch.Tensor, target: torch.Tensor, n_frames: int
) -> list[FrameResult]:
    """Frames at gamma = k/(n_frames-1), all from a single latent estimate."""
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")
    code = estimate_latent(w, source, target)
    out = []
    for k in range(n_frames):
        gamma = k / (n_frames - 1)
        field, frame = generate_frame(w, source, code, gamma)
        out.append(FrameResult(gamma=gamma, field=field, frame=frame))
    return out


@torch.no_grad()
def baseline_scaled_sequence(
    w_direct: ModelWeights, source: torch.Tensor, target: torch.Tensor, n_frames: int
) -> list[FrameResult]:
    """Plain-registration baseline: one field, intermediate frames by gamma * field.

    ``w_direct`` must have been trained in direct mode (field network fed
    the target, no latent code).
    """
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")
    if w_direct.config.deform_mode != "direct":
        raise ValueError(
            "baseline_scaled_sequence needs a model built with "
            f"deform_mode='direct', got {w_direct.config.deform_mode!r}"
        )
    # double precision so phi_gamma / gamma recovers the one estimated
    # field to rounding noise (the frames vary only in scale)
    field = deformation_forward(w_direct, source, target).double()
    source = source.double()
    out = []
    for k in range(n_frames):
        gamma = k / (n_frames - 1)
        scaled = scale_field(field, gamma)
        out.append(
            FrameResult(gamma=gamma, field=scaled, frame=warp_trilinear(source, scaled))
        )
    return out
