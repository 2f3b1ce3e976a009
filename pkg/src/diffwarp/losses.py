"""Training objectives and evaluation metrics.

The composite objective is ``diffuse + lam * (-NCC + lam_r * smooth)``:
a noise-matching MSE on the latent code, a windowed normalized
cross-correlation between the warped source and the target, and a
squared forward-difference penalty on the displacement field. All
reductions are voxel means so the weights are resolution-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .fields import spatial_gradient

__all__ = [
    "LossBreakdown",
    "local_ncc",
    "smoothness_penalty",
    "diffusion_loss",
    "total_loss",
    "psnr",
    "nmse",
    "dice",
]

NCC_EPS = 1e-5


@dataclass
class LossBreakdown:
    """Scalar components of one objective evaluation.

    ``total == diffuse + lam * (deform_similarity + lam_r * deform_smooth)``;
    ``deform_similarity`` is the negated NCC term.
    """

    diffuse: torch.Tensor
    deform_similarity: torch.Tensor
    deform_smooth: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict:
        return {
            "diffuse": float(self.diffuse.detach()),
            "deform_similarity": float(self.deform_similarity.detach()),
            "deform_smooth": float(self.deform_smooth.detach()),
            "total": float(self.total.detach()),
        }


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def local_ncc(
    a: torch.Tensor, b: torch.Tensor, window: int = 9, eps: float = NCC_EPS
) -> torch.Tensor:
    """Mean windowed normalized cross-correlation (squared form).

    At each voxel, window statistics are accumulated over a cubic
    neighborhood (inputs replicate-padded at the border, so the window
    population is constant) and combined as cross^2 / (var_a * var_b + eps).
    Replicate padding keeps the score exactly invariant to affine
    intensity maps of either input. Differentiable in both inputs.
    """
    _check_same_shape(a, b)
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd and positive, got {window}")
    if any(window > s for s in a.shape):
        raise ValueError(f"window {window} exceeds volume shape {tuple(a.shape)}")

    pad = window // 2
    n = float(window**3)
    av = F.pad(a.view(1, 1, *a.shape), (pad,) * 6, mode="replicate")
    bv = F.pad(b.view(1, 1, *b.shape), (pad,) * 6, mode="replicate")
    kernel = torch.ones(
        (1, 1, window, window, window), dtype=a.dtype, device=a.device
    )

    sum_a = F.conv3d(av, kernel)
    sum_b = F.conv3d(bv, kernel)
    sum_aa = F.conv3d(av * av, kernel)
    sum_bb = F.conv3d(bv * bv, kernel)
    sum_ab = F.conv3d(av * bv, kernel)

    cross = sum_ab - sum_a * sum_b / n
    var_a = sum_aa - sum_a * sum_a / n
    var_b = sum_bb - sum_b * sum_b / n
    cc = cross * cross / (var_a * var_b + eps)
    return cc.mean()


def smoothness_penalty(field: torch.Tensor) -> torch.Tensor:
    """Voxel mean of the summed squared forward differences of the field."""
    grads = spatial_gradient(field)
    return (grads * grads).sum(dim=(0, 1)).mean()


def diffusion_loss(code: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the latent code and the noise draw."""
    _check_same_shape(code, eps)
    return ((code - eps) ** 2).mean()


def total_loss(
    code: torch.Tensor,
    eps: torch.Tensor,
    warped: torch.Tensor,
    target: torch.Tensor,
    field: torch.Tensor,
    lam: float = 20.0,
    lam_r: float = 1.0,
    window: int = 9,
) -> LossBreakdown:
    """Composite objective with its components broken out."""
    diffuse = diffusion_loss(code, eps)
    similarity = -local_ncc(warped, target, window=window)
    smooth = smoothness_penalty(field)
    total = diffuse + lam * (similarity + lam_r * smooth)
    return LossBreakdown(
        diffuse=diffuse,
        deform_similarity=similarity,
        deform_smooth=smooth,
        total=total,
    )


def psnr(
    a: torch.Tensor, b: torch.Tensor, peak: float = 2.0, cap: float = 99.0
) -> float:
    """Peak signal-to-noise ratio in dB; peak 2.0 for [-1, 1] volumes."""
    _check_same_shape(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse < 1e-12:
        return cap
    return 10.0 * torch.log10(torch.tensor(peak * peak / mse)).item()


def nmse(a: torch.Tensor, b: torch.Tensor) -> float:
    """Squared error of ``a`` normalized by the energy of the reference ``b``."""
    _check_same_shape(a, b)
    energy = float((b * b).sum())
    if energy == 0.0:
        raise ValueError("reference volume has zero energy")
    return float(((a - b) ** 2).sum()) / energy


def dice(
    pred: torch.Tensor, truth: torch.Tensor, labels
) -> tuple[dict[int, float], float]:
    """Per-label Dice overlap and its mean over the requested labels.

    A label absent from both maps scores 1 (perfect vacuous agreement).
    """
    _check_same_shape(pred, truth)
    labels = sorted(int(l) for l in labels)
    if not labels:
        raise ValueError("label set is empty")
    scores = {}
    for lab in labels:
        p = pred == lab
        t = truth == lab
        denom = int(p.sum()) + int(t.sum())
        if denom == 0:
            scores[lab] = 1.0
        else:
            scores[lab] = 2.0 * int((p & t).sum()) / denom
    return scores, sum(scores.values()) / len(scores)
