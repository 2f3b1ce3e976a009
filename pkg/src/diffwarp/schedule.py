"""Forward diffusion process: linear noise schedule and target perturbation."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

__all__ = ["NoiseSchedule", "make_linear_schedule", "perturb", "sample_timestep"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta sequence with precomputed cumulative alpha products.

    ``betas[t-1]`` is the noise variance at step t (1-indexed), and
    ``alpha_bars[t-1]`` is the running product of (1 - beta) up to t.
    Index 0 is reserved to mean "no noise": ``alpha_bar(0) == 1``, used
    at inference where the clean target is fed.
    """

    betas: torch.Tensor
    alpha_bars: torch.Tensor = field(repr=False, default=None)

    def __post_init__(self):
        betas = torch.as_tensor(self.betas, dtype=torch.float64)
        if betas.dim() != 1 or betas.numel() < 1:
            raise ValueError("betas must be a non-empty 1D sequence")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("every beta must lie strictly in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", torch.cumprod(1.0 - betas, dim=0))

    @property
    def u(self) -> int:
        return self.betas.numel()

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of (1 - beta) over steps 1..t; 1.0 at t=0."""
        if not 0 <= t <= self.u:
            raise ValueError(f"timestep {t} outside [0, {self.u}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def make_linear_schedule(u: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linear beta schedule from ``beta_min`` (t=1) to ``beta_max`` (t=u)."""
    if u < 1:
        raise ValueError(f"schedule length must be >= 1, got {u}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )
    betas = torch.linspace(beta_min, beta_max, u, dtype=torch.float64)
    return NoiseSchedule(betas=betas)


def perturb(
    target: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Noisy target sqrt(a_bar_t) * T + sqrt(1 - a_bar_t) * eps.

    ``eps`` is a caller-supplied standard-normal draw of the target's
    shape, so the result is deterministic and replayable.
    """
    if eps.shape != target.shape:
        raise ValueError(
            f"noise shape {tuple(eps.shape)} does not match target {tuple(target.shape)}"
        )
    ab = schedule.alpha_bar(t)
    dtype = target.dtype
    return (
        torch.tensor(ab, dtype=dtype).sqrt() * target
        + torch.tensor(1.0 - ab, dtype=dtype).sqrt() * eps
    )


def sample_timestep(u: int, rng: torch.Generator) -> int:
    """Uniform draw from {1, ..., u}."""
    if u < 1:
        raise ValueError(f"u must be >= 1, got {u}")
    return int(torch.randint(1, u + 1, (1,), generator=rng).item())
