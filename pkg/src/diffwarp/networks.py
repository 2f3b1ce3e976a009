"""The two trainable modules: code estimator and field estimator.

Both are small 3D encoder-decoder UNets with skip connections. The code
estimator takes the channel concatenation (source, target, noisy target)
plus a sinusoidal timestep embedding and emits a one-channel latent code
at full resolution. The field estimator takes (source, code) — or
(source, target) in direct registration mode — and emits a three-channel
displacement field whose final layer is initialized near zero so a fresh
model is close to the identity warp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "NetworkConfig",
    "ModelWeights",
    "build_networks",
    "diffusion_forward",
    "deformation_forward",
]


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters shared by both networks."""

    image_shape: tuple[int, int, int] = (32, 128, 128)  # (D, H, W)
    diffusion_channels: tuple[int, ...] = (8, 16, 32, 32)
    deform_channels: tuple[int, ...] = (16, 32, 32, 32)
    time_embed_dim: int = 32
    deform_mode: str = "code"  # "code": input (S, c); "direct": input (S, T)

    def __post_init__(self):
        if len(self.diffusion_channels) < 1 or len(self.deform_channels) < 1:
            raise ValueError("channel tuples need at least one stage")
        if any(c < 1 for c in self.diffusion_channels + self.deform_channels):
            raise ValueError("stage widths must be positive")
        if self.deform_mode not in ("code", "direct"):
            raise ValueError(f"unknown deform_mode {self.deform_mode!r}")
        for chans in (self.diffusion_channels, self.deform_channels):
            _check_divisible(self.image_shape, len(chans) - 1)

    def to_dict(self) -> dict:
        return {
            "image_shape": list(self.image_shape),
            "diffusion_channels": list(self.diffusion_channels),
            "deform_channels": list(self.deform_channels),
            "time_embed_dim": self.time_embed_dim,
            "deform_mode": self.deform_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            image_shape=tuple(d["image_shape"]),
            diffusion_channels=tuple(d["diffusion_channels"]),
            deform_channels=tuple(d["deform_channels"]),
            time_embed_dim=int(d["time_embed_dim"]),
            deform_mode=d.get("deform_mode", "code"),
        )


def _check_divisible(shape, n_down: int) -> None:
    factor = 2**n_down
    bad = [s for s in shape if s % factor != 0]
    if bad:
        padded = tuple(-(-s // factor) * factor for s in shape)
        raise ValueError(
            f"image shape {tuple(shape)} is not divisible by {factor} "
            f"(downsampling depth {n_down}); pad to at least {padded}"
        )


def sinusoidal_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard sin/cos positional embedding of a scalar timestep."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    angles = t * freqs
    emb = torch.cat([angles.sin(), angles.cos()])
    if emb.numel() < dim:
        emb = F.pad(emb, (0, dim - emb.numel()))
    return emb


class _Stage(nn.Module):
    """One conv stage, optionally modulated by a projected time embedding."""

    def __init__(self, in_ch, out_ch, time_dim=None, slope=0.0):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1)
        self.act = nn.SiLU() if slope == 0.0 else nn.LeakyReLU(slope)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None

    def forward(self, x, temb=None):
        h = self.conv(x)
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(temb).view(1, -1, 1, 1, 1)
        return self.act(h)


class UNet3D(nn.Module):
    """Encoder-decoder over 3D volumes with skip connections.

    Downsampling is 2x average pooling between stages; upsampling is
    nearest-neighbor, followed by a conv over the concatenated skip.
    """

    def __init__(self, in_ch, out_ch, stages, time_dim=None, slope=0.0,
                 head_bias=True):
        super().__init__()
        self.time_dim = time_dim
        if time_dim:
            self.time_mlp = nn.Sequential(
                nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
            )
        self.enc = nn.ModuleList()
        prev = in_ch
        for ch in stages:
            self.enc.append(_Stage(prev, ch, time_dim, slope))
            prev = ch
        self.dec = nn.ModuleList()
        for i in range(len(stages) - 2, -1, -1):
            self.dec.append(_Stage(stages[i + 1] + stages[i], stages[i], time_dim, slope))
        self.head = nn.Conv3d(stages[0], out_ch, kernel_size=3, padding=1,
                              bias=head_bias)

    def forward(self, x, t=None):
        temb = None
        if self.time_dim:
            temb = self.time_mlp(
                sinusoidal_embedding(0 if t is None else t, self.time_dim, x.dtype).to(
                    x.device
                )
            )
        skips = []
        h = x
        for i, stage in enumerate(self.enc):
            if i > 0:
                h = F.avg_pool3d(h, kernel_size=2)
            h = stage(h, temb)
            skips.append(h)
        h = skips.pop()
        for stage in self.dec:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = stage(torch.cat([h, skips.pop()], dim=1), temb)
        return self.head(h)


@dataclass
class ModelWeights:
    """Both networks plus the config that shaped them."""

    diffusion: UNet3D
    deform: UNet3D
    config: NetworkConfig

    def parameters(self):
        yield from self.diffusion.parameters()
        yield from self.deform.parameters()


def build_networks(cfg: NetworkConfig, seed: int = 0) -> ModelWeights:
    """Construct both networks deterministically from a seed."""
    torch.manual_seed(seed)
    diffusion = UNet3D(
        in_ch=3,
        out_ch=1,
        stages=cfg.diffusion_channels,
        time_dim=cfg.time_embed_dim,
    )
    # no head bias: in code mode a constant offset would cancel in the
    # residual anyway (dead parameter), and the flow should be zero-mean
    deform = UNet3D(in_ch=2, out_ch=3, stages=cfg.deform_channels, slope=0.2,
                    head_bias=False)
    # near-zero flow head: a fresh model barely deforms the source
    with torch.no_grad():
        deform.head.weight.normal_(0.0, 1e-5)
    return ModelWeights(diffusion=diffusion, deform=deform, config=cfg)


def _check_image(cfg: NetworkConfig, *vols: torch.Tensor) -> None:
    for v in vols:
        if tuple(v.shape) != tuple(cfg.image_shape):
            raise ValueError(
                f"volume shape {tuple(v.shape)} does not match configured "
                f"image shape {tuple(cfg.image_shape)}"
            )


def diffusion_forward(
    w: ModelWeights,
    source: torch.Tensor,
    target: torch.Tensor,
    x_t: torch.Tensor,
    t: int,
) -> torch.Tensor:
    """Estimate the latent code from (source, target, noisy target) at step t.

    ``t = 0`` means no-noise conditioning (``x_t`` is the clean target).
    Returns a full-resolution scalar grid.
    """
    _check_image(w.config, source, target, x_t)
    x = torch.stack([source, target, x_t]).unsqueeze(0)
    return w.diffusion(x, t=t).squeeze(0).squeeze(0)


def deformation_forward(
    w: ModelWeights, source: torch.Tensor, code: torch.Tensor
) -> torch.Tensor:
    """Estimate the displacement field from the source and the latent code.

    In code mode the field is the code-dependent residual
    ``U(S, c) - U(S, 0)``: a zero code yields exactly the identity warp,
    so all deformation information must flow through the code and
    scaling the code sweeps the trajectory from identity to full warp.
    In direct mode the second channel is the target volume and the raw
    network output is the field.
    """
    _check_image(w.config, source, code)
    x = torch.stack([source, code]).unsqueeze(0)
    out = w.deform(x).squeeze(0)
    if w.config.deform_mode == "direct":
        return out
    zero = torch.stack([source, torch.zeros_like(code)]).unsqueeze(0)
    return out - w.deform(zero).squeeze(0)
