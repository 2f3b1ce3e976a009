"""End-to-end unsupervised training of both networks, plus checkpointing."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .fields import warp_trilinear
from .losses import LossBreakdown, local_ncc, smoothness_penalty, total_loss
from .networks import (
    ModelWeights,
    NetworkConfig,
    build_networks,
    deformation_forward,
    diffusion_forward,
)
from .schedule import make_linear_schedule, perturb, sample_timestep

__all__ = [
    "TrainConfig",
    "Trainer",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_roundtrip",
]

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimization hyperparameters; defaults follow the reference setup."""

    lam: float = 20.0
    lam_r: float = 1.0
    lr: float = 2e-4
    epochs: int = 800
    batch_size: int = 1
    u: int = 2000
    beta_min: float = 1e-6
    beta_max: float = 1e-2
    ncc_window: int = 9
    seed: int = 0
    checkpoint_every: int = 100
    grad_clip: float | None = None
    mode: str = "ddm"  # "ddm" or "direct" (plain registration baseline)

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "u", "beta_min", "beta_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("ddm", "direct"):
            raise ValueError(f"unknown training mode {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Trainer:
    """Owns the weights, the Adam state, the noise schedule and the RNG."""

    def __init__(self, weights: ModelWeights, cfg: TrainConfig):
        self.weights = weights
        self.cfg = cfg
        want = "direct" if cfg.mode == "direct" else "code"
        if weights.config.deform_mode != want:
            raise ValueError(
                f"training mode {cfg.mode!r} needs networks built with "
                f"deform_mode={want!r}, got {weights.config.deform_mode!r}"
            )
        self.schedule = make_linear_schedule(cfg.u, cfg.beta_min, cfg.beta_max)
        params = (
            list(weights.parameters())
            if cfg.mode == "ddm"
            else list(weights.deform.parameters())
        )
        self.optimizer = torch.optim.Adam(params, lr=cfg.lr)
        self.rng = torch.Generator().manual_seed(cfg.seed)

    def step(self, source: torch.Tensor, target: torch.Tensor) -> LossBreakdown:
        """One optimization step on a (source, target) pair.

        Returns the pre-update loss breakdown. A non-finite loss aborts
        the step (no parameter update) and raises, naming the offending
        component.
        """
        cfg = self.cfg
        if cfg.mode == "ddm":
            t = sample_timestep(cfg.u, self.rng)
            eps = torch.randn(target.shape, generator=self.rng, dtype=target.dtype)
            x_t = perturb(target, t, eps, self.schedule)
            code = diffusion_forward(self.weights, source, target, x_t, t)
            flow = deformation_forward(self.weights, source, code)
            warped = warp_trilinear(source, flow)
            breakdown = total_loss(
                code, eps, warped, target, flow,
                lam=cfg.lam, lam_r=cfg.lam_r, window=cfg.ncc_window,
            )
        else:
            flow = deformation_forward(self.weights, source, target)
            warped = warp_trilinear(source, flow)
            similarity = -local_ncc(warped, target, window=cfg.ncc_window)
            smooth = smoothness_penalty(flow)
            zero = torch.zeros((), dtype=similarity.dtype)
            breakdown = LossBreakdown(
                diffuse=zero,
                deform_similarity=similarity,
                deform_smooth=smooth,
                total=similarity + cfg.lam_r * smooth,
            )

        for name, value in breakdown.as_dict().items():
            if not torch.isfinite(torch.tensor(value)):
                raise RuntimeError(f"non-finite loss component {name!r}: {value}")

        self.optimizer.zero_grad()
        breakdown.total.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(
                [p for g in self.optimizer.param_groups for p in g["params"]],
                cfg.grad_clip,
            )
        self.optimizer.step()
        return LossBreakdown(
            diffuse=breakdown.diffuse.detach(),
            deform_similarity=breakdown.deform_similarity.detach(),
            deform_smooth=breakdown.deform_smooth.detach(),
            total=breakdown.total.detach(),
        )


def fit(
    dataset,
    cfg: TrainConfig,
    net_cfg: NetworkConfig | None = None,
    weights: ModelWeights | None = None,
    out_dir=None,
    log_every: int = 0,
):
    """Train on a sequence of subject records; returns (weights, epoch log).

    Each epoch runs one step per subject on its (ED, ES) pair. The log
    holds one record per epoch with the mean loss breakdown and wall
    time; when ``out_dir`` is given it is also written as JSON lines,
    and checkpoints are saved every ``cfg.checkpoint_every`` epochs.
    """
    records = list(dataset)
    if not records:
        raise ValueError("dataset is empty")
    if weights is None:
        if net_cfg is None:
            raise ValueError("either weights or net_cfg must be given")
        weights = build_networks(net_cfg, seed=cfg.seed)
    trainer = Trainer(weights, cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "training_log.jsonl", "w")

    log = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            start = time.time()
            sums = {"diffuse": 0.0, "deform_similarity": 0.0,
                    "deform_smooth": 0.0, "total": 0.0}
            try:
                for rec in records:
                    source = torch.as_tensor(rec.ed.data, dtype=torch.float32)
                    target = torch.as_tensor(rec.es.data, dtype=torch.float32)
                    breakdown = trainer.step(source, target)
                    for k, v in breakdown.as_dict().items():
                        sums[k] += v
            except RuntimeError:
                # abort; the last good checkpoint (if any) stays on disk
                if out_dir is not None:
                    save_checkpoint(weights, out_dir / "ckpt_aborted.pt",
                                    optimizer=trainer.optimizer)
                raise
            entry = {k: v / len(records) for k, v in sums.items()}
            entry["epoch"] = epoch
            entry["seconds"] = time.time() - start
            log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if log_every and epoch % log_every == 0:
                print(f"epoch {epoch}: total={entry['total']:.4f}")
            if out_dir is not None and (
                epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs
            ):
                save_checkpoint(weights, out_dir / "ckpt_last.pt",
                                optimizer=trainer.optimizer)
    finally:
        if log_file is not None:
            log_file.close()
    return weights, log


def save_checkpoint(weights: ModelWeights, path, optimizer=None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "net_config": weights.config.to_dict(),
        "diffusion_state": weights.diffusion.state_dict(),
        "deform_state": weights.deform.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path, expect_config: NetworkConfig | None = None) -> ModelWeights:
    payload = torch.load(path, weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {version} unsupported; expected {CHECKPOINT_VERSION}"
        )
    cfg = NetworkConfig.from_dict(payload["net_config"])
    if expect_config is not None and cfg != expect_config:
        raise ValueError(
            f"checkpoint config {cfg} does not match expected {expect_config}"
        )
    weights = build_networks(cfg, seed=0)
    weights.diffusion.load_state_dict(payload["diffusion_state"])
    weights.deform.load_state_dict(payload["deform_state"])
    return weights


def checkpoint_roundtrip(weights: ModelWeights, path) -> ModelWeights:
    """Save then load; the result is parameter-for-parameter identical."""
    save_checkpoint(weights, path)
    return load_checkpoint(path, expect_config=weights.config)
