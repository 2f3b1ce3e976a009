"""Deformable interpolation between 3D volumes via a scaled diffusion latent code.

A source and target volume are registered by two jointly trained
networks: one estimates a noise-matching latent code from the pair, the
other turns the (scaled) code into a displacement field. Scaling the
code by gamma in [0, 1] sweeps a continuous, topology-preserving
trajectory of intermediate frames from source to target.
"""

from .fields import scale_field, spatial_gradient, warp_nearest, warp_trilinear
from .schedule import NoiseSchedule, make_linear_schedule, perturb, sample_timestep
from .losses import (
    LossBreakdown,
    dice,
    diffusion_loss,
    local_ncc,
    nmse,
    psnr,
    smoothness_penalty,
    total_loss,
)
from .networks import (
    ModelWeights,
    NetworkConfig,
    build_networks,
    deformation_forward,
    diffusion_forward,
)
from .train import (
    TrainConfig,
    Trainer,
    checkpoint_roundtrip,
    fit,
    load_checkpoint,
    save_checkpoint,
)
from .generate import (
    FrameResult,
    baseline_scaled_sequence,
    estimate_latent,
    generate_frame,
    generate_sequence,
)
from .data import (
    SegmentationMap,
    SubjectRecord,
    Volume,
    load_dataset_dir,
    load_volume,
    make_synthetic_pair,
    preprocess,
    split_dataset,
    write_synthetic_dataset,
)

__version__ = "0.1.0"
