import pytest
import torch

from diffwarp import NetworkConfig


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(1234)


@pytest.fixture
def tiny_cfg():
    return NetworkConfig(
        image_shape=(8, 16, 16),
        diffusion_channels=(4, 8),
        deform_channels=(4, 8),
        time_embed_dim=8,
    )


@pytest.fixture
def desk_cfg():
    return NetworkConfig(
        image_shape=(8, 32, 32),
        diffusion_channels=(4, 8, 16),
        deform_channels=(8, 16, 16),
        time_embed_dim=16,
    )
