"""Shared fixtures: small models, toy data, and deterministic RNG."""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from excon import (
    ArrayDataset,
    AugmentPolicy,
    ModelConfig,
    TrainConfig,
    build_model,
    fit,
    make_synthetic_toy,
)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        input_shape=(32, 32, 3), encoder_dim=32, projection_dim=8, num_classes=3
    )


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=7)


@pytest.fixture(scope="session")
def toy_small() -> ArrayDataset:
    """2 classes x 12 images at 32x32, with ground-truth masks."""
    return make_synthetic_toy(2, 12, 32, seed=11)


@pytest.fixture(scope="session")
def trained_toy():
    """A small model trained to saturation on the 2-class toy task."""
    ds = make_synthetic_toy(2, 24, 32, seed=5)
    cfg = TrainConfig(
        method="excon", epochs=25, batch_size=16, base_lr=2e-3, optimizer="adam",
        warmup_epochs=3, excon_start_epoch=0, seed=3,
    )
    policy = AugmentPolicy(
        crop_scale=(0.6, 1.0), brightness=0.2, contrast=0.2, saturation=0.2,
        hue=0.05, grayscale_prob=0.0,
    )
    mc = ModelConfig(input_shape=(32, 32, 3), encoder_dim=32, projection_dim=8, num_classes=2)
    res = fit(cfg, ds, mc, policy=policy)
    res.model.eval()
    return res


@pytest.fixture
def unit_rows():
    def _make(n: int, dim: int, seed: int = 0, dtype=torch.float64) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed)
        rows = torch.randn(n, dim, generator=gen, dtype=dtype)
        return rows / rows.norm(dim=1, keepdim=True)

    return _make
