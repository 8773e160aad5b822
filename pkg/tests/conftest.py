from pathlib import Path

import numpy as np
import pytest

from jsenet import tensor as T
from jsenet.config import TrainConfig
from jsenet.geometry import PointCloud

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session", autouse=True)
def float64_tensors():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float32)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def tiny_config() -> TrainConfig:
    """Narrow five-stage model; a few training steps take seconds."""
    return TrainConfig(
        num_classes=3,
        sphere_radius=0.5,
        grid_cell=0.04,
        first_features_dim=4,
        side_width=4,
        fusion_width=4,
        stage1_epochs=1,
        stage2_epochs=1,
        steps_per_epoch=2,
        checkpoint_every=1,
        augment=False,
        edge_radius=0.05,
    )


@pytest.fixture
def block_cloud() -> PointCloud:
    """Three labelled slabs along x on a jittered 4 cm grid, 0.36 m x 0.24 m x 0.08 m."""
    rng = np.random.default_rng(3)
    grid = np.stack(np.meshgrid(np.arange(9), np.arange(6), np.arange(2), indexing="ij"), axis=-1).reshape(-1, 3)
    positions = grid * 0.04 + 0.02 + rng.uniform(-0.005, 0.005, size=grid.shape)
    labels = np.digitize(positions[:, 0], [0.12, 0.24])
    return PointCloud(positions, rng.random((len(grid), 3)), labels)
