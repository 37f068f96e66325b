"""Shared fixtures: put the repository root on sys.path and build small grids."""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from mrc_io import VoxelGrid, write_mrc  # noqa: E402
from synth import synth_volume  # noqa: E402
from trainer import TrainConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid(rng):
    """7 x 6 x 5 grid (nx, ny, nz) with roughly half the voxels positive."""
    return VoxelGrid.from_array(rng.normal(size=(5, 6, 7)).astype(np.float32), voxel_size=1.5)


@pytest.fixture
def blob_grid():
    grid, _ = synth_volume(12, 3, seed=7)
    return grid


@pytest.fixture
def blob_bytes(blob_grid):
    return write_mrc(blob_grid)


@pytest.fixture
def tiny_config():
    """Fast training settings for pipeline tests."""
    return TrainConfig(epochs=2, batch_size=256, chunk_size=500, early_stop_patience=5,
                       validation_fraction=0.05, seed=3, profile='tiny')
