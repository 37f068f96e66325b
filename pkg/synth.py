#!/usr/bin/env python
"""
Synthetic density maps: sums of anisotropic Gaussian blobs.

Blob centres sit on voxel positions inside the central 60% of each axis,
widths are drawn per axis and amplitudes lie in (0.2, 1]. Optional additive
Gaussian noise imitates low-density background scattering.

USAGE:
    python synth.py 64 8 42 out.mrc
"""

import logging
import sys
from dataclasses import dataclass

import numpy as np

from errors import CryoInrError
from mrc_io import VoxelGrid, save_mrc

logger = logging.getLogger(__name__)

MIN_SHAPE = 8


@dataclass
class Blob:
    center: tuple      # voxel indices (x, y, z)
    sigma: tuple       # voxels, per axis
    amplitude: float


def random_blobs(shape, n_blobs, rng):
    nx, ny, nz = shape
    blobs = []
    for _ in range(n_blobs):
        center = tuple(int(rng.integers(int(0.2 * n), int(0.8 * n) + 1)) for n in (nx, ny, nz))
        sigma = tuple(float(rng.uniform(0.04, 0.12) * n) for n in (nx, ny, nz))
        amplitude = 0.2 + 0.8 * (1.0 - float(rng.random()))
        blobs.append(Blob(center, sigma, amplitude))
    return blobs


def render_blobs(shape, blobs):
    """(nz, ny, nx) float64 volume holding the sum of the blobs."""
    nx, ny, nz = shape
    volume = np.zeros((nz, ny, nx), dtype=np.float64)
    axes = [np.arange(n, dtype=np.float64) for n in (nx, ny, nz)]
    for blob in blobs:
        gx, gy, gz = (np.exp(-0.5 * ((a - c) / s) ** 2) for a, c, s in zip(axes, blob.center, blob.sigma))
        volume += blob.amplitude * gz[:, None, None] * gy[None, :, None] * gx[None, None, :]
    return volume


def synth_volume(shape=64, n_blobs=8, seed=42, noise=0.0, voxel_size=1.0):
    """Return (VoxelGrid, blobs); deterministic per seed."""
    if np.isscalar(shape):
        shape = (int(shape),) * 3
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < MIN_SHAPE:
        raise CryoInrError(f"shape must be 3 sizes >= {MIN_SHAPE}, got {shape}")
    if n_blobs < 1:
        raise CryoInrError(f"need at least one blob, got {n_blobs}")
    if noise < 0:
        raise CryoInrError(f"noise sigma must be >= 0, got {noise}")

    rng = np.random.default_rng(seed)
    blobs = random_blobs(shape, n_blobs, rng)
    volume = render_blobs(shape, blobs)
    if noise > 0:
        volume += rng.normal(0.0, noise, size=volume.shape)
    grid = VoxelGrid.from_array(volume.astype(np.float32), voxel_size=voxel_size,
                                labels=[f"cryoinr synth: {n_blobs} blobs, seed {seed}, noise {noise:g}"])
    logger.info(f"Synthesised {shape} volume with {n_blobs} blobs (seed {seed}, noise {noise:g})")
    return grid, blobs


if __name__ == '__main__':
    if len(sys.argv) != 5:
        print(f"Usage: python {sys.argv[0]} shape blobs seed out.mrc")
        sys.exit(1)
    grid, _ = synth_volume(int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3]))
    print(f"Wrote {save_mrc(sys.argv[4], grid)}")
