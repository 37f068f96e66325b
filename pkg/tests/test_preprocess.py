import warnings
import zlib

import numpy as np
import pytest

from errors import CorruptStream, EmptySelection, PreprocessError
from mrc_io import VoxelGrid
from preprocess import (OCC_HEADER, NormalizationMeta, OccupancyMap, PointChunkStore,
                        build_chunk_store, compress_occupancy, decompress_occupancy,
                        normalize_coordinates, normalize_indices, threshold_and_map)


def test_threshold_is_strict():
    grid = VoxelGrid.from_array(np.array([[[0.0, 0.5, -0.2, 0.25]]], dtype=np.float32))
    occ, meta = threshold_and_map(grid, 0.25)
    assert occ.to_mask().tolist() == [False, True, False, False]
    assert meta.density_scale == 0.5


def test_default_threshold_zero_and_scale(small_grid):
    occ, meta = threshold_and_map(small_grid)
    assert occ.popcount == int(np.count_nonzero(small_grid.data > 0))
    assert meta.threshold == 0.0
    assert meta.density_scale == float(small_grid.data.max())


def test_empty_selection_warns():
    grid = VoxelGrid.from_array(-np.ones((2, 2, 2), dtype=np.float32))
    with pytest.warns(EmptySelection):
        occ, meta = threshold_and_map(grid, 0.0)
    assert occ.popcount == 0
    assert meta.density_scale is None


def test_negative_threshold_scale_fallback():
    grid = VoxelGrid.from_array(np.array([[[-0.5, -0.25, -2.0]]], dtype=np.float32))
    occ, meta = threshold_and_map(grid, -1.0)
    assert occ.popcount == 2
    assert meta.density_scale == 0.5


def test_non_finite_threshold_rejected(small_grid):
    with pytest.raises(PreprocessError):
        threshold_and_map(small_grid, float('nan'))


def test_normalize_coordinates_examples():
    assert normalize_coordinates((0, 0, 0), (64, 64, 64)) == (0.0, 0.0, 0.0)
    assert normalize_coordinates((63, 63, 63), (64, 64, 64)) == (1.0, 1.0, 1.0)
    assert normalize_coordinates((2, 0, 1), (5, 1, 3)) == (0.5, 0.0, 0.5)


def test_normalize_indices_matches_scalar_form():
    dims = (5, 1, 4)
    indices = np.arange(20)
    coords = normalize_indices(indices, dims, dtype=np.float64)
    for i, row in zip(indices, coords):
        ix, iy, iz = i % 5, (i // 5) % 1, i // 5
        assert tuple(row) == normalize_coordinates((ix, iy, iz), dims)


def test_occupancy_bits_are_lsb_first():
    mask = np.zeros(10, dtype=bool)
    mask[[0, 9]] = True
    occ = OccupancyMap.from_mask(mask, (10, 1, 1))
    assert occ.bits.tolist() == [0b00000001, 0b00000010]


def test_occupancy_round_trip_random(rng):
    for _ in range(1000):
        dims = tuple(int(n) for n in rng.integers(1, 25, size=3))
        mask = rng.random(int(np.prod(dims))) < rng.random()
        occ = OccupancyMap.from_mask(mask, dims)
        back = decompress_occupancy(compress_occupancy(occ))
        assert back == occ
        assert np.array_equal(back.bits, occ.bits)
    occ = OccupancyMap.from_mask(rng.random(64 ** 3) < 0.3, (64, 64, 64))
    assert decompress_occupancy(compress_occupancy(occ)) == occ


@pytest.mark.parametrize('length', [1, 3, 7, 8, 9, 15, 17, 63])
def test_occupancy_round_trip_partial_last_byte(rng, length):
    mask = rng.random(length) < 0.5
    mask[-1] = True
    occ = OccupancyMap.from_mask(mask, (length, 1, 1))
    assert occ.bits.size == -(-length // 8)
    back = decompress_occupancy(compress_occupancy(occ))
    assert np.array_equal(back.to_mask(), mask)


def test_zero_voxel_bitmap_round_trips():
    occ = OccupancyMap.from_mask(np.zeros(0, dtype=bool), (0, 1, 1))
    assert occ.bits.size == 0
    back = decompress_occupancy(compress_occupancy(occ))
    assert back == occ
    assert back.to_mask().size == 0
    with pytest.raises(CorruptStream):
        decompress_occupancy(OCC_HEADER.pack(0, 1, 1) + zlib.compress(b'\x01'))


def test_empty_bitmap_compresses_small():
    occ = OccupancyMap.from_mask(np.zeros(64 ** 3, dtype=bool), (64, 64, 64))
    assert len(compress_occupancy(occ)) < 200


@pytest.mark.parametrize('mutate', [
    lambda blob: blob[:5],
    lambda blob: blob[:-3],
    lambda blob: OCC_HEADER.pack(9, 9, 9) + blob[OCC_HEADER.size:],
    lambda blob: OCC_HEADER.pack(0, 4, 4) + blob[OCC_HEADER.size:],
    lambda blob: blob[:OCC_HEADER.size] + b'not deflate',
])
def test_corrupt_occupancy(mutate):
    occ = OccupancyMap.from_mask(np.arange(64) % 3 == 0, (4, 4, 4))
    with pytest.raises(CorruptStream):
        decompress_occupancy(mutate(compress_occupancy(occ)))


def test_chunk_store_layout(tmp_path, small_grid):
    occ, meta = threshold_and_map(small_grid, 0.0)
    store = build_chunk_store(small_grid, occ, meta, tmp_path / 'f.chnk', chunk_size=7, file_id=5)
    n = occ.popcount
    assert len(store) == n
    assert store.file_id == 5
    assert store.n_chunks == -(-n // 7)
    assert all(c == 7 for c in store.chunk_counts[:-1])

    coords = np.concatenate([store.read_chunk(k)[0] for k in range(store.n_chunks)])
    dens = np.concatenate([store.read_chunk(k)[1] for k in range(store.n_chunks)])
    indices = occ.occupied_indices()
    assert np.array_equal(coords, normalize_indices(indices, small_grid.dims))
    assert np.array_equal(dens, small_grid.data[indices] / np.float32(meta.density_scale))
    assert dens.max() == 1.0 and dens.min() > 0

    reopened = PointChunkStore.open(store.path)
    assert reopened.chunk_counts == store.chunk_counts
    assert reopened.chunk_start(2) == 14
    assert not list(tmp_path.glob('*.tmp'))


def test_chunk_store_empty_selection(tmp_path):
    grid = VoxelGrid.from_array(-np.ones((2, 2, 2), dtype=np.float32))
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', EmptySelection)
        occ, meta = threshold_and_map(grid)
    store = build_chunk_store(grid, occ, meta, tmp_path / 'e.chnk', chunk_size=4)
    assert len(store) == 0 and store.n_chunks == 0


def test_chunk_store_rejects_bad_magic(tmp_path):
    path = tmp_path / 'bad.chnk'
    path.write_bytes(b'XXXX' + bytes(24))
    with pytest.raises(CorruptStream):
        PointChunkStore.open(path)


def test_normalization_meta_dict_round_trip():
    meta = NormalizationMeta(threshold=0.05, density_scale=2.5)
    assert NormalizationMeta.from_dict(meta.to_dict()) == meta
    empty = NormalizationMeta(threshold=0.0)
    assert NormalizationMeta.from_dict(empty.to_dict()).density_scale is None
