from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from errors import DimensionMismatch, EmptyStore, TrainingError, UnknownProfile
from inr_core import (ModelState, init_latents, init_params, parse_checkpoint, serialize_checkpoint,
                      zeros_params)
from mrc_io import VoxelGrid
from preprocess import build_chunk_store, threshold_and_map
from synth import synth_volume
from trainer import (TrainConfig, _chunk_rounds, _prefetch, _round_robin_batches, evaluate_validation,
                     improved, split_validation, train, validation_mask)


def make_store(grid, path, file_id=0, chunk_size=500):
    occ, meta = threshold_and_map(grid)
    return build_chunk_store(grid, occ, meta, path, chunk_size=chunk_size, file_id=file_id)


# ---------------------------------------------------------------------------
# Validation split
# ---------------------------------------------------------------------------

def test_validation_fraction_within_three_sigma():
    n, fraction = 1_000_000, 0.01
    count = int(validation_mask(seed=0, file_id=0, start=0, count=n, fraction=fraction).sum())
    sigma = np.sqrt(n * fraction * (1 - fraction))
    assert abs(count - n * fraction) <= 3 * sigma


def test_validation_mask_depends_on_seed_and_file():
    a = validation_mask(0, 0, 0, 10_000, 0.1)
    assert np.array_equal(a, validation_mask(0, 0, 0, 10_000, 0.1))
    assert not np.array_equal(a, validation_mask(1, 0, 0, 10_000, 0.1))
    assert not np.array_equal(a, validation_mask(0, 1, 0, 10_000, 0.1))
    # membership is per point, so a shifted window sees the same answers
    assert np.array_equal(a[100:], validation_mask(0, 0, 100, 9_900, 0.1))


def test_split_is_a_partition(tmp_path, blob_grid):
    store = make_store(blob_grid, tmp_path / 'f.chnk', chunk_size=37)
    train_view, val_view = split_validation(store, 0.2, seed=9)
    assert len(train_view) + len(val_view) == len(store)
    for k in range(store.n_chunks):
        t = set(train_view.point_indices(k).tolist())
        v = set(val_view.point_indices(k).tolist())
        assert not t & v
        start = store.chunk_start(k)
        assert t | v == set(range(start, start + store.chunk_counts[k]))
    coords, dens = val_view.read_chunk(0)
    assert coords.shape == (val_view.chunk_counts()[0], 3)
    assert dens.shape == (val_view.chunk_counts()[0],)


def test_split_of_empty_store(tmp_path):
    grid = VoxelGrid.from_array(-np.ones((2, 2, 2), dtype=np.float32))
    with pytest.warns(UserWarning):
        store = make_store(grid, tmp_path / 'e.chnk')
    with pytest.raises(EmptyStore):
        split_validation(store, 0.1, 0)


# ---------------------------------------------------------------------------
# Configuration and plumbing
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('kwargs', [
    {'epochs': 0},
    {'batch_size': 0},
    {'validation_fraction': 0.0},
    {'validation_fraction': 0.5},
    {'learning_rate': 0.0},
    {'value_mean_scope': 'epoch'},
    {'lr_decay': 0.9, 'lr_final': 1e-5},
])
def test_train_config_rejects(kwargs):
    with pytest.raises(TrainingError):
        TrainConfig(**kwargs)


def test_train_config_checks_architecture_up_front():
    with pytest.raises(UnknownProfile):
        TrainConfig(profile='huge')
    with pytest.raises(DimensionMismatch):
        TrainConfig(profile='127-Re')


def test_learning_rate_schedules():
    assert TrainConfig(learning_rate=0.01).lr_at(7) == 0.01
    assert TrainConfig(learning_rate=0.01, lr_decay=0.5).lr_at(2) == pytest.approx(0.0025)
    geometric = TrainConfig(learning_rate=1e-2, lr_final=1e-4, epochs=3)
    assert geometric.lr_at(0) == pytest.approx(1e-2)
    assert geometric.lr_at(1) == pytest.approx(1e-3)
    assert geometric.lr_at(2) == pytest.approx(1e-4)


def test_architecture_follows_encoding():
    assert TrainConfig(profile='tiny').architecture == '127-16-Re-8-1'
    assert TrainConfig(profile='tiny', num_frequencies=2, latent_dim=4).architecture == '19-16-Re-8-1'


def test_chunk_rounds_group_files_by_chunk_index():
    views = [SimpleNamespace(file_id=0, n_chunks=3, read_chunk=lambda k: ('a', k)),
             SimpleNamespace(file_id=1, n_chunks=1, read_chunk=lambda k: ('b', k))]
    keys = [key for key, _ in _chunk_rounds(views)]
    assert keys == [0, 1, 2]
    values = [value for _, value in _prefetch(_chunk_rounds(views))]
    assert values == [[(0, ('a', 0)), (1, ('b', 0))], [(0, ('a', 1))], [(0, ('a', 2))]]


def test_batches_alternate_between_files():
    schedule = [(i, (sl.start, sl.stop)) for i, sl in _round_robin_batches([5, 2], 2)]
    assert schedule == [(0, (0, 2)), (1, (0, 2)), (0, (2, 4)), (0, (4, 5))]


def test_round_robin_skips_empty_chunks():
    schedule = [(i, (sl.start, sl.stop)) for i, sl in _round_robin_batches([0, 3, 0], 2)]
    assert schedule == [(1, (0, 2)), (1, (2, 3))]
    assert list(_round_robin_batches([], 4)) == []


def test_prefetch_reraises_loader_errors():
    def boom():
        raise OSError('disk went away')

    jobs = [('ok', lambda: 1), ('bad', boom), ('never', lambda: 3)]
    seen = []
    with pytest.raises(OSError, match='disk went away'):
        for key, _ in _prefetch(iter(jobs)):
            seen.append(key)
    assert seen == ['ok']


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_training_is_deterministic(tmp_path, blob_grid, tiny_config):
    store = make_store(blob_grid, tmp_path / 'f.chnk')
    first, _ = train([store], tiny_config)
    second, _ = train([store], tiny_config)
    assert serialize_checkpoint(first) == serialize_checkpoint(second)


def test_training_writes_log_and_checkpoint(tmp_path, blob_grid, tiny_config):
    store = make_store(blob_grid, tmp_path / 'f.chnk')
    ckpt, log_path = tmp_path / 'best.inrc', tmp_path / 'log.csv'
    state, log = train([store], tiny_config, checkpoint_path=ckpt, log_path=log_path)

    frame = pd.read_csv(log_path)
    assert list(frame.columns) == ['epoch', 'train_loss', 'val_loss', 'lr', 'seconds']
    assert len(frame) == len(log.epochs) == 2
    assert np.all(np.isfinite(frame['train_loss']))
    assert log.best_val_loss <= min(log.val_loss) + 1e-6
    assert serialize_checkpoint(parse_checkpoint(ckpt.read_bytes())) == serialize_checkpoint(state)


def test_latents_of_other_files_are_untouched(tmp_path, blob_grid, tiny_config):
    store = make_store(blob_grid, tmp_path / 'f.chnk', file_id=0)
    initial = ModelState(init_params(tiny_config.architecture, seed=5), init_latents([0, 1], seed=5))
    before = initial.latents.vectors.copy()

    trained, _ = train([store], tiny_config, state=initial)
    assert np.array_equal(trained.latents.get(1), before[1])
    assert not np.array_equal(trained.latents.get(0), before[0])


def test_frozen_latents_stay_fixed(tmp_path, blob_grid):
    store = make_store(blob_grid, tmp_path / 'f.chnk')
    config = TrainConfig(epochs=2, batch_size=256, profile='tiny', train_latents=False, seed=1)
    latents = init_latents([0], seed=1)
    state, _ = train([store], config)
    assert np.array_equal(state.latents.vectors, latents.vectors)


def test_missing_latent_is_an_error(tmp_path, blob_grid, tiny_config):
    store = make_store(blob_grid, tmp_path / 'f.chnk', file_id=3)
    state = ModelState(zeros_params(tiny_config.architecture), init_latents([0]))
    with pytest.raises(TrainingError):
        train([store], tiny_config, state=state)


def test_duplicate_store_ids_rejected(tmp_path, blob_grid, tiny_config):
    a = make_store(blob_grid, tmp_path / 'a.chnk')
    b = make_store(blob_grid, tmp_path / 'b.chnk')
    with pytest.raises(TrainingError):
        train([a, b], tiny_config)
    with pytest.raises(EmptyStore):
        train([], tiny_config)


def test_validation_loss_of_perfect_predictor_is_zero(tmp_path, tiny_config):
    grid = VoxelGrid.from_array(np.full((6, 6, 6), 0.7, dtype=np.float32))
    store = make_store(grid, tmp_path / 'c.chnk')
    params = zeros_params(tiny_config.architecture)
    params.layers[-1].bias[:] = 1.0
    state = ModelState(params, init_latents([0]))
    _, val_view = split_validation(store, 0.2, seed=0)
    assert evaluate_validation(state, val_view, batch_size=64) == 0.0


def test_early_stopping_returns_best_epoch(tmp_path, blob_grid):
    store = make_store(blob_grid, tmp_path / 'f.chnk')
    config = TrainConfig(epochs=20, learning_rate=1e-12, early_stop_patience=3, batch_size=256,
                         profile='tiny', seed=2)
    _, log = train([store], config)
    assert log.stopped_early
    assert log.epochs == [0, 1, 2, 3]
    assert log.best_epoch == 0


def test_improvement_of_exactly_min_delta_counts():
    assert improved(0.75, 1.0, 0.25)
    assert not improved(0.875, 1.0, 0.25)
    assert improved(0.5, np.inf, 1e-6)
    assert not improved(np.inf, np.inf, 1e-6)
    assert not improved(np.nan, 1.0, 1e-6)


def test_multiple_files_train_together(tmp_path, tiny_config):
    grids = [synth_volume(10, 2, seed=s)[0] for s in (1, 2)]
    stores = [make_store(g, tmp_path / f'{i}.chnk', file_id=i, chunk_size=120)
              for i, g in enumerate(grids)]
    state, log = train(stores, tiny_config)
    assert state.latents.file_ids == [0, 1]
    assert len(log.epochs) == 2


@pytest.mark.slow
def test_desk_profile_learns_a_small_volume(tmp_path):
    grid, _ = synth_volume(16, 4, seed=1)
    store = make_store(grid, tmp_path / 'f.chnk', chunk_size=100_000)
    config = TrainConfig(epochs=200, batch_size=512, early_stop_patience=200, profile='desk',
                         validation_fraction=0.05, seed=0)
    _, log = train([store], config)
    assert log.train_loss[0] / min(log.train_loss) >= 10.0
