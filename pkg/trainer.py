#!/usr/bin/env python
"""
Multi-file chunked training of the shared network and per-file latents

Each epoch walks chunk index k = 0, 1, ... and loads chunk k of every file
that has one (the next round is prefetched on a worker thread). Each chunk is
shuffled with the seeded generator, then batches alternate between the files
of the round so the shared network never sees one file for long:
forward -> weighted MSE -> backward -> Adam, with no batch crossing a chunk
boundary. The MLP has one Adam state; every latent has its own, stepped only
on batches of its file. After each epoch the validation loss decides
early stopping, and the best-validation state is what is returned.
"""

import logging
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import ENCODING_CONFIG, TRAIN_DEFAULTS, atomic_write_bytes, get_architecture
from errors import EmptyStore, LossError, NonFiniteLoss, TrainingError
from inr_core import (ModelState, backward, encode_batch, encoded_width, forward,
                      init_latents, init_params, parse_architecture, serialize_checkpoint)
from loss_opt import AdamState, adam_step, weighted_mse, weighted_mse_backward

logger = logging.getLogger(__name__)

HASH_BUCKETS = 10000
PREFETCH_DEPTH = 2


@dataclass
class TrainConfig:
    epochs: int = TRAIN_DEFAULTS['epochs']
    learning_rate: float = TRAIN_DEFAULTS['learning_rate']
    batch_size: int = TRAIN_DEFAULTS['batch_size']
    chunk_size: int = TRAIN_DEFAULTS['chunk_size']
    early_stop_patience: int = TRAIN_DEFAULTS['early_stop_patience']
    validation_fraction: float = TRAIN_DEFAULTS['validation_fraction']
    seed: int = TRAIN_DEFAULTS['seed']
    lr_decay: float = TRAIN_DEFAULTS['lr_decay']
    lr_final: float = TRAIN_DEFAULTS['lr_final']
    profile: str = TRAIN_DEFAULTS['profile']
    value_mean_scope: str = TRAIN_DEFAULTS['value_mean_scope']
    min_delta: float = TRAIN_DEFAULTS['min_delta']
    num_frequencies: int = ENCODING_CONFIG['num_frequencies']
    latent_dim: int = ENCODING_CONFIG['latent_dim']
    leaky_slope: float = ENCODING_CONFIG['leaky_slope']
    train_latents: bool = True
    progress: bool = False

    def __post_init__(self):
        for name in ('epochs', 'batch_size', 'chunk_size', 'early_stop_patience'):
            if int(getattr(self, name)) < 1:
                raise TrainingError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.validation_fraction < 0.5:
            raise TrainingError(f"validation_fraction must lie in (0, 0.5), got {self.validation_fraction}")
        if self.learning_rate <= 0:
            raise TrainingError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.value_mean_scope not in ('batch', 'chunk'):
            raise TrainingError(f"value_mean_scope must be 'batch' or 'chunk', got {self.value_mean_scope!r}")
        if self.lr_decay is not None and self.lr_final is not None:
            raise TrainingError("give either lr_decay or lr_final, not both")
        parse_architecture(self.architecture)

    @property
    def architecture(self):
        chain = get_architecture(self.profile)
        input_dim, _ = parse_architecture(chain)
        expected = encoded_width(self.num_frequencies, self.latent_dim)
        if input_dim != expected:
            # profiles are written for the default encoding; adapt the input width
            chain = str(expected) + chain[chain.index('-'):]
        return chain

    def lr_at(self, epoch):
        """Learning rate for a 0-based epoch."""
        if self.lr_decay is not None:
            return self.learning_rate * self.lr_decay ** epoch
        if self.lr_final is not None and self.epochs > 1:
            ratio = self.lr_final / self.learning_rate
            return self.learning_rate * ratio ** (epoch / (self.epochs - 1))
        return self.learning_rate


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = None
    stopped_early: bool = False

    def append(self, epoch, train_loss, val_loss, lr, seconds):
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.lr.append(lr)
        self.seconds.append(seconds)

    @property
    def best_val_loss(self):
        return None if self.best_epoch is None else self.val_loss[self.epochs.index(self.best_epoch)]

    def to_frame(self):
        return pd.DataFrame({
            'epoch': self.epochs,
            'train_loss': self.train_loss,
            'val_loss': self.val_loss,
            'lr': self.lr,
            'seconds': self.seconds,
        })

    def to_csv(self, path):
        atomic_write_bytes(path, self.to_frame().to_csv(index=False).encode('utf-8'))


# ---------------------------------------------------------------------------
# Validation split
# ---------------------------------------------------------------------------

def _splitmix64(x):
    """Vectorised splitmix64 finaliser on uint64 arrays (wrapping arithmetic)."""
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def validation_mask(seed, file_id, start, count, fraction):
    """True for point indices start..start+count-1 that belong to the validation view."""
    index = np.arange(start, start + count, dtype=np.uint64)
    key = np.array([(int(seed) & 0xFFFFFFFF) << 32 | (int(file_id) & 0xFFFFFFFF)], dtype=np.uint64)
    h = _splitmix64(_splitmix64(key) ^ index)
    return (h % np.uint64(HASH_BUCKETS)) < np.uint64(int(round(fraction * HASH_BUCKETS)))


class StoreView:
    """One side of a train/validation partition of a PointChunkStore."""

    def __init__(self, store, fraction, seed, validation):
        self.store = store
        self.fraction = fraction
        self.seed = seed
        self.validation = validation
        self._counts = None

    @property
    def file_id(self):
        return self.store.file_id

    def chunk_mask(self, k):
        mask = validation_mask(self.seed, self.store.file_id, self.store.chunk_start(k),
                               self.store.chunk_counts[k], self.fraction)
        return mask if self.validation else ~mask

    def point_indices(self, k):
        """Global point indices of this view inside chunk k."""
        return self.store.chunk_start(k) + np.flatnonzero(self.chunk_mask(k))

    def chunk_counts(self):
        if self._counts is None:
            self._counts = [int(np.count_nonzero(self.chunk_mask(k))) for k in range(self.store.n_chunks)]
        return self._counts

    def __len__(self):
        return int(sum(self.chunk_counts()))

    @property
    def n_chunks(self):
        return self.store.n_chunks

    def read_chunk(self, k):
        coords, dens = self.store.read_chunk(k)
        mask = self.chunk_mask(k)
        return coords[mask], dens[mask]


def split_validation(store, fraction=None, seed=None):
    """Deterministic hash split of a store into (train view, validation view)."""
    fraction = TRAIN_DEFAULTS['validation_fraction'] if fraction is None else fraction
    seed = TRAIN_DEFAULTS['seed'] if seed is None else seed
    if len(store) == 0:
        raise EmptyStore(f"store for file {store.file_id} holds no points")
    return StoreView(store, fraction, seed, False), StoreView(store, fraction, seed, True)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _prefetch(jobs, depth=PREFETCH_DEPTH):
    """Run the loader of each (key, loader) job on a worker thread, at most depth ahead."""
    buffer = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for key, loader in jobs:
                if stop.is_set():
                    return
                buffer.put((key, loader(), None))
        except BaseException as e:
            buffer.put((None, None, e))
        finally:
            buffer.put(done)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    try:
        while True:
            item = buffer.get()
            if item is done:
                break
            key, value, error = item
            if error is not None:
                raise error
            yield key, value
    finally:
        stop.set()
        while thread.is_alive():
            try:
                buffer.get_nowait()
            except queue.Empty:
                thread.join(timeout=0.05)


def _chunk_rounds(views):
    """Round k loads chunk k of every file that has one, as a single prefetch job."""
    max_chunks = max(view.n_chunks for view in views)
    for k in range(max_chunks):
        members = [view for view in views if k < view.n_chunks]
        yield k, (lambda members=members, k=k: [(view.file_id, view.read_chunk(k)) for view in members])


def _round_robin_batches(sizes, batch_size):
    """(member, slice) pairs taking one batch from each member in turn until all are spent."""
    starts = [0] * len(sizes)
    while True:
        emitted = False
        for i, n in enumerate(sizes):
            if starts[i] < n:
                stop = min(starts[i] + batch_size, n)
                yield i, slice(starts[i], stop)
                starts[i] = stop
                emitted = True
        if not emitted:
            return


def _batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def evaluate_views(state, views, batch_size, value_mean_scope='batch'):
    """Point-weighted mean of the batch weighted MSE over the views (no updates)."""
    total, count = 0.0, 0
    for view in views:
        for k in range(view.n_chunks):
            coords, dens = view.read_chunk(k)
            if dens.size == 0:
                continue
            mean_abs = float(np.abs(dens).mean()) if value_mean_scope == 'chunk' else None
            latent = state.latents.get(view.file_id)
            for sl in _batches(dens.size, batch_size):
                enc = encode_batch(coords[sl], latent, state.num_frequencies,
                                   state.latents.latent_dim, dtype=state.params.dtype)
                pred = forward(state.params, enc, slope=state.leaky_slope)
                loss, _ = weighted_mse(dens[sl].astype(pred.dtype), pred, mean_abs=mean_abs)
                total += loss * (sl.stop - sl.start)
                count += sl.stop - sl.start
    if count == 0:
        raise EmptyStore("evaluation views hold no points")
    return total / count


def evaluate_validation(state, view, batch_size=None, value_mean_scope='batch'):
    """Weighted MSE of state over one validation view (or a list of views)."""
    batch_size = batch_size or TRAIN_DEFAULTS['batch_size']
    views = view if isinstance(view, (list, tuple)) else [view]
    return evaluate_views(state, views, batch_size, value_mean_scope)


def improved(val_loss, best_val, min_delta):
    """An improvement of at least min_delta counts; non-finite losses never do."""
    return bool(np.isfinite(val_loss)) and val_loss <= best_val - min_delta


def _new_state(stores, config):
    chain = config.architecture
    params = init_params(chain, seed=config.seed, dtype=np.float32)
    latents = init_latents([s.file_id for s in stores], seed=config.seed,
                           latent_dim=config.latent_dim, trainable=config.train_latents)
    return ModelState(params, latents, config.num_frequencies, config.leaky_slope)


def train(stores, config=None, state=None, checkpoint_path=None, log_path=None):
    """
    Fit the shared network and latents to one or more chunk stores.

    Returns (ModelState, TrainLog) where the state is the best-validation
    snapshot. A checkpoint is written atomically at every improvement when
    checkpoint_path is given; the per-epoch log goes to log_path as CSV.
    """
    config = config or TrainConfig()
    stores = list(stores)
    if not stores:
        raise EmptyStore("train needs at least one chunk store")
    ids = [s.file_id for s in stores]
    if len(set(ids)) != len(ids):
        raise TrainingError(f"duplicate file ids among stores: {ids}")

    splits = [split_validation(s, config.validation_fraction, config.seed) for s in stores]
    train_views = [t for t, _ in splits]
    val_views = [v for _, v in splits if len(v) > 0]
    if not val_views:
        # tiny inputs: fall back to validating on the training points
        logger.warning("Validation split is empty; validating on training points")
        val_views = train_views

    state = state or _new_state(stores, config)
    missing = [i for i in ids if i not in state.latents.file_ids]
    if missing:
        raise TrainingError(f"no latent registered for file ids {missing}")

    mlp_opt = AdamState.for_params(state.params.arrays(), lr=config.learning_rate)
    latent_opts = {fid: AdamState.for_params([state.latents.get(fid)], lr=config.learning_rate)
                   for fid in ids}
    rng = np.random.default_rng([int(config.seed), 2])
    latent_dim = state.latents.latent_dim

    log = TrainLog()
    best_val = np.inf
    best_state = state.copy()
    stale = 0
    step = 0
    n_train = sum(len(v) for v in train_views)
    logger.info(f"Training {state.params.chain} ({state.params.n_parameters} parameters) on "
                f"{len(stores)} file(s): {n_train} train / {sum(len(v) for v in val_views)} validation points")

    epochs = tqdm(range(config.epochs), desc='epochs', disable=not config.progress)
    for epoch in epochs:
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        epoch_loss, epoch_points = 0.0, 0

        for k, chunks in _prefetch(_chunk_rounds(train_views)):
            work = []
            for file_id, (coords, dens) in chunks:
                order = rng.permutation(dens.size)
                mean_abs = (float(np.abs(dens).mean())
                            if config.value_mean_scope == 'chunk' and dens.size else None)
                work.append((file_id, coords[order], dens[order], mean_abs))

            for i, sl in _round_robin_batches([w[2].size for w in work], config.batch_size):
                file_id, coords, dens, mean_abs = work[i]
                latent = state.latents.get(file_id)
                step += 1
                enc = encode_batch(coords[sl], latent, state.num_frequencies, latent_dim,
                                   dtype=state.params.dtype)
                pred, cache = forward(state.params, enc, slope=state.leaky_slope, return_cache=True)
                target = dens[sl].astype(pred.dtype)
                try:
                    loss, report = weighted_mse(target, pred, mean_abs=mean_abs)
                except LossError as e:
                    raise NonFiniteLoss(f"epoch {epoch}, file {file_id}, chunk {k}, "
                                        f"batch rows {sl.start}-{sl.stop}: {e}") from e
                if not np.isfinite(loss):
                    logger.error(f"Non-finite loss at epoch {epoch}, file {file_id}, chunk {k}, "
                                 f"rows {sl.start}-{sl.stop}")
                    raise NonFiniteLoss(f"loss {loss} at epoch {epoch}, file {file_id}, chunk {k}")

                upstream = weighted_mse_backward(target, pred, weights=report.weights)
                grads, latent_grads = backward(state.params, enc, upstream, cache=cache,
                                               slope=state.leaky_slope, latent_dim=latent_dim)
                adam_step(mlp_opt, state.params.arrays(), grads, lr=lr)
                if state.latents.trainable:
                    # every row carries the same latent
                    adam_step(latent_opts[file_id], [latent], [latent_grads.sum(axis=0)], lr=lr)

                epoch_loss += loss * (sl.stop - sl.start)
                epoch_points += sl.stop - sl.start
                logger.debug(f"step {step}: loss {loss:.6g}, quantile {report.quantile:.4g}, "
                             f"mean|y| {report.mean_abs_y:.4g}")

        train_loss = epoch_loss / max(epoch_points, 1)
        val_loss = evaluate_views(state, val_views, config.batch_size, config.value_mean_scope)
        seconds = time.perf_counter() - t0
        log.append(epoch, train_loss, val_loss, lr, seconds)
        epochs.set_postfix(train=f"{train_loss:.3g}", val=f"{val_loss:.3g}")
        logger.info(f"Epoch {epoch + 1}/{config.epochs}: train {train_loss:.6g}, "
                    f"val {val_loss:.6g}, lr {lr:.3g}, {seconds:.1f}s")

        if improved(val_loss, best_val, config.min_delta):
            best_val = val_loss
            best_state = state.copy()
            log.best_epoch = epoch
            stale = 0
            if checkpoint_path:
                atomic_write_bytes(checkpoint_path, serialize_checkpoint(best_state))
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                log.stopped_early = True
                logger.info(f"Validation loss flat for {stale} epochs; stopping after epoch {epoch + 1}")
                break

    if log.best_epoch is None:
        # validation never improved on +inf only if it was non-finite throughout
        log.best_epoch = log.epochs[-1]
    if log_path:
        log.to_csv(log_path)
    logger.info(f"Best epoch {log.best_epoch + 1}: validation loss {best_val:.6g}")
    return best_state, log
