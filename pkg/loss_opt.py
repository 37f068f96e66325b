#!/usr/bin/env python
"""
Weighted MSE loss and the Adam optimizer

Per batch of N points with targets y and predictions y_hat:
    mse_i     = (y_i - y_hat_i)^2
    w_value_i = ((|y_i| + eps) / (mean_j |y_j| + eps))^2
    w_error_i = boost if mse_i > Q (nearest-rank percentile of mse) else 1
    w_i       = w_value_i * w_error_i / mean_j(w_value_j * w_error_j)
    loss      = mean_i(mse_i * w_i)
The weights are treated as constants when differentiating.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from config import ADAM_CONFIG, LOSS_CONFIG
from errors import EmptyBatch, NonFiniteInput, ShapeMismatch

logger = logging.getLogger(__name__)


@dataclass
class LossBatchReport:
    mse_point: np.ndarray
    w_value: np.ndarray
    w_error: np.ndarray
    weights: np.ndarray
    loss: float
    quantile: float
    mean_abs_y: float


def _as_batch(values, name):
    values = np.asarray(values)
    if values.ndim != 1:
        values = values.reshape(-1)
    if values.size == 0:
        raise EmptyBatch(f"{name} is empty")
    return values


def mse_point(y, y_hat):
    """Point-wise squared error (y - y_hat)^2."""
    diff = np.asarray(y) - np.asarray(y_hat)
    return diff * diff


def value_weights(y, epsilon=None, mean_abs=None):
    """
    ((|y| + eps) / (E|y| + eps))^2. E|y| is the batch mean unless mean_abs is
    supplied (chunk-level statistics).
    """
    epsilon = LOSS_CONFIG['epsilon'] if epsilon is None else epsilon
    y = _as_batch(y, 'y')
    abs_y = np.abs(y)
    if mean_abs is None:
        mean_abs = abs_y.mean()
    ratio = (abs_y + epsilon) / (mean_abs + epsilon)
    return ratio * ratio


def nearest_rank_quantile(values, percentile=None):
    """Value at rank ceil(percentile/100 * N) of the ascending-sorted values."""
    percentile = LOSS_CONFIG['error_percentile'] if percentile is None else percentile
    values = _as_batch(values, 'values')
    n = values.size
    # integer ceiling keeps 0.9 * 20 from landing on 18.000000000000004
    rank = max(1, -(-int(percentile) * n // 100)) if float(percentile).is_integer() \
        else max(1, int(np.ceil(percentile / 100.0 * n)))
    return np.sort(values)[min(rank, n) - 1]


def error_weights(mse, percentile=None, boost=None):
    """boost where mse strictly exceeds the nearest-rank percentile, 1 elsewhere."""
    boost = LOSS_CONFIG['error_boost'] if boost is None else boost
    mse = _as_batch(mse, 'mse')
    q = nearest_rank_quantile(mse, percentile)
    return np.where(mse > q, mse.dtype.type(boost), mse.dtype.type(1)), q


def _check_pair(y, y_hat):
    y = _as_batch(y, 'y')
    y_hat = _as_batch(y_hat, 'y_hat')
    if y.shape != y_hat.shape:
        raise ShapeMismatch(f"y has {y.size} values, y_hat has {y_hat.size}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(y_hat))):
        raise NonFiniteInput("non-finite value in targets or predictions")
    return y, y_hat


def weighted_mse(y, y_hat, mean_abs=None, epsilon=None, percentile=None, boost=None):
    """Return (loss, LossBatchReport) for one batch."""
    y, y_hat = _check_pair(y, y_hat)
    mse = mse_point(y, y_hat)
    w_value = value_weights(y, epsilon, mean_abs)
    w_error, q = error_weights(mse, percentile, boost)
    product = w_value * w_error
    weights = product / product.mean()
    loss = float(np.mean(mse * weights))
    report = LossBatchReport(
        mse_point=mse, w_value=w_value, w_error=w_error, weights=weights, loss=loss,
        quantile=float(q),
        mean_abs_y=float(np.abs(y).mean() if mean_abs is None else mean_abs),
    )
    return loss, report


def weighted_mse_backward(y, y_hat, weights=None, mean_abs=None):
    """d loss / d y_hat = -2 w (y - y_hat) / N with the weights held constant."""
    y, y_hat = _check_pair(y, y_hat)
    if weights is None:
        _, report = weighted_mse(y, y_hat, mean_abs=mean_abs)
        weights = report.weights
    weights = np.asarray(weights, dtype=y_hat.dtype)
    if weights.shape != y.shape:
        raise ShapeMismatch(f"{weights.size} weights for {y.size} points")
    return (-2.0 / y.size) * weights * (y - y_hat)


@dataclass
class AdamState:
    """Moments for a fixed list of parameter arrays."""
    m: list
    v: list
    step: int = 0
    lr: float = 0.001
    beta1: float = field(default_factory=lambda: ADAM_CONFIG['beta1'])
    beta2: float = field(default_factory=lambda: ADAM_CONFIG['beta2'])
    eps: float = field(default_factory=lambda: ADAM_CONFIG['eps'])

    @classmethod
    def for_params(cls, arrays, lr=0.001):
        return cls(m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays], lr=lr)

    def copy(self):
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v],
                         self.step, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(state, params, grads, lr=None):
    """
    One bias-corrected Adam update applied in place to the arrays in params.
    Returns (params, state).
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeMismatch(f"{len(params)} parameter arrays, {len(grads)} gradients, "
                            f"{len(state.m)} moment slots")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeMismatch(f"parameter {p.shape}, gradient {np.shape(g)}, moment {m.shape}")

    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.dtype)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return params, state
