"""Reference forecasters: persistence and a per-task feed-forward network."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import numkit as nk
from .data import AlignedSeries, WindowBatch, as_series, window
from .errors import DataError, NumericFailure
from .model import TrainConfig, TrainingFailure, TrainingLog
from .numkit import AdamState, RandomSource


def baseline_persistence(series: AlignedSeries, tau: int) -> np.ndarray:
    """Row t holds the forecast for ``t + tau``, which is simply ``y_t``.

    Masked steps give NaN. ``tau`` only fixes which target each row is
    compared against; the values do not depend on it.
    """
    if tau < 1:
        raise DataError("tau must be >= 1")
    return np.where(series.mask, series.targets, np.nan)


def persistence_windows(batch: WindowBatch) -> np.ndarray:
    """Last observed target of every window, B x K."""
    return batch.inputs[:, -1, :, batch.target_feature].copy()


class PersistenceForecaster(RegressorMixin, BaseEstimator):
    def __init__(self, horizon=1):
        self.horizon = horizon

    def fit(self, X, y=None):
        self.n_tasks_ = as_series(X).n_nodes
        return self

    def predict(self, X):
        check_is_fitted(self, "n_tasks_")
        return baseline_persistence(as_series(X), self.horizon)

    def predict_windows(self, batch: WindowBatch):
        return persistence_windows(batch)


# -- per-task MLP ---------------------------------------------------------------

def mlp_param_shapes(k: int, L: int, f: int, d: int) -> dict:
    shapes = {}
    for task in range(k):
        shapes[f"w1_{task}"] = ((L * f, d), L * f)
        shapes[f"b1_{task}"] = ((1, d), L * f)
        shapes[f"w2_{task}"] = ((d, 1), d)
        shapes[f"b2_{task}"] = ((1, 1), d)
    return shapes


def mlp_init(k, L, f, d, rng: RandomSource) -> dict:
    return {name: rng.uniform(-1 / math.sqrt(fan), 1 / math.sqrt(fan), shape)
            for name, (shape, fan) in mlp_param_shapes(k, L, f, d).items()}


def mlp_forward(params, inputs: np.ndarray) -> list:
    """One tanh hidden layer per task on that node's flattened L x F window."""
    B, L, K, F = inputs.shape
    outs = []
    for task in range(K):
        x = inputs[:, :, task, :].reshape(B, L * F)
        h = nk.tanh(nk.affine(x, nk.constant(params[f"w1_{task}"]), nk.constant(params[f"b1_{task}"])))
        outs.append(nk.affine(h, nk.constant(params[f"w2_{task}"]), nk.constant(params[f"b2_{task}"])))
    return outs


def mlp_loss(params, batch: WindowBatch):
    outs = mlp_forward(params, batch.inputs)
    stacked = nk.concat_rows(outs) if len(outs) > 1 else outs[0]
    target = batch.last_targets.T.reshape(-1, 1)
    return nk.weighted_sse(stacked, target, 1.0) * (1.0 / target.size)


def mlp_predict(params, inputs: np.ndarray) -> np.ndarray:
    outs = mlp_forward(params, inputs)
    return np.concatenate([o.value for o in outs], axis=1)


def train_mlp(windows: WindowBatch, hidden_dim: int, tcfg: TrainConfig, seed: int = 0):
    if len(windows) == 0:
        raise DataError("training set has no windows")
    _, L, K, F = windows.inputs.shape
    rng = RandomSource(seed)
    params = mlp_init(K, L, F, hidden_dim, rng.derive("init"))
    state = AdamState(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    log = TrainingLog()
    for epoch in range(tcfg.epochs):
        order = rng.derive("shuffle", epoch).permutation(len(windows)) if tcfg.shuffle else None
        acc = 0.0
        try:
            for batch in windows.batches(tcfg.batch_size, order):
                value, grads = nk.grad_eval(lambda P: mlp_loss(P, batch), params)
                params, state = nk.opt_step(params, grads, state)
                acc += value * len(batch)
        except NumericFailure as exc:
            log.failed_epoch, log.failure = epoch, str(exc)
            raise TrainingFailure(exc, epoch, log) from exc
        log.epochs.append({"epoch": epoch, "train_loss": acc / len(windows)})
    return params, log


class MLPForecaster(RegressorMixin, BaseEstimator):
    """Per-task feed-forward model without recurrence or cross-node inputs."""

    def __init__(self, hidden_dim=16, horizon=1, window=12, epochs=50, batch_size=64,
                 learning_rate=1e-3, random_state=0):
        self.hidden_dim = hidden_dim
        self.horizon = horizon
        self.window = window
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y=None):
        series = as_series(X)
        windows = window(series, self.window, self.horizon, 1)
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.learning_rate)
        self.params_, self.log_ = train_mlp(windows, self.hidden_dim, tcfg, self.random_state)
        self.n_tasks_ = series.n_nodes
        return self

    def predict_windows(self, batch) -> np.ndarray:
        check_is_fitted(self, "params_")
        inputs = batch.inputs if isinstance(batch, WindowBatch) else np.asarray(batch, dtype=np.float64)
        return mlp_predict(self.params_, inputs)

    def predict(self, X) -> np.ndarray:
        """T x K forecasts; row t uses steps t-L+1..t (NaN when unavailable)."""
        check_is_fitted(self, "params_")
        series = as_series(X)
        L = self.window
        out = np.full((series.n_steps, series.n_nodes), np.nan)
        valid = series.mask.all(axis=1)
        bad = np.concatenate([[0], np.cumsum(~valid)])
        idx = np.array([t for t in range(L - 1, series.n_steps) if bad[t + 1] == bad[t - L + 1]],
                       dtype=np.intp)
        if idx.size:
            out[idx] = mlp_predict(self.params_, series.values[idx[:, None] - L + 1 + np.arange(L)])
        return out
