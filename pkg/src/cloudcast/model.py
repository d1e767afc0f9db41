"""Graph-propagated multi-task forecaster.

Per step, for every node k (rows of K x d matrices):

    h      = tanh(x W_e + b_e)                                  shared encoder
    alpha  = sigmoid([h | h~_prev] w_a + b_a)
    h~     = alpha h + (1 - alpha) h~_prev                      state fusion
    z      = sigmoid(A h~ W_s)                                  graph propagation
    lambda = sigmoid(w_l |x - x_prev| + b_l)
    g      = lambda z + (1 - lambda) h~                         gated fusion
    s      = beta s_prev + (1 - beta) |x - x_prev|
    g'     = sigmoid(u s + c) g                                 dynamic adjustment
    y      = w_h^(k) . relu([g'_t | ... | g'_{t-m+1}] W_sh + b_sh) + b_h^(k)

``y`` forecasts the target feature of node k ``tau`` steps ahead. Batches
of windows are stacked as B blocks of K rows so every step is a handful of
2-D operations on the gradient tape.
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import numkit as nk
from ._validation import (check_adjacency, check_inputs, check_positive_float,
                          check_positive_int, check_task_weights)
from .data import AlignedSeries, WindowBatch, as_series, window
from .errors import ConfigError, DataError, NumericFailure, ShapeError
from .io import atomic_write_text
from .numkit import AdamState, RandomSource, Tensor
from .structure import AdjacencyMatrix, adjacency_from_correlation

MODEL_FORMAT = "cloudcast-model"
MODEL_VERSION = 1


@dataclass
class ModelConfig:
    k: int
    f: int
    d: int = 16
    m: int = 2
    tau: int = 1
    L: int = 12
    use_graph: bool = True
    use_fusion: bool = True
    use_dynamic: bool = True
    task_weights: tuple | None = None
    d_dec: int | None = None
    beta_s: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("k", "f", "d", "m", "tau", "L"):
            check_positive_int(name, getattr(self, name))
        if self.L < self.m:
            raise ConfigError(f"window length L={self.L} must be >= context m={self.m}")
        if self.d_dec is None:
            self.d_dec = self.d
        check_positive_int("d_dec", self.d_dec)
        if not 0.0 <= self.beta_s < 1.0:
            raise ConfigError("beta_s must lie in [0, 1)")
        self.task_weights = check_task_weights(self.task_weights, self.k)
        check_positive_int("seed", self.seed, minimum=0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_weights"] = list(self.task_weights)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int | None = None
    shuffle: bool = True

    def __post_init__(self):
        check_positive_int("epochs", self.epochs, minimum=0)
        check_positive_int("batch_size", self.batch_size)
        check_positive_float("lr", self.lr)
        if self.patience is not None:
            check_positive_int("patience", self.patience)

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameters -----------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict:
    """name -> (shape, fan_in) in canonical order."""
    d, k, f, md = cfg.d, cfg.k, cfg.f, cfg.m * cfg.d
    return {
        "encoder_w": ((f, d), f),
        "encoder_b": ((1, d), f),
        "fusion_w": ((2 * d, 1), 2 * d),
        "fusion_b": ((1, 1), 2 * d),
        "propagate_w": ((d, d), d),
        "gate_w": ((1, 1), 1),
        "gate_b": ((1, 1), 1),
        "dynamic_u": ((1, 1), 1),
        "dynamic_c": ((1, 1), 1),
        "trunk_w": ((md, cfg.d_dec), md),
        "trunk_b": ((1, cfg.d_dec), md),
        "head_w": ((k, cfg.d_dec), cfg.d_dec),
        "head_b": ((k, 1), cfg.d_dec),
    }


def init_params(cfg: ModelConfig, rng: RandomSource | None = None) -> dict:
    """Uniform in +-1/sqrt(fan_in), drawn in canonical parameter order."""
    rng = rng or RandomSource(cfg.seed).derive("init")
    params = {}
    for name, (shape, fan_in) in param_shapes(cfg).items():
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, shape)
    return params


def zero_params(cfg: ModelConfig) -> dict:
    return {name: np.zeros(shape) for name, (shape, _) in param_shapes(cfg).items()}


def check_params(params: dict, cfg: ModelConfig) -> dict:
    out = {}
    for name, (shape, _) in param_shapes(cfg).items():
        if name not in params:
            raise ShapeError(f"missing parameter {name!r}")
        arr = np.asarray(params[name], dtype=np.float64)
        if arr.shape != shape:
            raise ShapeError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
        if not np.isfinite(arr).all():
            raise NumericFailure("check_params", f"parameter {name!r} is not finite")
        out[name] = arr
    return out


# -- per-step operations --------------------------------------------------------

def _p(params, name):
    return nk.constant(params[name])


def encode(x, params) -> Tensor:
    """Shared per-node encoding: tanh(x W_e + b_e), same weights for all rows."""
    x = nk.constant(x)
    if not np.isfinite(x.value).all():
        raise NumericFailure("encode")
    return nk.tanh(nk.affine(x, _p(params, "encoder_w"), _p(params, "encoder_b")))


def fuse_state(h, prev_fused, params, use_fusion=True):
    """Blend the current encoding with the previous fused state.

    Returns ``(fused, alpha)`` with one gate value per row.
    """
    h, prev_fused = nk.constant(h), nk.constant(prev_fused)
    if not use_fusion:
        return h, None
    gate_in = nk.concat_cols([h, prev_fused])
    alpha = nk.sigmoid(nk.affine(gate_in, _p(params, "fusion_w"), _p(params, "fusion_b")))
    return nk.mix(alpha, h, prev_fused), alpha


def propagate(fused, A, params) -> Tensor:
    """sigmoid(A h~ W_s), A applied within every K-row block."""
    return nk.sigmoid(nk.block_mix(A, fused) @ _p(params, "propagate_w"))


def fluctuation(x, prev_x) -> np.ndarray:
    """Row-wise L2 norm of the input change, as an n x 1 column."""
    diff = np.asarray(x, dtype=np.float64) - np.asarray(prev_x, dtype=np.float64)
    return np.sqrt((diff * diff).sum(axis=1, keepdims=True))


def gate_fuse(z, fused, fluct, params):
    """Convex gate between propagated and local states, driven by input change."""
    z, fused = nk.constant(z), nk.constant(fused)
    lam = nk.sigmoid(nk.affine(fluct, _p(params, "gate_w"), _p(params, "gate_b")))
    return nk.mix(lam, z, fused), lam


def update_intensity(s_prev, fluct, beta_s=0.9) -> np.ndarray:
    return beta_s * np.asarray(s_prev) + (1.0 - beta_s) * np.asarray(fluct)


def dynamic_adjust(g, intensity, params, use_dynamic=True):
    """Scale each row of ``g`` by sigmoid(u s + c)."""
    g = nk.constant(g)
    if not use_dynamic:
        return g, None
    gamma = nk.sigmoid(nk.affine(intensity, _p(params, "dynamic_u"), _p(params, "dynamic_c")))
    return nk.mul(gamma, g), gamma


def decode(buffer, params, task_index, m) -> Tensor:
    """Shared ReLU trunk over the last ``m`` states, then one linear head per task.

    ``buffer`` holds the most recent states last; missing history is
    zero-padded. ``task_index[r]`` names the task that row r belongs to.
    """
    buffer = [nk.constant(g) for g in buffer]
    if not buffer:
        raise ShapeError("decode needs at least one state")
    n, d = buffer[-1].shape
    recent = list(reversed(buffer[-m:]))
    recent += [nk.constant(np.zeros((n, d)))] * (m - len(recent))
    ctx = nk.concat_cols(recent) if m > 1 else recent[0]
    trunk = nk.relu(nk.affine(ctx, _p(params, "trunk_w"), _p(params, "trunk_b")))
    return nk.row_heads(trunk, _p(params, "head_w"), _p(params, "head_b"), task_index)


def loss(preds, targets, weights, masks=None) -> Tensor:
    """Weighted squared error averaged over valid (step, task) pairs.

    ``preds`` is a list of n x 1 tensors; ``targets`` and ``masks`` are
    matching arrays; ``weights`` holds one weight per row.
    """
    preds = [nk.constant(p) for p in preds]
    if masks is None:
        masks = [np.ones(p.shape, dtype=bool) for p in preds]
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    n_valid = int(sum(np.count_nonzero(mk) for mk in masks))
    if n_valid == 0:
        raise DataError("loss has no valid targets")
    stacked = nk.concat_rows(preds) if len(preds) > 1 else preds[0]
    mk = np.concatenate([np.asarray(m_, dtype=bool).reshape(p.shape) for m_, p in zip(masks, preds)])
    y = np.concatenate([np.asarray(y_, dtype=np.float64).reshape(p.shape)
                        for y_, p in zip(targets, preds)])
    y = np.where(mk, y, 0.0)
    w_rows = np.concatenate([np.broadcast_to(w, p.shape) for p in preds]) * mk
    return nk.weighted_sse(stacked, y, w_rows) * (1.0 / n_valid)


# -- window-level composition ---------------------------------------------------

@dataclass
class HiddenState:
    fused: np.ndarray
    g_buffer: deque
    prev_input: np.ndarray
    s_ewma: np.ndarray

    @classmethod
    def zeros(cls, n_rows: int, cfg: ModelConfig) -> "HiddenState":
        return cls(np.zeros((n_rows, cfg.d)), deque(maxlen=cfg.m),
                   np.zeros((n_rows, cfg.f)), np.zeros((n_rows, 1)))


@dataclass
class ForwardTrace:
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)


def _to_value(t):
    return None if t is None else t.value.copy()


def run_window(params, inputs, A, cfg: ModelConfig, record=False):
    """Process B windows (B x L x K x F) from a zeroed state.

    Returns ``(preds, trace)``: ``preds[j]`` is the (B*K) x 1 forecast made
    at window position ``m - 1 + j``.
    """
    B, L, K, F = inputs.shape
    n = B * K
    A = np.eye(K) if not cfg.use_graph else A
    task_index = np.tile(np.arange(K), B)
    fused = nk.constant(np.zeros((n, cfg.d)))
    prev_x = np.zeros((n, F))
    s = np.zeros((n, 1))
    buffer = deque(maxlen=cfg.m)
    preds = []
    trace = ForwardTrace() if record else None
    for i in range(L):
        x = inputs[:, i].reshape(n, F)
        v = fluctuation(x, prev_x)
        s = update_intensity(s, v, cfg.beta_s)
        h = encode(x, params)
        fused, alpha = fuse_state(h, fused, params, cfg.use_fusion)
        z = propagate(fused, A, params)
        g, lam = gate_fuse(z, fused, v, params)
        g, gamma = dynamic_adjust(g, s, params, cfg.use_dynamic)
        buffer.append(g)
        y = decode(list(buffer), params, task_index, cfg.m) if i >= cfg.m - 1 else None
        if y is not None:
            preds.append(y)
        if record:
            trace.steps.append({
                "h": _to_value(h), "alpha": _to_value(alpha), "fused": _to_value(fused),
                "z": _to_value(z), "lambda": _to_value(lam), "gamma": _to_value(gamma),
                "g": _to_value(g), "prediction": _to_value(y),
            })
        prev_x = x
    return preds, trace


def _batch_arrays(batch):
    if isinstance(batch, WindowBatch):
        return batch.inputs, batch.targets, batch.target_mask
    return batch, None, None


def forward_window(batch, A, params, cfg: ModelConfig, record=True):
    """Predictions for every emitted position, as a B x (L-m+1) x K array."""
    inputs, _, _ = _batch_arrays(batch)
    inputs = check_inputs(inputs, cfg.k, cfg.f)
    preds, trace = run_window(params, inputs, A, cfg, record=record)
    B = inputs.shape[0]
    out = np.stack([p.value.reshape(B, cfg.k) for p in preds], axis=1)
    return out, trace


def window_loss(params, batch: WindowBatch, A, cfg: ModelConfig) -> Tensor:
    preds, _ = run_window(params, batch.inputs, A, cfg)
    B = len(batch)
    sl = slice(cfg.m - 1, None)
    targets = [t.reshape(-1, 1) for t in np.moveaxis(batch.targets[:, sl], 1, 0)]
    masks = [mk.reshape(-1, 1) for mk in np.moveaxis(batch.target_mask[:, sl], 1, 0)]
    weights = np.tile(np.asarray(cfg.task_weights), B)
    return loss(preds, targets, weights, masks)


def predict_windows(params, batch, A, cfg: ModelConfig, chunk=512) -> np.ndarray:
    """Forecast from the last position of each window, B x K."""
    inputs, _, _ = _batch_arrays(batch)
    out = []
    for lo in range(0, inputs.shape[0], chunk):
        preds, _ = run_window(params, inputs[lo:lo + chunk], A, cfg)
        out.append(preds[-1].value.reshape(-1, cfg.k))
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.k))


def predict(series: AlignedSeries, t: int, A, params, cfg: ModelConfig) -> np.ndarray:
    """Forecast of the K targets at ``t + tau`` from the steps up to ``t``.

    ``t`` is a row index into ``series``; the state starts from zero at
    ``max(0, t - L + 1)``.
    """
    if not cfg.m - 1 <= t < series.n_steps:
        raise DataError(f"step {t} out of range [{cfg.m - 1}, {series.n_steps - 1}]")
    lo = max(0, t - cfg.L + 1)
    if not series.mask[lo:t + 1].all():
        raise DataError(f"steps {lo}..{t} contain masked entries")
    inputs = series.values[lo:t + 1][None]
    preds, _ = run_window(params, inputs, A, cfg)
    return preds[-1].value.reshape(cfg.k)


# -- training -------------------------------------------------------------------

@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss
    best_epoch: int | None = None
    stopped_early: bool = False
    failed_epoch: int | None = None
    failure: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingFailure(NumericFailure):
    def __init__(self, cause: NumericFailure, epoch: int, log: TrainingLog):
        super().__init__(cause.op, f"{cause} (epoch {epoch})")
        self.epoch = epoch
        self.log = log


def mean_loss(params, windows: WindowBatch, A, cfg: ModelConfig, chunk=512) -> float:
    """Loss over all windows, accumulated in chunks without a tape."""
    total, count = 0.0, 0
    for batch in windows.batches(chunk):
        n_valid = int(batch.target_mask[:, cfg.m - 1:].sum())
        total += window_loss(params, batch, A, cfg).item() * n_valid
        count += n_valid
    if count == 0:
        raise DataError("no windows to score")
    return total / count


def train(windows: WindowBatch, A, cfg: ModelConfig, tcfg: TrainConfig | None = None,
          val_windows: WindowBatch | None = None, params=None):
    """Fit parameters with Adam on full-window backpropagation.

    Returns ``(params, log)``. With ``patience`` set, the parameters from
    the epoch with the lowest validation loss are returned.
    """
    tcfg = tcfg or TrainConfig()
    if len(windows) == 0:
        raise DataError("training set has no windows")
    A = check_adjacency(A, cfg.k)
    rng = RandomSource(cfg.seed)
    params = check_params(params, cfg) if params is not None else init_params(cfg, rng.derive("init"))
    state = AdamState(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    log = TrainingLog()
    best, best_val, stale = params, math.inf, 0
    for epoch in range(tcfg.epochs):
        try:
            order = (rng.derive("shuffle", epoch).permutation(len(windows))
                     if tcfg.shuffle else None)
            seen, acc = 0, 0.0
            for batch in windows.batches(tcfg.batch_size, order):
                value, grads = nk.grad_eval(lambda P: window_loss(P, batch, A, cfg), params)
                params, state = nk.opt_step(params, grads, state)
                acc += value * len(batch)
                seen += len(batch)
            row = {"epoch": epoch, "train_loss": acc / seen}
            if val_windows is not None and len(val_windows):
                row["val_loss"] = mean_loss(params, val_windows, A, cfg)
        except NumericFailure as exc:
            log.failed_epoch = epoch
            log.failure = str(exc)
            raise TrainingFailure(exc, epoch, log) from exc
        log.epochs.append(row)
        if tcfg.patience is not None and "val_loss" in row:
            if row["val_loss"] < best_val:
                best, best_val, stale = params, row["val_loss"], 0
                log.best_epoch = epoch
            else:
                stale += 1
                if stale >= tcfg.patience:
                    log.stopped_early = True
                    break
    if tcfg.patience is not None and log.best_epoch is not None:
        params = best
    return params, log


# -- persistence ----------------------------------------------------------------

def params_to_dict(params: dict) -> dict:
    return {name: {"shape": list(np.shape(v)), "data": [float(x) for x in np.ravel(v)]}
            for name, v in params.items()}


def params_from_dict(doc: dict) -> dict:
    return {name: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for name, v in doc.items()}


def save_model(path, cfg: ModelConfig, params: dict, **extra) -> None:
    """One JSON document; floats use round-trip repr so reloading is bit-exact."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": cfg.to_dict(),
        "params": params_to_dict(check_params(params, cfg)),
    }
    doc.update(extra)
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_model(path):
    """Returns ``(config, params, document)``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"model file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"model file {path} is not valid JSON: {exc}") from None
    if doc.get("format") != MODEL_FORMAT:
        raise DataError(f"{path} is not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise DataError(f"unsupported model format version {doc.get('version')}")
    cfg = ModelConfig.from_dict(doc["config"])
    return cfg, check_params(params_from_dict(doc["params"]), cfg), doc


# -- estimator ------------------------------------------------------------------

class GraphForecaster(RegressorMixin, BaseEstimator):
    """Multi-task forecaster with graph propagation, scikit-learn style.

    ``fit`` and ``predict`` take an :class:`AlignedSeries` (or a T x K x F
    array). ``predict`` returns a T x K array whose row t is the forecast
    for step ``t + horizon`` issued at step t (NaN where no forecast can be
    made). ``adjacency`` may be None (identity), ``"correlation"``, a K x K
    array or an :class:`AdjacencyMatrix`.
    """

    def __init__(self, hidden_dim=16, context=2, horizon=1, window=12, use_graph=True,
                 use_fusion=True, use_dynamic=True, task_weights=None, adjacency=None,
                 correlation_threshold=0.5, epochs=50, batch_size=64, learning_rate=1e-3,
                 patience=None, random_state=0):
        self.hidden_dim = hidden_dim
        self.context = context
        self.horizon = horizon
        self.window = window
        self.use_graph = use_graph
        self.use_fusion = use_fusion
        self.use_dynamic = use_dynamic
        self.task_weights = task_weights
        self.adjacency = adjacency
        self.correlation_threshold = correlation_threshold
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.random_state = random_state

    def _make_config(self, k, f) -> ModelConfig:
        return ModelConfig(k=k, f=f, d=self.hidden_dim, m=self.context, tau=self.horizon,
                           L=self.window, use_graph=self.use_graph, use_fusion=self.use_fusion,
                           use_dynamic=self.use_dynamic, task_weights=self.task_weights,
                           seed=self.random_state)

    def _resolve_adjacency(self, series: AlignedSeries) -> np.ndarray:
        A = self.adjacency
        if A is None:
            return np.eye(series.n_nodes)
        if isinstance(A, str):
            if A == "correlation":
                return adjacency_from_correlation(series, threshold=self.correlation_threshold).weights
            if A == "identity":
                return np.eye(series.n_nodes)
            raise ConfigError(f"unknown adjacency mode {A!r}")
        return check_adjacency(A, series.n_nodes)

    def fit(self, X, y=None, X_val=None):
        series = as_series(X)
        self.config_ = self._make_config(series.n_nodes, series.n_features)
        cfg = self.config_
        self.adjacency_ = self._resolve_adjacency(series)
        self.target_feature_ = series.target_feature
        train_w = window(series, cfg.L, cfg.tau, cfg.m)
        if len(train_w) == 0:
            raise DataError(f"series of {series.n_steps} steps yields no windows "
                            f"(needs {cfg.L + cfg.tau} contiguous valid steps)")
        val_w = window(as_series(X_val), cfg.L, cfg.tau, cfg.m) if X_val is not None else None
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.learning_rate, patience=self.patience)
        started = time.perf_counter()
        self.params_, self.log_ = train(train_w, self.adjacency_, cfg, tcfg, val_w)
        self.fit_seconds_ = time.perf_counter() - started
        self.n_features_in_ = series.n_features
        self.n_tasks_ = series.n_nodes
        return self

    def predict_windows(self, batch) -> np.ndarray:
        check_is_fitted(self, "params_")
        inputs, _, _ = _batch_arrays(batch)
        inputs = check_inputs(inputs, self.config_.k, self.config_.f)
        return predict_windows(self.params_, inputs, self.adjacency_, self.config_)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        series = as_series(X, getattr(self, "target_feature_", 0))
        cfg = self.config_
        if (series.n_nodes, series.n_features) != (cfg.k, cfg.f):
            raise ShapeError(f"series has {series.n_nodes} nodes x {series.n_features} features, "
                             f"model expects {cfg.k} x {cfg.f}")
        T = series.n_steps
        out = np.full((T, cfg.k), np.nan)
        valid = series.mask.all(axis=1)
        bad = np.concatenate([[0], np.cumsum(~valid)])
        full = [t for t in range(cfg.L - 1, T) if bad[t + 1] - bad[t - cfg.L + 1] == 0]
        if full:
            idx = np.array(full)
            inputs = series.values[idx[:, None] - cfg.L + 1 + np.arange(cfg.L)]
            out[idx] = predict_windows(self.params_, inputs, self.adjacency_, cfg)
        for t in range(cfg.m - 1, min(cfg.L - 1, T)):
            if bad[t + 1] == 0:
                out[t] = predict(series, t, self.adjacency_, self.params_, cfg)
        return out

    def score(self, X, y=None):
        """Negative mean squared error of the forecasts over valid targets."""
        series = as_series(X, getattr(self, "target_feature_", 0))
        pred = self.predict(series)
        tau = self.config_.tau
        target = np.full_like(pred, np.nan)
        target[:-tau] = np.where(series.mask[tau:], series.targets[tau:], np.nan)
        ok = np.isfinite(pred) & np.isfinite(target)
        if not ok.any():
            raise DataError("no scorable forecasts")
        return -float(np.mean((pred[ok] - target[ok]) ** 2))

    def save(self, path, **extra):
        check_is_fitted(self, "params_")
        save_model(path, self.config_, self.params_,
                   adjacency=AdjacencyMatrix(self.adjacency_).to_dict(), **extra)
