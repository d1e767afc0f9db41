"""Trace ingestion, time alignment, cleaning, windowing and synthetic data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError, DataError
from .io import atomic_write_text
from .numkit import RandomSource
from .structure import AdjacencyMatrix, row_normalize

SERIES_FORMAT = "cloudcast-series"
SERIES_VERSION = 1


# -- aligned series -----------------------------------------------------------

@dataclass
class AlignedSeries:
    """Per-node telemetry on a fixed time grid.

    ``values`` is T x K x F, ``mask`` is T x K (True where the step is valid
    for that node). Masked entries carry NaN and must never be consumed.
    """

    values: np.ndarray
    mask: np.ndarray
    node_ids: tuple = ()
    feature_names: tuple = ()
    target_feature: int = 0
    bucket_seconds: float = 1.0
    start: float = 0.0
    step_offset: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3:
            raise DataError(f"series values must be T x K x F, got shape {self.values.shape}")
        T, K, F = self.values.shape
        if T < 1:
            raise DataError("series must contain at least one step")
        if self.mask.shape != (T, K):
            raise DataError(f"mask shape {self.mask.shape} does not match values {(T, K)}")
        if not self.node_ids:
            self.node_ids = tuple(f"n{k}" for k in range(K))
        if not self.feature_names:
            self.feature_names = tuple(f"f{j}" for j in range(F))
        self.node_ids = tuple(str(n) for n in self.node_ids)
        self.feature_names = tuple(str(n) for n in self.feature_names)
        if len(self.node_ids) != K or len(self.feature_names) != F:
            raise DataError("node_ids / feature_names do not match series dimensions")
        if not 0 <= self.target_feature < F:
            raise DataError(f"target_feature {self.target_feature} out of range for F={F}")
        if not np.isfinite(self.values[self.mask]).all():
            raise DataError("valid series entries must be finite")

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    @property
    def timestamps(self) -> np.ndarray:
        steps = np.arange(self.n_steps) + self.step_offset
        return self.start + steps * self.bucket_seconds

    @property
    def steps(self) -> np.ndarray:
        """Global step index of every row."""
        return np.arange(self.n_steps) + self.step_offset

    @property
    def targets(self) -> np.ndarray:
        return self.values[:, :, self.target_feature]

    def replace(self, values=None, mask=None) -> "AlignedSeries":
        return AlignedSeries(
            self.values if values is None else values,
            self.mask if mask is None else mask,
            self.node_ids, self.feature_names, self.target_feature,
            self.bucket_seconds, self.start, self.step_offset,
        )

    def slice(self, lo: int, hi: int) -> "AlignedSeries":
        out = AlignedSeries(
            self.values[lo:hi].copy(), self.mask[lo:hi].copy(), self.node_ids,
            self.feature_names, self.target_feature, self.bucket_seconds, self.start,
            self.step_offset + lo,
        )
        return out

    def meta(self) -> dict:
        return {
            "node_ids": list(self.node_ids),
            "feature_names": list(self.feature_names),
            "target_feature": self.target_feature,
            "bucket_seconds": self.bucket_seconds,
            "start": self.start,
            "step_offset": self.step_offset,
            "n_steps": self.n_steps,
        }


def as_series(X, target_feature=0) -> AlignedSeries:
    """Accept an AlignedSeries or a T x K x F array."""
    if isinstance(X, AlignedSeries):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    mask = np.isfinite(arr).all(axis=2)
    return AlignedSeries(arr, mask, target_feature=target_feature)


def mask_spans(mask: np.ndarray) -> list:
    """Half-open [lo, hi) runs of invalid steps for a 1-D validity mask."""
    spans, lo = [], None
    for i, ok in enumerate(mask):
        if not ok and lo is None:
            lo = i
        elif ok and lo is not None:
            spans.append([lo, i])
            lo = None
    if lo is not None:
        spans.append([lo, len(mask)])
    return spans


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_series(series: AlignedSeries, csv_path, extra: dict | None = None) -> None:
    """Write ``series`` as CSV plus a JSON sidecar next to it."""

    csv_path = Path(csv_path)
    lines = [",".join(["step", "node", *series.feature_names])]
    for t in range(series.n_steps):
        step = t + series.step_offset
        for k, node in enumerate(series.node_ids):
            if series.mask[t, k]:
                vals = [_fmt(v) for v in series.values[t, k]]
            else:
                vals = [""] * series.n_features
            lines.append(",".join([str(step), node, *vals]))
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    side = {
        "format": SERIES_FORMAT,
        "version": SERIES_VERSION,
        **series.meta(),
        "mask_spans": {n: mask_spans(series.mask[:, k]) for k, n in enumerate(series.node_ids)},
    }
    if extra:
        side.update(extra)
    atomic_write_text(sidecar_path(csv_path), json.dumps(side, indent=2, sort_keys=True) + "\n")


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def load_series(csv_path) -> AlignedSeries:
    csv_path = Path(csv_path)
    side_path = sidecar_path(csv_path)
    try:
        side = json.loads(side_path.read_text(encoding="utf-8"))
        text = csv_path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"missing series file: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{side_path}: invalid JSON sidecar ({exc})") from None
    if side.get("format") != SERIES_FORMAT:
        raise DataError(f"{side_path}: not a {SERIES_FORMAT} sidecar")
    nodes = side["node_ids"]
    feats = side["feature_names"]
    T, K, F = side["n_steps"], len(nodes), len(feats)
    offset = side.get("step_offset", 0)
    node_index = {n: k for k, n in enumerate(nodes)}
    values = np.full((T, K, F), np.nan)
    mask = np.zeros((T, K), dtype=bool)
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0][:2] != ["step", "node"]:
        raise DataError(f"{csv_path}: missing header")
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            t = int(row[0]) - offset
            k = node_index[row[1]]
            if all(v == "" for v in row[2:]):
                continue
            values[t, k] = [float(v) for v in row[2:2 + F]]
            mask[t, k] = True
        except (ValueError, KeyError, IndexError):
            raise DataError(f"{csv_path}:{lineno}: malformed series row") from None
    return AlignedSeries(values, mask, tuple(nodes), tuple(feats), side["target_feature"],
                         side["bucket_seconds"], side["start"], offset)


# -- ingestion ----------------------------------------------------------------

# Alibaba 2018 machine_usage.csv: machine_id, time_stamp, cpu_util_percent,
# mem_util_percent, mem_gps, mkpi, net_in, net_out, disk_io_percent
SCHEMA_PRESETS = {
    "machine-usage": {
        "0": "id",
        "1": "timestamp",
        "2": "cpu",
        "3": "mem",
        "6": "net_in",
        "7": "net_out",
        "8": "disk_io",
    },
}


@dataclass(frozen=True)
class Schema:
    id_column: int
    timestamp_column: int
    metrics: tuple  # (column, name)

    @property
    def metric_names(self) -> tuple:
        return tuple(name for _, name in self.metrics)

    @property
    def min_columns(self) -> int:
        return 1 + max([self.id_column, self.timestamp_column, *(c for c, _ in self.metrics)])

    @classmethod
    def from_dict(cls, doc: dict) -> "Schema":
        id_col = ts_col = None
        metrics = []
        for key, role in doc.items():
            try:
                col = int(key)
            except ValueError:
                raise ConfigError(f"schema key {key!r} is not a column index") from None
            if role == "id":
                id_col = col
            elif role in ("timestamp", "timestamp_seconds"):
                ts_col = col
            else:
                metrics.append((col, str(role)))
        if id_col is None or ts_col is None or not metrics:
            raise ConfigError("schema needs an 'id', a 'timestamp' and at least one metric column")
        return cls(id_col, ts_col, tuple(sorted(metrics)))

    @classmethod
    def resolve(cls, name_or_path) -> "Schema":
        if isinstance(name_or_path, dict):
            return cls.from_dict(name_or_path)
        if name_or_path in SCHEMA_PRESETS:
            return cls.from_dict(SCHEMA_PRESETS[name_or_path])
        path = Path(name_or_path)
        if not path.is_file():
            raise ConfigError(f"unknown schema {name_or_path!r} "
                              f"(presets: {', '.join(SCHEMA_PRESETS)})")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"schema file {path} is not valid JSON: {exc}") from None


@dataclass
class RawRecords:
    ids: list
    timestamps: np.ndarray
    values: np.ndarray  # N x F
    metric_names: tuple
    lines: int = 0
    skipped: int = 0
    duplicates: int = 0

    def __len__(self):
        return len(self.ids)


def _parse_line(row, schema: Schema):
    if len(row) < schema.min_columns:
        raise ValueError("too few columns")
    node = row[schema.id_column].strip()
    if not node:
        raise ValueError("empty id")
    ts = float(row[schema.timestamp_column])
    vals = [float(row[c]) for c, _ in schema.metrics]
    if not math.isfinite(ts) or not all(math.isfinite(v) for v in vals):
        raise ValueError("non-finite field")
    return node, ts, vals


def ingest_csv(paths, schema, tolerance=0.01) -> RawRecords:
    """Parse headerless trace CSVs into records sorted by (id, timestamp).

    Malformed lines are skipped while their share stays within
    ``tolerance``. For repeated (id, timestamp) pairs the later row wins.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    if not isinstance(schema, Schema):
        schema = Schema.resolve(schema)
    latest = {}
    lines = skipped = duplicates = 0
    first_error = None
    for path in paths:
        try:
            handle = open(path, newline="", encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc.strerror}") from None
        with handle:
            for lineno, row in enumerate(csv.reader(handle), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                lines += 1
                try:
                    node, ts, vals = _parse_line(row, schema)
                except ValueError as exc:
                    skipped += 1
                    first_error = first_error or f"{path}:{lineno}: {exc}"
                    continue
                if (node, ts) in latest:
                    duplicates += 1
                latest[(node, ts)] = vals
    if lines == 0:
        raise DataError("empty input")
    if skipped / lines > tolerance:
        raise DataError(f"{skipped} of {lines} lines malformed, above tolerance {tolerance} "
                        f"(first: {first_error})")
    if not latest:
        raise DataError("empty input")
    keys = sorted(latest)
    return RawRecords(
        ids=[k[0] for k in keys],
        timestamps=np.array([k[1] for k in keys], dtype=np.float64),
        values=np.array([latest[k] for k in keys], dtype=np.float64).reshape(len(keys), -1),
        metric_names=schema.metric_names,
        lines=lines,
        skipped=skipped,
        duplicates=duplicates,
    )


def align(records: RawRecords, bucket_seconds: float, max_gap_buckets: int = 3,
          target_feature: int = 0) -> AlignedSeries:
    """Bucket records onto a global time grid.

    Each bucket holds the mean of its samples. Runs of empty buckets no
    longer than ``max_gap_buckets`` that follow an observed bucket are
    forward-filled; longer runs (and anything before a node's first sample)
    stay masked.
    """
    if bucket_seconds <= 0:
        raise ConfigError("bucket_seconds must be positive")
    if len(records) == 0:
        raise DataError("empty input")
    nodes = sorted(set(records.ids))
    node_index = {n: k for k, n in enumerate(nodes)}
    ts = records.timestamps
    t0 = float(ts.min())
    bucket = np.floor((ts - t0) / bucket_seconds).astype(np.int64)
    T = int(bucket.max()) + 1
    K, F = len(nodes), records.values.shape[1]

    spans = {}
    for node, t in zip(records.ids, ts):
        lo, hi = spans.get(node, (t, t))
        spans[node] = (min(lo, t), max(hi, t))
    if max(lo for lo, _ in spans.values()) > min(hi for _, hi in spans.values()):
        raise DataError("node time ranges do not overlap")

    sums = np.zeros((T, K, F))
    counts = np.zeros((T, K))
    kidx = np.array([node_index[n] for n in records.ids])
    np.add.at(sums, (bucket, kidx), records.values)
    np.add.at(counts, (bucket, kidx), 1)
    observed = counts > 0
    values = np.full((T, K, F), np.nan)
    values[observed] = sums[observed] / counts[observed][:, None]
    mask = observed.copy()

    for k in range(K):
        t = 0
        seen = False
        while t < T:
            if observed[t, k]:
                seen = True
                t += 1
                continue
            run_end = t
            while run_end < T and not observed[run_end, k]:
                run_end += 1
            if seen and run_end - t <= max_gap_buckets:
                values[t:run_end, k] = values[t - 1, k]
                mask[t:run_end, k] = True
            t = run_end

    return AlignedSeries(values, mask, tuple(nodes), records.metric_names, target_feature,
                         float(bucket_seconds), t0)


# -- cleaning -----------------------------------------------------------------

def quantile_bounds(series: AlignedSeries, p_low=0.005, p_high=0.995) -> np.ndarray:
    """Per (node, feature) [low, high] quantiles over valid entries, K x F x 2."""
    if not 0.0 <= p_low <= p_high <= 1.0:
        raise ConfigError(f"invalid quantile pair ({p_low}, {p_high})")
    T, K, F = series.shape
    bounds = np.full((K, F, 2), np.nan)
    for k in range(K):
        v = series.values[series.mask[:, k], k]
        if v.shape[0]:
            # numpy's default method is linear interpolation between order statistics
            bounds[k, :, 0] = np.quantile(v, p_low, axis=0)
            bounds[k, :, 1] = np.quantile(v, p_high, axis=0)
    return bounds


def apply_bounds(series: AlignedSeries, bounds: np.ndarray) -> AlignedSeries:
    if bounds.shape != (series.n_nodes, series.n_features, 2):
        raise DataError(f"clip bounds shape {bounds.shape} does not match series")
    lo = np.where(np.isnan(bounds[:, :, 0]), -np.inf, bounds[:, :, 0])
    hi = np.where(np.isnan(bounds[:, :, 1]), np.inf, bounds[:, :, 1])
    values = series.values.copy()
    valid = series.mask
    values[valid] = np.clip(values, lo, hi)[valid]
    return series.replace(values=values)


def clip_outliers(series: AlignedSeries, p_low=0.005, p_high=0.995) -> AlignedSeries:
    """Winsorize every (node, feature) to its empirical quantile range."""
    return apply_bounds(series, quantile_bounds(series, p_low, p_high))


@dataclass
class NormStats:
    mean: np.ndarray  # K x F
    std: np.ndarray  # K x F, constant features carry 1
    constant: np.ndarray  # K x F bool

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant": self.constant.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NormStats":
        return cls(np.array(doc["mean"], dtype=np.float64), np.array(doc["std"], dtype=np.float64),
                   np.array(doc["constant"], dtype=bool))


def fit_norm_stats(series: AlignedSeries) -> NormStats:
    """Population mean/std per (node, feature) over valid steps."""
    T, K, F = series.shape
    mean = np.zeros((K, F))
    std = np.ones((K, F))
    constant = np.zeros((K, F), dtype=bool)
    for k in range(K):
        v = series.values[series.mask[:, k], k]
        if v.shape[0] == 0:
            constant[k] = True
            continue
        mean[k] = v.mean(axis=0)
        s = v.std(axis=0)  # ddof=0: population convention
        flat = s <= 1e-12 * np.maximum(1.0, np.abs(mean[k]))
        constant[k] = flat
        std[k] = np.where(flat, 1.0, s)
    return NormStats(mean, std, constant)


def normalize(series: AlignedSeries, stats: NormStats) -> AlignedSeries:
    if stats.mean.shape != (series.n_nodes, series.n_features):
        raise DataError(f"norm stats shape {stats.mean.shape} does not match series "
                        f"{(series.n_nodes, series.n_features)}")
    values = (series.values - stats.mean) / stats.std
    values[~series.mask] = np.nan
    return series.replace(values=values)


def denormalize_target(values: np.ndarray, stats: NormStats, target_feature: int) -> np.ndarray:
    """Map normalized target values (..., K) back to raw units."""
    return values * stats.std[:, target_feature] + stats.mean[:, target_feature]


class OutlierClipper(TransformerMixin, BaseEstimator):
    """Winsorizer whose bounds are learned on the series passed to ``fit``."""

    def __init__(self, p_low=0.005, p_high=0.995):
        self.p_low = p_low
        self.p_high = p_high

    def fit(self, X, y=None):
        self.bounds_ = quantile_bounds(as_series(X), self.p_low, self.p_high)
        return self

    def transform(self, X):
        return apply_bounds(as_series(X), self.bounds_)


class SeriesScaler(TransformerMixin, BaseEstimator):
    """Per (node, feature) z-scoring with population statistics."""

    def fit(self, X, y=None):
        self.stats_ = fit_norm_stats(as_series(X))
        return self

    def transform(self, X):
        return normalize(as_series(X), self.stats_)

    def inverse_transform_target(self, values, target_feature=0):
        return denormalize_target(np.asarray(values), self.stats_, target_feature)


# -- splitting and windows ----------------------------------------------------

def split_sizes(n_steps: int, ratios=(0.7, 0.1, 0.2)) -> tuple:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n_train = int(round(n_steps * ratios[0]))
    n_val = int(round(n_steps * (ratios[0] + ratios[1]))) - n_train
    return n_train, n_val, n_steps - n_train - n_val


def split(series: AlignedSeries, ratios=(0.7, 0.1, 0.2), min_length: int = 1):
    """Chronological, non-overlapping train/val/test split."""
    sizes = split_sizes(series.n_steps, ratios)
    for name, n in zip(("train", "validation", "test"), sizes):
        if n < min_length:
            raise DataError(f"{name} split has {n} steps, needs at least {min_length}")
    a, b = sizes[0], sizes[0] + sizes[1]
    return series.slice(0, a), series.slice(a, b), series.slice(b, series.n_steps)


@dataclass
class WindowBatch:
    """Supervised windows cut from one series.

    inputs: B x L x K x F; targets: B x L x K, where ``targets[b, i]`` is
    the target feature ``tau`` steps after window position ``i``;
    target_mask flags the positions that carry a loss term (``i >= m-1``).
    ``starts`` holds the global step of each window's first input.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    starts: np.ndarray
    window: int
    horizon: int
    context: int
    target_feature: int = 0

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def origins(self) -> np.ndarray:
        """Global step of each window's last input (the forecast origin)."""
        return self.starts + self.window - 1

    @property
    def last_targets(self) -> np.ndarray:
        return self.targets[:, -1]

    def subset(self, index) -> "WindowBatch":
        index = np.asarray(index, dtype=np.intp)
        return WindowBatch(self.inputs[index], self.targets[index], self.target_mask[index],
                           self.starts[index], self.window, self.horizon, self.context,
                           self.target_feature)

    def batches(self, size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for lo in range(0, len(self), size):
            yield self.subset(order[lo:lo + size])


def window(series: AlignedSeries, L: int, tau: int, m: int = 1,
           shuffle: bool = False, rng: RandomSource | None = None) -> WindowBatch:
    """Stride-1 windows whose inputs and targets are all valid."""
    if L < 1 or tau < 1 or not 1 <= m <= L:
        raise ConfigError(f"invalid window geometry L={L}, tau={tau}, m={m}")
    T, K, F = series.shape
    valid = series.mask.all(axis=1)
    span = L + tau
    starts = []
    if T >= span:
        # a window is usable iff its whole input+target span is valid
        bad = np.concatenate([[0], np.cumsum(~valid)])
        for s in range(T - span + 1):
            if bad[s + span] - bad[s] == 0:
                starts.append(s)
    starts = np.array(starts, dtype=np.intp)
    if shuffle and starts.size:
        if rng is None:
            raise ConfigError("shuffling windows needs a RandomSource")
        starts = starts[rng.permutation(starts.size)]
    B = starts.size
    offs = np.arange(L)
    inputs = np.zeros((B, L, K, F))
    targets = np.zeros((B, L, K))
    if B:
        inputs = series.values[starts[:, None] + offs]
        targets = series.targets[starts[:, None] + offs + tau]
    target_mask = np.zeros((B, L, K), dtype=bool)
    target_mask[:, m - 1:, :] = True
    return WindowBatch(inputs, targets, target_mask, starts + series.step_offset, L, tau, m,
                       series.target_feature)


@dataclass
class Prepared:
    """Clipped, split and normalized series plus the fitted transforms."""

    train: AlignedSeries
    val: AlignedSeries
    test: AlignedSeries
    stats: NormStats
    bounds: np.ndarray | None

    def windows(self, part: str, L: int, tau: int, m: int) -> WindowBatch:
        return window(getattr(self, part), L, tau, m)

    def transform(self, series: AlignedSeries) -> AlignedSeries:
        """Apply the fitted clip bounds and normalization to another series."""
        if self.bounds is not None:
            series = apply_bounds(series, self.bounds)
        return normalize(series, self.stats)


def prepare(series: AlignedSeries, ratios=(0.7, 0.1, 0.2), clip=(0.005, 0.995),
            min_length: int = 1) -> Prepared:
    """Split chronologically; fit clipping and z-scoring on the train part only."""
    train, val, test = split(series, ratios, min_length)
    bounds = quantile_bounds(train, *clip) if clip is not None else None
    if bounds is not None:
        train, val, test = (apply_bounds(s, bounds) for s in (train, val, test))
    stats = fit_norm_stats(train)
    return Prepared(normalize(train, stats), normalize(val, stats), normalize(test, stats),
                    stats, bounds)


# -- synthetic generator ------------------------------------------------------

@dataclass
class SynthConfig:
    k: int
    f: int
    t: int
    rho: float = 0.6
    density: float = 0.3
    noise: float = 0.1
    burst_rate: float = 5.0
    burst_magnitude: float = 1.5
    burst_decay: float = 0.8
    drift_times: tuple = ()
    drift_fraction: float = 0.25
    season_amplitude: float = 0.0
    season_period: float = 24.0
    mean_low: float = 0.5
    mean_high: float = 1.5
    bucket_seconds: float = 60.0
    seed: int = 0

    def __post_init__(self):
        self.drift_times = tuple(int(x) for x in self.drift_times)
        if self.k < 1 or self.f < 1 or self.t < 1:
            raise ConfigError("synth k, f and t must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"coupling rho must lie in [0, 1), got {self.rho}")
        if not 0.0 <= self.density <= 1.0:
            raise ConfigError("graph density must lie in [0, 1]")
        if self.noise < 0 or self.burst_rate < 0 or not 0.0 <= self.burst_decay < 1.0:
            raise ConfigError("noise and burst_rate must be >= 0 and burst_decay in [0, 1)")
        if not 0.0 <= self.drift_fraction <= 1.0:
            raise ConfigError("drift_fraction must lie in [0, 1]")
        if self.season_period <= 0:
            raise ConfigError("season_period must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drift_times"] = list(self.drift_times)
        return d


def _random_graph(k: int, density: float, rng: RandomSource) -> np.ndarray:
    raw = (rng.random((k, k)) < density).astype(np.float64)
    np.fill_diagonal(raw, 0.0)
    return raw


def _drift_graph(raw: np.ndarray, fraction: float, rng: RandomSource) -> np.ndarray:
    raw = raw.copy()
    k = raw.shape[0]
    off = ~np.eye(k, dtype=bool)
    present = np.argwhere((raw > 0) & off)
    absent = np.argwhere((raw == 0) & off)
    n_move = min(int(math.ceil(fraction * len(present))), len(absent))
    if n_move == 0:
        return raw
    drop = present[rng.permutation(len(present))[:n_move]]
    add = absent[rng.permutation(len(absent))[:n_move]]
    raw[drop[:, 0], drop[:, 1]] = 0.0
    raw[add[:, 0], add[:, 1]] = 1.0
    return raw


def _transition(raw_offdiag: np.ndarray) -> np.ndarray:
    return row_normalize(raw_offdiag + np.eye(raw_offdiag.shape[0])).weights


def synth_generate(cfg: SynthConfig):
    """Coupled VAR(1)-over-graph telemetry with bursts and optional drift.

    Per feature: x_t = rho * A_t x_{t-1} + (1 - rho) * mu + season_t + burst_t + noise_t
    with A_t the row-normalized graph (self-loops included) in force at
    step t. Returns ``(series, adjacency)``; the adjacency is the graph in
    force at step 0.
    """
    root = RandomSource(cfg.seed)
    raw = _random_graph(cfg.k, cfg.density, root.derive("graph"))
    graphs = {0: _transition(raw)}
    for i, when in enumerate(sorted(set(cfg.drift_times))):
        if 0 < when < cfg.t:
            raw = _drift_graph(raw, cfg.drift_fraction, root.derive("drift", i))
            graphs[when] = _transition(raw)
    for A in graphs.values():
        radius = float(np.max(np.abs(np.linalg.eigvals(cfg.rho * A))))
        if radius >= 1.0:
            raise ConfigError(f"transition spectral radius {radius:.6f} is not below 1")

    K, F, T = cfg.k, cfg.f, cfg.t
    mu = root.derive("mean").uniform(cfg.mean_low, cfg.mean_high, (K, F))
    eps = root.derive("noise").normal(0.0, 1.0, (T, K, F)) * cfg.noise
    events = root.derive("burst").random((T, K)) < cfg.burst_rate / 1000.0
    phase = root.derive("season").uniform(0.0, 2 * np.pi, (K, 1))
    steps = np.arange(T)[:, None, None]
    season = cfg.season_amplitude * np.sin(2 * np.pi * steps / cfg.season_period + phase[None])

    values = np.empty((T, K, F))
    prev = mu.copy()
    burst = np.zeros(K)
    A = graphs[0]
    for t in range(T):
        A = graphs.get(t, A)
        burst = cfg.burst_decay * burst + cfg.burst_magnitude * events[t]
        x = cfg.rho * (A @ prev) + (1.0 - cfg.rho) * mu + season[t] + burst[:, None] + eps[t]
        values[t] = x
        prev = x
    series = AlignedSeries(values, np.ones((T, K), dtype=bool), bucket_seconds=cfg.bucket_seconds)
    return series, AdjacencyMatrix(graphs[0], series.node_ids)
