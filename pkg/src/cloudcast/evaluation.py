"""Metrics, reports, baselines comparison, sensitivity sweeps and ablations."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import persistence_windows, mlp_predict, train_mlp
from .data import AlignedSeries, Prepared, WindowBatch, prepare
from .errors import ConfigError, DataError
from .io import atomic_write_text, fingerprint
from .model import ModelConfig, TrainConfig, predict_windows, train
from .numkit import RandomSource

MAPE_EPSILON = 1e-3
RMAE_DEFINITION = "relative MAE: MAE / mean(|y|) over valid targets"
METRICS = ("mse", "mae", "mape", "rmae")


def _valid_pairs(preds, targets, mask=None):
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise DataError(f"{p.size} predictions against {y.size} targets")
    ok = np.isfinite(p) & np.isfinite(y)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool).ravel()
    if not ok.any():
        raise DataError("no valid (prediction, target) pairs")
    return p[ok], y[ok]


def mse(preds, targets, mask=None) -> float:
    p, y = _valid_pairs(preds, targets, mask)
    return float(np.mean((p - y) ** 2))


def mae(preds, targets, mask=None) -> float:
    p, y = _valid_pairs(preds, targets, mask)
    return float(np.mean(np.abs(p - y)))


def mape(preds, targets, mask=None, epsilon=MAPE_EPSILON) -> float:
    """Percent error with the denominator floored at ``epsilon``."""
    p, y = _valid_pairs(preds, targets, mask)
    return float(100.0 * np.mean(np.abs(p - y) / np.maximum(np.abs(y), epsilon)))


def rmae(preds, targets, mask=None) -> float:
    p, y = _valid_pairs(preds, targets, mask)
    scale = np.mean(np.abs(y))
    if scale == 0:
        raise DataError("RMAE undefined: all valid targets are zero")
    return float(np.mean(np.abs(p - y)) / scale)


def all_metrics(preds, targets, mask=None) -> dict:
    p, y = _valid_pairs(preds, targets, mask)
    out = {"n": int(p.size), "mse": mse(p, y), "mae": mae(p, y), "mape": mape(p, y)}
    out["rmae"] = rmae(p, y) if np.any(y != 0) else float("nan")
    return out


@dataclass
class MetricsReport:
    per_task: list  # dicts: task, n, mse, mae, mape, rmae
    aggregate: dict
    label: str = "model"
    scale: str = "normalized"
    seed: int | None = None
    fingerprint: str = ""
    config: dict = field(default_factory=dict)
    wall_clock: float | None = None

    def to_dict(self, include_timing=False) -> dict:
        doc = {
            "label": self.label,
            "scale": self.scale,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "mape_epsilon": MAPE_EPSILON,
            "rmae_definition": RMAE_DEFINITION,
            "aggregate": self.aggregate,
            "per_task": self.per_task,
            "config": self.config,
        }
        if include_timing:
            doc["wall_clock_seconds"] = self.wall_clock
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(doc["per_task"], doc["aggregate"], doc.get("label", "model"),
                   doc.get("scale", "normalized"), doc.get("seed"), doc.get("fingerprint", ""),
                   doc.get("config", {}), doc.get("wall_clock_seconds"))

    def csv_rows(self) -> list:
        rows = [{"label": self.label, "task": t["task"], **{k: t[k] for k in ("n", *METRICS)}}
                for t in self.per_task]
        rows.append({"label": self.label, "task": "aggregate",
                     **{k: self.aggregate[k] for k in ("n", *METRICS)}})
        return rows


def build_report(preds, targets, task_names=None, mask=None, **meta) -> MetricsReport:
    """Per-task metrics plus their count-weighted mean.

    ``preds`` and ``targets`` are N x K arrays (one column per task).
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 2:
        raise DataError(f"predictions {preds.shape} and targets {targets.shape} must be equal N x K")
    K = preds.shape[1]
    names = list(task_names) if task_names is not None else [str(k) for k in range(K)]
    mask = np.ones_like(preds, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    per_task = []
    for k in range(K):
        per_task.append({"task": names[k], **all_metrics(preds[:, k], targets[:, k], mask[:, k])})
    counts = np.array([t["n"] for t in per_task], dtype=np.float64)
    aggregate = {"n": int(counts.sum())}
    for name in METRICS:
        vals = np.array([t[name] for t in per_task])
        aggregate[name] = float(np.sum(vals * counts) / counts.sum())
    return MetricsReport(per_task, aggregate, **meta)


def evaluate(params, cfg: ModelConfig, A, windows: WindowBatch, task_names=None,
             stats=None, normalized=True, **meta):
    """Score the forecast from the last position of every window.

    Returns ``(report, predictions, targets)``; arrays are N x K in the
    reported scale.
    """
    if len(windows) == 0:
        raise DataError("no test windows")
    started = time.perf_counter()
    preds = predict_windows(params, windows, A, cfg)
    targets = windows.last_targets
    if not normalized:
        preds, targets = _denormalize(preds, stats, windows.target_feature), \
            _denormalize(targets, stats, windows.target_feature)
    report = build_report(preds, targets, task_names, scale=_scale(normalized), seed=cfg.seed, **meta)
    report.wall_clock = time.perf_counter() - started
    return report, preds, targets


def _scale(normalized: bool) -> str:
    return "normalized" if normalized else "raw"


def _denormalize(values, stats, target_feature):
    if stats is None:
        raise ConfigError("raw-scale metrics need the normalization statistics")
    return values * stats.std[:, target_feature] + stats.mean[:, target_feature]


# -- experiment cells -----------------------------------------------------------

@dataclass
class Experiment:
    """Everything a sweep cell needs, picklable for worker processes."""

    series: AlignedSeries
    A: np.ndarray
    model: ModelConfig
    train: TrainConfig
    ratios: tuple = (0.7, 0.1, 0.2)
    clip: tuple | None = (0.005, 0.995)
    normalized: bool = True
    master_seed: int = 0

    def describe(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "ratios": list(self.ratios),
            "clip": list(self.clip) if self.clip else None,
            "normalized": self.normalized,
            "master_seed": self.master_seed,
            "adjacency": np.asarray(self.A).tolist(),
        }

    def prepared(self) -> Prepared:
        m = self.model
        return prepare(self.series, self.ratios, self.clip, min_length=m.L + m.tau)


def _windows(prep: Prepared, cfg: ModelConfig):
    return (prep.windows("train", cfg.L, cfg.tau, cfg.m),
            prep.windows("val", cfg.L, cfg.tau, cfg.m),
            prep.windows("test", cfg.L, cfg.tau, cfg.m))


def run_model(exp: Experiment, cfg: ModelConfig, label="model", prep=None):
    """Train on the train split, score on the test split."""
    prep = prep or exp.prepared()
    train_w, val_w, test_w = _windows(prep, cfg)
    started = time.perf_counter()
    params, log = train(train_w, exp.A, cfg, exp.train, val_w)
    report, _, _ = evaluate(params, cfg, exp.A, test_w, exp.series.node_ids, prep.stats,
                            exp.normalized, label=label,
                            fingerprint=fingerprint({**exp.describe(), "model": cfg.to_dict()}))
    report.wall_clock = time.perf_counter() - started
    return report


def run_persistence(exp: Experiment, cfg: ModelConfig, prep=None):
    prep = prep or exp.prepared()
    test_w = prep.windows("test", cfg.L, cfg.tau, cfg.m)
    preds, targets = persistence_windows(test_w), test_w.last_targets
    if not exp.normalized:
        preds = _denormalize(preds, prep.stats, test_w.target_feature)
        targets = _denormalize(targets, prep.stats, test_w.target_feature)
    return build_report(preds, targets, exp.series.node_ids, label="persistence",
                        scale=_scale(exp.normalized), seed=None,
                        fingerprint=fingerprint({**exp.describe(), "model": cfg.to_dict()}))


def baseline_mlp(exp: Experiment, cfg: ModelConfig, prep=None):
    """Per-task feed-forward baseline trained with the main model's optimizer settings."""
    prep = prep or exp.prepared()
    train_w = prep.windows("train", cfg.L, cfg.tau, 1)
    test_w = prep.windows("test", cfg.L, cfg.tau, 1)
    started = time.perf_counter()
    params, _ = train_mlp(train_w, cfg.d, exp.train, cfg.seed)
    preds, targets = mlp_predict(params, test_w.inputs), test_w.last_targets
    if not exp.normalized:
        preds = _denormalize(preds, prep.stats, test_w.target_feature)
        targets = _denormalize(targets, prep.stats, test_w.target_feature)
    report = build_report(preds, targets, exp.series.node_ids, label="mlp",
                          scale=_scale(exp.normalized), seed=cfg.seed,
                          fingerprint=fingerprint({**exp.describe(), "model": cfg.to_dict(),
                                                   "baseline": "mlp"}))
    report.wall_clock = time.perf_counter() - started
    return report


# -- sweeps ---------------------------------------------------------------------

ABLATIONS = {
    "full": {},
    "no_graph": {"use_graph": False},
    "no_fusion": {"use_fusion": False},
    "no_dynamic": {"use_dynamic": False},
}
ABLATION_GRID = (*ABLATIONS, "mlp", "persistence")


@dataclass
class SweepTable:
    axis: str
    rows: list  # dicts: value, seed_index, seed, reports {label: MetricsReport}
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)

    def values(self) -> list:
        out = []
        for r in self.rows:
            if r["value"] not in out:
                out.append(r["value"])
        return out

    def median(self, metric="mse", label="model") -> dict:
        out = {}
        for v in self.values():
            vals = [r["reports"][label].aggregate[metric] for r in self.rows
                    if r["value"] == v and label in r["reports"]]
            if vals:
                out[v] = float(np.median(vals))
        return out

    def to_dict(self, include_timing=False) -> dict:
        return {
            "axis": self.axis,
            "config": self.config,
            "rows": [{"value": r["value"], "seed_index": r["seed_index"], "seed": r["seed"],
                      "reports": {k: rep.to_dict(include_timing) for k, rep in r["reports"].items()}}
                     for r in self.rows],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([self.axis, "seed_index", "seed", "label", "task", "n", *METRICS])
        for r in self.rows:
            for label, rep in r["reports"].items():
                for row in rep.csv_rows():
                    writer.writerow([r["value"], r["seed_index"], r["seed"], label, row["task"],
                                     row["n"], *(repr(float(row[m])) for m in METRICS)])
        return buf.getvalue()


def _cell(kind: str, exp: Experiment, value, seed_index: int, seed: int) -> dict:
    if kind == "hidden":
        cfg = replace(exp.model, d=int(value), d_dec=int(value), seed=seed)
        return {"model": run_model(exp, cfg)}
    if kind == "horizon":
        cfg = replace(exp.model, tau=int(value), seed=seed)
        prep = replace(exp, model=cfg).prepared()
        return {"model": run_model(exp, cfg, prep=prep), "persistence": run_persistence(exp, cfg, prep)}
    if kind == "ablation":
        cfg = replace(exp.model, seed=seed)
        if value == "mlp":
            return {"mlp": baseline_mlp(exp, cfg)}
        if value == "persistence":
            return {"persistence": run_persistence(exp, cfg)}
        return {value: run_model(exp, replace(cfg, **ABLATIONS[value]), label=value)}
    raise ConfigError(f"unknown sweep kind {kind!r}")


def _cell_seed(kind: str, master: int, value, seed) -> int:
    root = RandomSource(master)
    # ablation variants share seeds so their runs are paired
    if kind == "ablation":
        return root.derive_seed("ablation", seed)
    return root.derive_seed(kind, str(value), seed)


def run_sweep(kind: str, grid, exp: Experiment, seeds, workers: int = 1) -> SweepTable:
    """One cell per (grid value, seed); identical output for any ``workers``."""
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid is empty")
    if len(set(map(str, grid))) != len(grid):
        raise ConfigError("sweep grid values must be distinct")
    if kind == "ablation":
        unknown = [v for v in grid if v not in ABLATION_GRID]
        if unknown:
            raise ConfigError(f"unknown ablation variants {unknown}")
    else:
        grid = sorted(int(v) for v in grid)
    seeds = list(seeds)
    jobs = [(kind, exp, v, i, _cell_seed(kind, exp.master_seed, v, s))
            for v in grid for i, s in enumerate(seeds)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell, *zip(*jobs)))
    else:
        results = [_cell(*job) for job in jobs]
    rows = [{"value": job[2], "seed_index": job[3], "seed": job[4], "reports": res}
            for job, res in zip(jobs, results)]
    axis = {"hidden": "hidden_dim", "horizon": "horizon", "ablation": "variant"}[kind]
    return SweepTable(axis, rows, {"kind": kind, "grid": grid, "seeds": seeds, **exp.describe()})


def sweep_hidden(dims, exp: Experiment, seeds, workers=1) -> SweepTable:
    return run_sweep("hidden", dims, exp, seeds, workers)


def sweep_horizon(taus, exp: Experiment, seeds, workers=1) -> SweepTable:
    return run_sweep("horizon", taus, exp, seeds, workers)


def ablation_suite(exp: Experiment, seeds, variants=ABLATION_GRID, workers=1) -> SweepTable:
    return run_sweep("ablation", variants, exp, seeds, workers)


def count_inversions(values, rel_tol=0.0) -> tuple:
    """Adjacent decreases in a sequence: ``(count, largest relative drop)``."""
    drops = []
    for a, b in zip(values, values[1:]):
        if b < a:
            drops.append((a - b) / a if a else float("inf"))
    return len(drops), max(drops, default=0.0)


def write_report_files(report_or_table, json_path, csv_path, include_timing=False) -> None:
    doc = report_or_table.to_dict(include_timing)
    atomic_write_text(json_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if isinstance(report_or_table, SweepTable):
        text = report_or_table.to_csv()
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "task", "n", *METRICS])
        for row in report_or_table.csv_rows():
            writer.writerow([row["label"], row["task"], row["n"],
                             *(repr(float(row[m])) for m in METRICS)])
        text = buf.getvalue()
    atomic_write_text(csv_path, text)
