"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_run_config
from .data import (AlignedSeries, NormStats, SynthConfig, align, apply_bounds, ingest_csv,
                   load_series, normalize, prepare, save_series, split_sizes, synth_generate,
                   window)
from .errors import CloudcastError, ConfigError, DataError, NumericFailure
from .evaluation import (Experiment, evaluate, run_sweep, write_report_files)
from .io import atomic_write_text, dump_json, fingerprint
from .model import (ModelConfig, TrainingFailure, load_model, predict, save_model, train)
from .structure import (AdjacencyMatrix, TopologySpec, adjacency_from_correlation,
                        adjacency_from_topology)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _series_with_target(series: AlignedSeries, target) -> AlignedSeries:
    if target is None or target == series.target_feature:
        return series
    return AlignedSeries(series.values, series.mask, series.node_ids, series.feature_names, target,
                         series.bucket_seconds, series.start, series.step_offset)


# -- synth ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    run = load_run_config(args.config)
    if run.synth is None:
        raise ConfigError("config has no 'synth' section (missing required field 'synth')")
    cfg = run.synth
    if args.seed is not None:
        cfg = SynthConfig(**{**cfg.to_dict(), "seed": args.seed})
    series, A = synth_generate(cfg)
    out = Path(args.out)
    resolved = {**run.to_dict(), "synth": cfg.to_dict()}
    embed = {"config": resolved, "master_seed": cfg.seed, "config_hash": fingerprint(resolved)}
    save_series(series, out / "series.csv", extra=embed)
    dump_json(out / "adjacency.json", {**A.to_dict(), **embed})
    dump_json(out / "manifest.json", {
        **embed,
        "files": ["series.csv", "series.json", "adjacency.json"],
        "shape": list(series.shape),
    })
    print(f"wrote {series.n_steps} steps x {series.n_nodes} nodes to {out}")
    return EXIT_OK


# -- ingest ---------------------------------------------------------------------

def _input_files(path) -> list:
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix == ".csv")
        if not files:
            raise DataError("empty input")
        return files
    if not path.exists():
        raise DataError(f"input not found: {path}")
    return [path]


def cmd_ingest(args) -> int:
    from .data import Schema

    schema = Schema.resolve(args.schema)
    if args.bucket <= 0:
        raise ConfigError("--bucket must be positive")
    records = ingest_csv(_input_files(args.input), schema, args.tolerance)
    series = align(records, args.bucket, args.max_gap, args.target_feature)
    settings = {"schema": args.schema, "bucket_seconds": args.bucket, "max_gap_buckets": args.max_gap,
                "tolerance": args.tolerance, "target_feature": args.target_feature}
    save_series(series, args.out, extra={
        "config": settings,
        "config_hash": fingerprint(settings),
        "ingest": {"lines": records.lines, "records": len(records), "skipped": records.skipped,
                   "duplicates": records.duplicates},
    })
    print(f"aligned {len(records)} records into {series.n_steps} steps x {series.n_nodes} nodes "
          f"({records.skipped} malformed, {records.duplicates} duplicates)")
    return EXIT_OK


# -- shared pipeline ------------------------------------------------------------

def _resolve_adjacency(run: RunConfig, series: AlignedSeries, train_part: AlignedSeries):
    adj = run.adjacency
    K = series.n_nodes
    if adj.mode == "identity":
        return AdjacencyMatrix.identity(K, series.node_ids)
    if adj.mode == "correlation":
        return adjacency_from_correlation(train_part, threshold=adj.threshold)
    if adj.mode == "topology":
        topo = TopologySpec.load(adj.path)
        A = adjacency_from_topology(topo)
        if set(topo.nodes) != set(series.node_ids):
            raise DataError("topology nodes do not match the series node ids")
        order = [topo.nodes.index(n) for n in series.node_ids]
        return AdjacencyMatrix(A.weights[np.ix_(order, order)], series.node_ids)
    try:
        doc = json.loads(Path(adj.path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read adjacency file {adj.path}: {exc.strerror}") from None
    A = AdjacencyMatrix.from_dict(doc)
    if A.k != K:
        raise DataError(f"adjacency is {A.k} x {A.k}, series has {K} nodes")
    return A


def _model_config(run: RunConfig, series: AlignedSeries, seed=None) -> ModelConfig:
    m = run.model
    return ModelConfig(k=series.n_nodes, f=series.n_features, d=m.d, m=m.m, tau=m.tau, L=m.L,
                       use_graph=m.use_graph, use_fusion=m.use_fusion, use_dynamic=m.use_dynamic,
                       task_weights=m.task_weights, d_dec=m.d_dec, beta_s=m.beta_s,
                       seed=run.seed if seed is None else seed)


def _load_data(path, run: RunConfig) -> AlignedSeries:
    return _series_with_target(load_series(path), run.data.target_feature)


def _run_series(run: RunConfig, data_arg) -> AlignedSeries:
    path = data_arg or run.data.path
    if path:
        return _load_data(path, run)
    if run.synth is not None:
        return synth_generate(run.synth)[0]
    raise ConfigError("no data: pass --data, set data.path or add a synth section")


# -- train / eval / predict -----------------------------------------------------

def cmd_train(args) -> int:
    run = load_run_config(args.config)
    series = _load_data(args.data, run)
    cfg = _model_config(run, series)
    prep = prepare(series, run.data.split, run.data.clip, min_length=cfg.L + cfg.tau)
    A = _resolve_adjacency(run, series, prep.train)
    train_w = window(prep.train, cfg.L, cfg.tau, cfg.m)
    val_w = window(prep.val, cfg.L, cfg.tau, cfg.m)
    out_model = Path(args.out_model)
    log_path = Path(args.log) if args.log else out_model.with_suffix(".log.json")
    resolved = run.to_dict()
    try:
        params, log = train(train_w, A, cfg, run.train, val_w)
    except TrainingFailure as exc:
        dump_json(log_path, {"config": resolved, "master_seed": run.seed, **exc.log.to_dict()})
        print(f"error: numeric failure in epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_model(out_model, cfg, params,
               run_config=resolved,
               master_seed=run.seed,
               config_hash=fingerprint(resolved),
               adjacency=A.to_dict(),
               preprocessing={
                   "split": list(run.data.split),
                   "clip_bounds": None if prep.bounds is None else prep.bounds.tolist(),
                   "norm_stats": prep.stats.to_dict(),
                   "target_feature": series.target_feature,
               })
    dump_json(log_path, {"config": resolved, "master_seed": run.seed, **log.to_dict()})
    last = log.epochs[-1] if log.epochs else {}
    print(f"trained {len(log.epochs)} epochs on {len(train_w)} windows; last {last}")
    return EXIT_OK


def _load_trained(model_path, data_path):
    cfg, params, doc = load_model(model_path)
    pre = doc["preprocessing"]
    series = _series_with_target(load_series(data_path), pre["target_feature"])
    if (series.n_nodes, series.n_features) != (cfg.k, cfg.f):
        raise DataError(f"data has {series.n_nodes} nodes x {series.n_features} features, "
                        f"model expects {cfg.k} x {cfg.f}")
    bounds = None if pre["clip_bounds"] is None else np.array(pre["clip_bounds"], dtype=np.float64)
    stats = NormStats.from_dict(pre["norm_stats"])
    A = AdjacencyMatrix.from_dict(doc["adjacency"]).weights
    return cfg, params, doc, series, bounds, stats, A


def _transform(series, bounds, stats):
    if bounds is not None:
        series = apply_bounds(series, bounds)
    return normalize(series, stats)


def cmd_eval(args) -> int:
    cfg, params, doc, series, bounds, stats, A = _load_trained(args.model, args.data)
    run = doc.get("run_config", {})
    normalized = run.get("eval", {}).get("normalized", True)
    n_train, n_val, _ = split_sizes(series.n_steps, doc["preprocessing"]["split"])
    test = _transform(series.slice(n_train + n_val, series.n_steps), bounds, stats)
    test_w = window(test, cfg.L, cfg.tau, cfg.m)
    report, preds, targets = evaluate(params, cfg, A, test_w, series.node_ids, stats, normalized,
                                      fingerprint=doc.get("config_hash", ""), config=run)
    report_path = Path(args.report)
    write_report_files(report, report_path, report_path.with_suffix(".csv"),
                       run.get("eval", {}).get("include_timing", False))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["origin_step", "target_step", "node", "prediction", "target"])
    for b, origin in enumerate(test_w.origins):
        for k, node in enumerate(series.node_ids):
            writer.writerow([int(origin), int(origin) + cfg.tau, node,
                             repr(float(preds[b, k])), repr(float(targets[b, k]))])
    atomic_write_text(report_path.with_suffix(".predictions.csv"), buf.getvalue())
    agg = report.aggregate
    print(f"{agg['n']} forecasts: MSE {agg['mse']:.6g} MAE {agg['mae']:.6g} "
          f"MAPE {agg['mape']:.6g}% RMAE {agg['rmae']:.6g} ({report.scale})")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg, params, doc, series, bounds, stats, A = _load_trained(args.model, args.data)
    row = args.at - series.step_offset
    if not 0 <= row < series.n_steps:
        raise DataError(f"--at {args.at} is outside the series steps "
                        f"{series.step_offset}..{series.step_offset + series.n_steps - 1}")
    processed = _transform(series, bounds, stats)
    yhat = predict(processed, row, A, params, cfg)
    raw = yhat * stats.std[:, series.target_feature] + stats.mean[:, series.target_feature]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["node", "origin_step", "target_step", "prediction", "prediction_raw"])
    for k, node in enumerate(series.node_ids):
        writer.writerow([node, args.at, args.at + cfg.tau, repr(float(yhat[k])), repr(float(raw[k]))])
    atomic_write_text(args.out, buf.getvalue())
    print(f"wrote {cfg.k} forecasts for step {args.at + cfg.tau} to {args.out}")
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------

def cmd_sweep(args) -> int:
    run = load_run_config(args.config)
    series = _run_series(run, args.data)
    cfg = _model_config(run, series)
    ratios = run.data.split
    from .data import split as split_series

    train_part = split_series(series, ratios)[0]
    A = _resolve_adjacency(run, series, train_part)
    if run.adjacency.mode == "identity" and run.synth is not None and not (args.data or run.data.path):
        # synthetic runs default to the generator's ground-truth graph
        A = synth_generate(run.synth)[1]
    exp = Experiment(series, A.weights, cfg, run.train, ratios, run.data.clip,
                     run.eval.normalized, run.seed)
    grid = {"hidden": run.eval.hidden_grid, "horizon": run.eval.horizon_grid,
            "ablation": run.eval.ablation_grid}[args.kind]
    if args.grid:
        grid = [g if args.kind == "ablation" else int(g) for g in args.grid.split(",")]
    workers = args.workers if args.workers is not None else run.eval.workers
    table = run_sweep(args.kind, grid, exp, run.eval.seeds, workers)
    table.config["run_config"] = run.to_dict()
    out = Path(args.out)
    write_report_files(table, out, out.with_suffix(".csv"), run.eval.include_timing)
    label = "model" if args.kind != "ablation" else None
    if label:
        medians = table.median("mse", label)
        print("median MSE: " + ", ".join(f"{k}={v:.5g}" for k, v in medians.items()))
    print(f"wrote {len(table)} cells to {out}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cloudcast", description="Multi-task forecasting of correlated cloud workloads.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate coupled synthetic telemetry")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="align trace CSVs onto a time grid")
    p.add_argument("--schema", required=True, help="preset name or schema JSON path")
    p.add_argument("--input", required=True, help="CSV file or directory of CSV files")
    p.add_argument("--bucket", type=float, required=True, help="bucket width in seconds")
    p.add_argument("--out", required=True, help="series CSV path (sidecar JSON written alongside)")
    p.add_argument("--max-gap", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=0.01)
    p.add_argument("--target-feature", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train the forecaster")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained model on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="report JSON path (CSV files written alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="hidden-width, horizon or ablation sweep")
    p.add_argument("--kind", required=True, choices=("hidden", "horizon", "ablation"))
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--grid", help="comma-separated grid overriding the config")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("predict", help="forecast all tasks from one step")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--at", type=int, required=True, help="global step of the forecast origin")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CloudcastError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
