import json

import numpy as np
import pytest

from cloudcast.baselines import (MLPForecaster, PersistenceForecaster, baseline_persistence,
                                 mlp_predict, train_mlp)
from cloudcast.data import AlignedSeries, SynthConfig, synth_generate, window
from cloudcast.errors import ConfigError, DataError
from cloudcast.evaluation import (MAPE_EPSILON, Experiment, MetricsReport, ablation_suite,
                                  all_metrics, baseline_mlp, build_report, count_inversions,
                                  evaluate, mae, mape, mse, rmae, run_sweep, sweep_hidden,
                                  sweep_horizon, write_report_files)
from cloudcast.model import ModelConfig, TrainConfig, init_params


def _ramp(T=50, K=2, slope=1.0):
    values = (slope * np.arange(T, dtype=float))[:, None, None] + np.zeros((1, K, 1))
    return AlignedSeries(values, np.ones((T, K), dtype=bool))


# -- metrics --------------------------------------------------------------------

def test_metric_worked_examples():
    assert mse([1, 2], [0, 0]) == 2.5
    assert mae([1, 2], [0, 0]) == 1.5
    assert mape([1, 2], [0, 0]) == 100 * 1.5 / MAPE_EPSILON
    assert mae([1, 2], [2, 4]) == 1.5
    assert rmae([1, 2], [2, 4]) == 0.5
    for f in (mse, mae, mape, rmae):
        assert f([3.0, -1.0], [3.0, -1.0]) == 0.0


def test_metric_masking_and_errors():
    assert mse([1, 100, 3], [1, 0, 5], mask=[1, 0, 1]) == 2.0
    assert mae([1, np.nan], [2, 7]) == 1.0
    with pytest.raises(DataError):
        mse([1.0], [np.nan])
    with pytest.raises(DataError):
        rmae([1.0, 2.0], [0.0, 0.0])


def test_metric_invariants():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = rng.integers(1, 30)
        p, y = rng.normal(size=n), rng.normal(size=n)
        m = all_metrics(p, y)
        assert all(m[k] >= 0 for k in ("mse", "mae", "mape", "rmae"))
        assert m["mae"] ** 2 <= m["mse"] * (1 + 1e-12)
        perm = rng.permutation(n)
        m2 = all_metrics(p[perm], y[perm])
        for k in ("mse", "mae", "mape", "rmae"):
            assert m2[k] == pytest.approx(m[k], rel=1e-12)


def test_report_aggregate_is_count_weighted():
    preds = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, np.nan]])
    targets = np.array([[1.0, 1.0], [0.0, 1.0], [0.0, 5.0]])
    rep = build_report(preds, targets, ["a", "b"])
    a, b = rep.per_task
    assert (a["n"], b["n"]) == (3, 2)
    assert rep.aggregate["mse"] == pytest.approx((3 * a["mse"] + 2 * b["mse"]) / 5, rel=1e-15)
    back = MetricsReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert back.aggregate == rep.aggregate


def test_report_files_exclude_timing_by_default(tmp_path):
    rep = build_report(np.ones((4, 2)), np.zeros((4, 2)) + 2)
    rep.wall_clock = 1.23
    write_report_files(rep, tmp_path / "r.json", tmp_path / "r.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert "wall_clock_seconds" not in doc
    assert set(doc) >= {"aggregate", "per_task", "scale", "seed", "fingerprint", "mape_epsilon",
                        "rmae_definition", "config", "label"}
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "label,task,n,mse,mae,mape,rmae" and len(lines) == 4


def test_count_inversions():
    assert count_inversions([1, 2, 3]) == (0, 0.0)
    n, drop = count_inversions([1.0, 2.0, 1.9, 3.0])
    assert n == 1 and drop == pytest.approx(0.05)


# -- baselines ------------------------------------------------------------------

def test_persistence_constant_and_ramp():
    s = AlignedSeries(np.full((30, 2, 1), 4.0), np.ones((30, 2), dtype=bool))
    pred = baseline_persistence(s, 3)
    assert mse(pred[:-3], s.targets[3:]) == 0.0
    ramp = _ramp()
    pred = baseline_persistence(ramp, 2)
    assert mae(pred[:-2], ramp.targets[2:]) == 2.0
    est = PersistenceForecaster(horizon=2).fit(ramp)
    np.testing.assert_array_equal(est.predict(ramp), pred)


def test_persistence_error_grows_with_horizon():
    for seed in range(5):
        walk = np.random.default_rng(seed).normal(size=(3000, 3)).cumsum(axis=0)
        s = AlignedSeries(walk[:, :, None], np.ones((3000, 3), dtype=bool))
        errors = []
        for tau in (1, 2, 4, 8):
            pred = baseline_persistence(s, tau)
            errors.append(mae(pred[:-tau], s.targets[tau:]))
        assert errors == sorted(errors)


def test_mlp_zero_epochs_and_determinism():
    s, _ = synth_generate(SynthConfig(k=3, f=2, t=200, seed=1))
    w = window(s, 6, 1)
    params, _ = train_mlp(w, 4, TrainConfig(epochs=0), seed=2)
    assert np.isfinite(mlp_predict(params, w.inputs)).all()
    a, _ = train_mlp(w, 4, TrainConfig(epochs=2), seed=2)
    b, _ = train_mlp(w, 4, TrainConfig(epochs=2), seed=2)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    est = MLPForecaster(hidden_dim=4, window=6, epochs=1).fit(s)
    pred = est.predict(s)
    assert np.isnan(pred[:5]).all() and np.isfinite(pred[5:]).all()


def test_mlp_ignores_other_nodes():
    s, _ = synth_generate(SynthConfig(k=3, f=1, t=100, seed=1))
    w = window(s, 5, 1)
    params, _ = train_mlp(w, 3, TrainConfig(epochs=1), seed=0)
    x = w.inputs.copy()
    base = mlp_predict(params, x)
    x[:, :, 1] += 10.0
    out = mlp_predict(params, x)
    np.testing.assert_array_equal(out[:, [0, 2]], base[:, [0, 2]])


# -- evaluate and sweeps --------------------------------------------------------

@pytest.fixture(scope="module")
def experiment():
    s, A = synth_generate(SynthConfig(k=3, f=2, t=300, seed=3))
    cfg = ModelConfig(k=3, f=2, d=4, m=2, L=6, tau=1)
    return Experiment(s, A.weights, cfg, TrainConfig(epochs=2, batch_size=32, lr=5e-3), master_seed=5)


def test_evaluate_deterministic_and_scales(experiment):
    prep = experiment.prepared()
    cfg = experiment.model
    w = prep.windows("test", cfg.L, cfg.tau, cfg.m)
    params = init_params(cfg)
    r1, p1, _ = evaluate(params, cfg, experiment.A, w, stats=prep.stats)
    r2, p2, _ = evaluate(params, cfg, experiment.A, w, stats=prep.stats)
    assert json.dumps(r1.to_dict()) == json.dumps(r2.to_dict())
    raw, praw, traw = evaluate(params, cfg, experiment.A, w, stats=prep.stats, normalized=False)
    assert raw.scale == "raw" and r1.scale == "normalized"
    np.testing.assert_allclose(praw, p1 * prep.stats.std[:, 0] + prep.stats.mean[:, 0])
    with pytest.raises(ConfigError):
        evaluate(params, cfg, experiment.A, w, normalized=False)


def test_mlp_report(experiment):
    rep = baseline_mlp(experiment, experiment.model)
    assert rep.label == "mlp" and np.isfinite(rep.aggregate["mse"])


def test_sweep_rows_and_parallel_identity(experiment):
    serial = sweep_hidden([4, 2], experiment, seeds=[0, 1], workers=1)
    assert len(serial) == 4
    assert [(r["value"], r["seed_index"]) for r in serial.rows] == [(2, 0), (2, 1), (4, 0), (4, 1)]
    parallel = sweep_hidden([2, 4], experiment, seeds=[0, 1], workers=2)
    assert json.dumps(serial.to_dict()) == json.dumps(parallel.to_dict())
    assert serial.to_csv() == parallel.to_csv()
    single = sweep_horizon([1], experiment, seeds=[0])
    assert len(single) == 1 and set(single.rows[0]["reports"]) == {"model", "persistence"}


def test_sweep_validation(experiment):
    with pytest.raises(ConfigError):
        run_sweep("hidden", [], experiment, [0])
    with pytest.raises(ConfigError):
        run_sweep("hidden", [2, 2], experiment, [0])
    with pytest.raises(ConfigError):
        ablation_suite(experiment, [0], variants=["full", "bogus"])


def test_ablation_shares_seeds_and_identity_consistency(experiment):
    from dataclasses import replace

    exp = replace(experiment, A=np.eye(3))
    table = ablation_suite(exp, [0], variants=["full", "no_graph"])
    full, no_graph = (r["reports"] for r in table.rows)
    assert table.rows[0]["seed"] == table.rows[1]["seed"]
    assert full["full"].aggregate == no_graph["no_graph"].aggregate


def test_ablation_runs_on_decoupled_data():
    s, _ = synth_generate(SynthConfig(k=3, f=1, t=250, rho=0.0, seed=8))
    exp = Experiment(s, np.eye(3), ModelConfig(k=3, f=1, d=3, m=1, L=5),
                     TrainConfig(epochs=1), master_seed=1)
    table = ablation_suite(exp, [0])
    labels = [next(iter(r["reports"])) for r in table.rows]
    assert labels == ["full", "no_graph", "no_fusion", "no_dynamic", "mlp", "persistence"]
