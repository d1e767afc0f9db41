import csv
import json

import jsonschema
import pytest

from cloudcast.cli import main
from cloudcast.config import parse_run_config
from cloudcast.errors import ConfigError

REPORT_SCHEMA = {
    "type": "object",
    "required": ["label", "scale", "seed", "fingerprint", "mape_epsilon", "rmae_definition",
                 "aggregate", "per_task", "config"],
    "properties": {
        "label": {"type": "string"},
        "scale": {"enum": ["normalized", "raw"]},
        "seed": {"type": ["integer", "null"]},
        "fingerprint": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "mape_epsilon": {"type": "number"},
        "aggregate": {"$ref": "#/$defs/metrics"},
        "per_task": {"type": "array", "minItems": 1,
                     "items": {"allOf": [{"$ref": "#/$defs/metrics"},
                                         {"required": ["task"]}]}},
        "config": {"type": "object", "required": ["seed", "model", "train"]},
    },
    "$defs": {
        "metrics": {
            "type": "object",
            "required": ["n", "mse", "mae", "mape", "rmae"],
            "properties": {"n": {"type": "integer", "minimum": 1},
                           "mse": {"type": "number", "minimum": 0},
                           "mae": {"type": "number", "minimum": 0},
                           "mape": {"type": "number", "minimum": 0},
                           "rmae": {"type": "number", "minimum": 0}},
        },
    },
}

RUN = {
    "seed": 3,
    "synth": {"k": 3, "f": 2, "t": 300, "seed": 5},
    "model": {"d": 4, "m": 2, "tau": 1, "L": 6},
    "train": {"epochs": 2, "batch_size": 32, "lr": 0.003},
    "adjacency": {"mode": "correlation", "threshold": 0.3},
    "eval": {"seeds": [0, 1], "hidden_grid": [2, 3], "horizon_grid": [1]},
}


def _config(tmp_path, doc=RUN, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root)
    assert main(["synth", "--config", cfg, "--out", str(root / "syn")]) == 0
    data = str(root / "syn" / "series.csv")
    assert main(["train", "--data", data, "--config", cfg, "--out-model", str(root / "m.json")]) == 0
    assert main(["eval", "--model", str(root / "m.json"), "--data", data,
                 "--report", str(root / "rep.json")]) == 0
    return root, cfg, data


def test_synth_outputs_byte_identical(tmp_path, workspace):
    root, cfg, _ = workspace
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    for name in ("series.csv", "series.json", "adjacency.json", "manifest.json"):
        assert (tmp_path / "again" / name).read_bytes() == (root / "syn" / name).read_bytes()
    manifest = json.loads((root / "syn" / "manifest.json").read_text())
    assert len(manifest["config_hash"]) == 64 and manifest["master_seed"] == 5
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "s7"), "--seed", "7"]) == 0
    assert (tmp_path / "s7" / "series.csv").read_bytes() != (root / "syn" / "series.csv").read_bytes()


def test_synth_missing_field(tmp_path, capsys):
    doc = json.loads(json.dumps(RUN))
    del doc["synth"]["t"]
    assert main(["synth", "--config", _config(tmp_path, doc), "--out", str(tmp_path / "x")]) == 1
    assert "'t'" in capsys.readouterr().err


def test_ingest_fixture(tmp_path):
    rows = [f"node{n},{1000 + 30 * i},{i % 7},{n},,,1,2,3" for n in range(2) for i in range(50)]
    (tmp_path / "in").mkdir()
    (tmp_path / "in" / "trace.csv").write_text("\n".join(rows) + "\n")
    out = tmp_path / "series.csv"
    assert main(["ingest", "--schema", "machine-usage", "--input", str(tmp_path / "in"),
                 "--bucket", "60", "--out", str(out)]) == 0
    meta = json.loads(out.with_suffix(".json").read_text())
    # span 0..1470 s in 60 s buckets
    assert meta["n_steps"] == 25 and meta["ingest"]["records"] == 100
    with open(out) as fh:
        assert sum(1 for _ in csv.reader(fh)) == 1 + 25 * 2


def test_ingest_errors(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    args = ["--input", str(tmp_path / "empty"), "--bucket", "60", "--out", str(tmp_path / "o.csv")]
    assert main(["ingest", "--schema", "machine-usage", *args]) == 2
    assert "empty input" in capsys.readouterr().err
    assert main(["ingest", "--schema", "nonexistent", *args]) == 1


def test_train_rerun_identical(tmp_path, workspace):
    root, cfg, data = workspace
    assert main(["train", "--data", data, "--config", cfg, "--out-model", str(tmp_path / "m.json")]) == 0
    assert (tmp_path / "m.json").read_bytes() == (root / "m.json").read_bytes()
    assert (tmp_path / "m.log.json").read_bytes() == (root / "m.log.json").read_bytes()
    doc = json.loads((root / "m.json").read_text())
    assert doc["master_seed"] == 3 and doc["run_config"]["model"]["d"] == 4


def test_train_numeric_failure(tmp_path, workspace):
    _, _, data = workspace
    doc = json.loads(json.dumps(RUN))
    doc["train"]["lr"] = 1e200
    code = main(["train", "--data", data, "--config", _config(tmp_path, doc),
                 "--out-model", str(tmp_path / "bad.json")])
    assert code == 3
    log = json.loads((tmp_path / "bad.log.json").read_text())
    assert log["failed_epoch"] == 0 and not (tmp_path / "bad.json").exists()


def test_eval_report(tmp_path, workspace):
    root, _, data = workspace
    doc = json.loads((root / "rep.json").read_text())
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert main(["eval", "--model", str(root / "m.json"), "--data", data,
                 "--report", str(tmp_path / "rep.json")]) == 0
    for suffix in (".json", ".csv", ".predictions.csv"):
        name = "rep" + suffix
        assert (tmp_path / name).read_bytes() == (root / name).read_bytes()
    assert main(["eval", "--model", str(tmp_path / "none.json"), "--data", data,
                 "--report", str(tmp_path / "r.json")]) == 2


def test_predict_matches_eval(tmp_path, workspace):
    root, _, data = workspace
    with open(root / "rep.predictions.csv") as fh:
        stored = list(csv.DictReader(fh))
    origin = int(stored[-1]["origin_step"])
    out = tmp_path / "p.csv"
    assert main(["predict", "--model", str(root / "m.json"), "--data", data,
                 "--at", str(origin), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    expected = {r["node"]: r["prediction"] for r in stored if int(r["origin_step"]) == origin}
    assert {r["node"]: r["prediction"] for r in rows} == expected
    assert main(["predict", "--model", str(root / "m.json"), "--data", data,
                 "--at", "300", "--out", str(out)]) == 2


def test_sweep_single_cell_and_parallel(tmp_path, workspace):
    _, cfg, _ = workspace
    assert main(["sweep", "--kind", "horizon", "--config", cfg, "--out", str(tmp_path / "h.json"),
                 "--grid", "1"]) == 0
    table = json.loads((tmp_path / "h.json").read_text())
    assert [r["value"] for r in table["rows"]] == [1, 1]
    for workers in ("1", "2"):
        assert main(["sweep", "--kind", "hidden", "--config", cfg,
                     "--out", str(tmp_path / f"w{workers}.json"), "--workers", workers]) == 0
    assert (tmp_path / "w1.json").read_bytes() == (tmp_path / "w2.json").read_bytes()
    assert (tmp_path / "w1.csv").read_bytes() == (tmp_path / "w2.csv").read_bytes()


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["train", "--bogus"]) == 1
    assert main(["sweep", "--kind", "depth", "--config", "x", "--out", "y"]) == 1


def test_config_strictness():
    with pytest.raises(ConfigError, match="unknown key 'dd'"):
        parse_run_config({"model": {"dd": 3}})
    with pytest.raises(ConfigError, match="unknown top-level key"):
        parse_run_config({"modle": {}})
    with pytest.raises(ConfigError, match="must be an integer"):
        parse_run_config({"model": {"d": 2.5}})
    with pytest.raises(ConfigError, match="missing required field 'k'"):
        parse_run_config({"synth": {"f": 1, "t": 10}})
    with pytest.raises(ConfigError):
        parse_run_config({"adjacency": {"mode": "topology"}})
    run = parse_run_config(RUN)
    assert parse_run_config(run.to_dict()).to_dict() == run.to_dict()


@pytest.mark.parametrize("mode", ["identity", "topology", "matrix"])
def test_train_adjacency_modes(tmp_path, workspace, mode):
    root, _, data = workspace
    doc = json.loads(json.dumps(RUN))
    doc["train"]["epochs"] = 1
    if mode == "topology":
        topo = {"nodes": ["n2", "n0", "n1"], "edges": [{"src": "n0", "dst": "n1"}]}
        (tmp_path / "topo.json").write_text(json.dumps(topo))
        doc["adjacency"] = {"mode": "topology", "path": str(tmp_path / "topo.json")}
    elif mode == "matrix":
        doc["adjacency"] = {"mode": "matrix", "path": str(root / "syn" / "adjacency.json")}
    else:
        doc["adjacency"] = {"mode": "identity"}
    assert main(["train", "--data", data, "--config", _config(tmp_path, doc),
                 "--out-model", str(tmp_path / "m.json")]) == 0
    weights = json.loads((tmp_path / "m.json").read_text())["adjacency"]["weights"]
    if mode == "topology":
        assert weights[0] == [0.5, 0.5, 0.0] and weights[2] == [0.0, 0.0, 1.0]
