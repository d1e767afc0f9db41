"""Strict JSON run configuration.

Unknown keys anywhere are rejected, and every missing required field is
reported by name.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_args, get_type_hints

from .data import SynthConfig
from .errors import ConfigError
from .model import TrainConfig


@dataclass
class DataSection:
    path: str | None = None
    target_feature: int | None = None
    split: tuple = (0.7, 0.1, 0.2)
    clip: tuple | None = (0.005, 0.995)


@dataclass
class ModelSection:
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


@dataclass
class AdjacencySection:
    mode: str = "identity"  # identity | topology | correlation | matrix
    path: str | None = None
    threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in ("identity", "topology", "correlation", "matrix"):
            raise ConfigError(f"adjacency.mode must be identity, topology, correlation or matrix, "
                              f"got {self.mode!r}")
        if self.mode in ("topology", "matrix") and not self.path:
            raise ConfigError(f"adjacency.mode {self.mode!r} needs adjacency.path")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("adjacency.threshold must lie in [0, 1]")


@dataclass
class EvalSection:
    normalized: bool = True
    hidden_grid: tuple = (2, 8, 32, 128)
    horizon_grid: tuple = (1, 2, 4, 8)
    ablation_grid: tuple = ("full", "no_graph", "no_fusion", "no_dynamic", "mlp", "persistence")
    seeds: tuple = (0, 1, 2)
    workers: int = 1
    include_timing: bool = False


@dataclass
class OutputSection:
    model: str | None = None
    report: str | None = None
    sweep: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig | None = None
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    adjacency: AdjacencySection = field(default_factory=AdjacencySection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


SECTIONS = {
    "data": DataSection,
    "synth": SynthConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "adjacency": AdjacencySection,
    "eval": EvalSection,
    "output": OutputSection,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _unwrap(hint):
    """``(base type, nullable)`` for a field annotation."""
    args = get_args(hint)
    if args and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return (rest[0] if len(rest) == 1 else hint), True
    return hint, False


_NAMES = {int: "an integer", float: "a number", bool: "a boolean", str: "a string", tuple: "a list"}


def _convert(section, name, value, hint):
    base, nullable = _unwrap(hint)
    where = f"{section}.{name}"
    if value is None:
        if nullable:
            return None
        raise ConfigError(f"{where} must not be null")
    ok = {
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        bool: lambda v: isinstance(v, bool),
        str: lambda v: isinstance(v, str),
        tuple: lambda v: isinstance(v, list),
    }.get(base)
    if ok is not None and not ok(value):
        raise ConfigError(f"{where} must be {_NAMES[base]}, got {json.dumps(value)}")
    if base is float:
        return float(value)
    if base is tuple:
        return tuple(value)
    return value


def parse_section(cls, doc, section: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    hints = get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{section}: unknown key {unknown[0]!r}")
    missing = [n for n, f in known.items()
               if n not in doc and f.default is dataclasses.MISSING
               and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(f"{section}: missing required field {missing[0]!r}")
    kwargs = {name: _convert(section, name, value, hints[name]) for name, value in doc.items()}
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key {unknown[0]!r}")
    kwargs = {}
    if "seed" in doc:
        seed = doc["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        kwargs["seed"] = seed
    for name, cls in SECTIONS.items():
        if name in doc:
            kwargs[name] = parse_section(cls, doc[name], name)
    return RunConfig(**kwargs)


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_run_config(doc)
