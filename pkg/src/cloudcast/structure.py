"""Inter-task adjacency construction.

Every adjacency produced here is row-stochastic with strictly positive
diagonal (self-loops are always added before normalization).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

ROW_SUM_TOL = 1e-9
# |rho| computed for an exact copy can land one ulp under 1
CORR_GUARD = 1e-12


class ConstantSeriesWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    weights: np.ndarray
    node_ids: tuple = ()
    notes: tuple = field(default=(), compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DataError(f"adjacency must be square, got shape {w.shape}")
        if not np.isfinite(w).all() or (w < 0).any():
            raise DataError("adjacency entries must be finite and nonnegative")
        if np.abs(w.sum(axis=1) - 1.0).max(initial=0.0) > ROW_SUM_TOL:
            raise DataError("adjacency rows must sum to 1")
        if self.node_ids and len(self.node_ids) != w.shape[0]:
            raise DataError("node_ids length does not match adjacency size")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def identity(cls, k: int, node_ids=()):
        return cls(np.eye(k), node_ids)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "node_ids": list(self.node_ids),
            "weights": [[float(x) for x in row] for row in self.weights],
        }

    @classmethod
    def from_dict(cls, doc: dict):
        try:
            return cls(np.array(doc["weights"], dtype=np.float64), tuple(doc.get("node_ids", ())))
        except KeyError as exc:
            raise DataError(f"adjacency document missing field {exc}") from None


@dataclass(frozen=True)
class TopologySpec:
    nodes: tuple
    edges: tuple  # (src, dst, weight)

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise DataError("topology node ids must be unique")

    @classmethod
    def from_dict(cls, doc: dict):
        if "nodes" not in doc:
            raise DataError("topology document missing 'nodes'")
        edges = []
        for e in doc.get("edges", []):
            try:
                edges.append((str(e["src"]), str(e["dst"]), float(e.get("weight", 1.0))))
            except (KeyError, TypeError, ValueError):
                raise DataError(f"malformed topology edge {e!r}") from None
        return cls(tuple(str(n) for n in doc["nodes"]), tuple(edges))

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read topology file {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"topology file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)


def row_normalize(raw) -> AdjacencyMatrix:
    """Divide each row by its sum."""
    raw = np.asarray(raw, dtype=np.float64)
    if (raw < 0).any():
        raise DataError("adjacency weights must be nonnegative")
    sums = raw.sum(axis=1, keepdims=True)
    if (sums <= 0).any():
        raise DataError("adjacency has an all-zero row")
    return AdjacencyMatrix(raw / sums)


def adjacency_from_topology(spec: TopologySpec) -> AdjacencyMatrix:
    index = {n: i for i, n in enumerate(spec.nodes)}
    raw = np.eye(len(spec.nodes))
    for src, dst, weight in spec.edges:
        if src not in index or dst not in index:
            missing = src if src not in index else dst
            raise DataError(f"edge references unknown node {missing!r}")
        if weight < 0:
            raise DataError(f"negative edge weight {weight} on {src}->{dst}")
        if src != dst:
            raw[index[src], index[dst]] = weight
    out = row_normalize(raw)
    return AdjacencyMatrix(out.weights, spec.nodes)


def correlation_matrix(values: np.ndarray, mask: np.ndarray):
    """Pairwise Pearson correlation over jointly valid steps.

    ``values`` is T x K, ``mask`` T x K. Returns ``(rho, constant)`` where
    ``constant[k]`` flags nodes with zero variance; their rows and columns
    of ``rho`` are zero.
    """
    T, K = values.shape
    rho = np.zeros((K, K))
    constant = np.zeros(K, dtype=bool)
    for k in range(K):
        v = values[mask[:, k], k]
        constant[k] = v.size < 2 or np.ptp(v) == 0.0
    for i in range(K):
        rho[i, i] = 0.0 if constant[i] else 1.0
        for j in range(i + 1, K):
            if constant[i] or constant[j]:
                continue
            both = mask[:, i] & mask[:, j]
            if both.sum() < 3:
                continue
            a = values[both, i] - values[both, i].mean()
            b = values[both, j] - values[both, j].mean()
            denom = np.sqrt((a * a).sum() * (b * b).sum())
            r = float((a * b).sum() / denom) if denom > 0 else 0.0
            rho[i, j] = rho[j, i] = r
    return rho, constant


def adjacency_from_correlation(series, target_feature=None, threshold=0.5) -> AdjacencyMatrix:
    """Edges between nodes whose target features correlate by at least ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"correlation threshold must lie in [0, 1], got {threshold}")
    feat = series.target_feature if target_feature is None else target_feature
    values = series.values[:, :, feat]
    mask = series.mask
    if mask.any(axis=1).sum() < 3:
        raise DataError("correlation needs at least 3 valid time steps")
    rho, constant = correlation_matrix(values, mask)
    raw = np.where(np.abs(rho) + CORR_GUARD >= threshold, np.abs(rho), 0.0)
    np.fill_diagonal(raw, 1.0)
    notes = []
    for k in np.flatnonzero(constant):
        node = series.node_ids[k] if series.node_ids else str(k)
        msg = f"node {node} has a constant target series; only its self-loop is kept"
        warnings.warn(msg, ConstantSeriesWarning, stacklevel=2)
        notes.append(msg)
    out = row_normalize(raw)
    return AdjacencyMatrix(out.weights, tuple(series.node_ids), tuple(notes))
