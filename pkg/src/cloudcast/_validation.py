"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .structure import AdjacencyMatrix


def check_positive_int(name, value, minimum=1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_positive_float(name, value) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not value > 0:
        raise ConfigError(f"{name} must be a positive number, got {value!r}")
    return float(value)


def check_adjacency(A, k: int) -> np.ndarray:
    """Return A as a validated K x K row-stochastic array."""
    if isinstance(A, AdjacencyMatrix):
        A = A.weights
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (k, k):
        raise ShapeError(f"adjacency must be {k} x {k}, got {A.shape}")
    return AdjacencyMatrix(A).weights


def check_inputs(inputs, k: int, f: int) -> np.ndarray:
    """Validate a B x L x K x F window tensor."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 4 or x.shape[2:] != (k, f):
        raise ShapeError(f"window inputs must be B x L x {k} x {f}, got {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("window inputs contain non-finite values")
    return x


def check_task_weights(weights, k: int) -> tuple:
    """Positive weights rescaled to sum to K; uniform when None."""
    if weights is None:
        return (1.0,) * k
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (k,) or not np.isfinite(w).all() or (w <= 0).any():
        raise ConfigError(f"task_weights must be {k} positive numbers")
    return tuple(float(x) for x in w * (k / w.sum()))
