"""Dense 2-D numeric kernel with reverse-mode gradients.

Everything is float64. ``Tensor`` records a tape of operations; calling
:func:`backward` on a scalar result accumulates ``.grad`` on every tensor
that requires it. Binary operations broadcast only across rows or columns
of 2-D operands (``1 x n``, ``m x 1`` or ``1 x 1`` against ``m x n``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

from .errors import NumericFailure, ShapeError

# largest double below 1; keeps squashing nonlinearities strictly inside
# their open ranges even when the exact value rounds to the endpoint
_ONE_MINUS = 1.0 - 2.0**-53
_TINY = np.nextafter(0.0, 1.0)


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {a.ndim}-D")
    return a


def _check(value: np.ndarray, op: str) -> np.ndarray:
    # a finite sum implies every entry is finite; only a non-finite sum needs the full scan
    if not np.isfinite(value.sum()) and not np.isfinite(value).all():
        raise NumericFailure(op)
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"{op}: cannot combine shapes {a} and {b}")
    return tuple(out)


class Tensor:
    """A 2-D float64 value on the gradient tape."""

    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, *, op="leaf", parents=(), backward=None):
        self.value = as_matrix(value)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, op, parents, backward):
    _check(value, op)
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, needs, op=op, parents=parents if needs else (),
                  backward=backward if needs else None)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    # gradients are never modified in place, so sharing arrays is safe
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


# -- elementwise / linear ops -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape, "add")
    out_value = a.value + b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_value, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    out_value = a.value - b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(out_value, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    out_value = a.value * b.value

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _node(out_value, "mul", (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    out_value = a.value @ b.value

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.T @ g)

    return _node(out_value, "matmul", (a, b), backward)


def sigmoid_value(x: np.ndarray) -> np.ndarray:
    return np.clip(expit(np.asarray(x, dtype=np.float64)), _TINY, _ONE_MINUS)


def tanh_value(x: np.ndarray) -> np.ndarray:
    return np.clip(np.tanh(np.asarray(x, dtype=np.float64)), -_ONE_MINUS, _ONE_MINUS)


def sigmoid(x) -> Tensor:
    x = constant(x)
    _check(x.value, "sigmoid")
    s = sigmoid_value(x.value)

    def backward(g):
        _accumulate(x, g * s * (1.0 - s))

    return _node(s, "sigmoid", (x,), backward)


def tanh(x) -> Tensor:
    x = constant(x)
    _check(x.value, "tanh")
    t = tanh_value(x.value)

    def backward(g):
        _accumulate(x, g * (1.0 - t * t))

    return _node(t, "tanh", (x,), backward)


def relu(x) -> Tensor:
    x = constant(x)
    on = x.value > 0
    out_value = np.where(on, x.value, 0.0)

    def backward(g):
        _accumulate(x, g * on)

    return _node(out_value, "relu", (x,), backward)


def square(x) -> Tensor:
    x = constant(x)
    out_value = x.value * x.value

    def backward(g):
        _accumulate(x, 2.0 * g * x.value)

    return _node(out_value, "square", (x,), backward)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` as a single tape node; ``b`` is a row or a 1 x 1 scalar."""
    x, w, b = constant(x), constant(w), constant(b)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: inner dimensions differ ({x.shape} x {w.shape})")
    _broadcast_shape((x.shape[0], w.shape[1]), b.shape, "affine")
    out_value = x.value @ w.value + b.value

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ w.value.T)
        if w.requires_grad:
            _accumulate(w, x.value.T @ g)
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_value, "affine", (x, w, b), backward)


def mix(gate, a, b) -> Tensor:
    """Convex blend ``gate * a + (1 - gate) * b``; ``gate`` may be a column."""
    gate, a, b = constant(gate), constant(a), constant(b)
    if a.shape != b.shape:
        raise ShapeError(f"mix: operands differ {a.shape} vs {b.shape}")
    _broadcast_shape(a.shape, gate.shape, "mix")
    out_value = gate.value * a.value + (1.0 - gate.value) * b.value

    def backward(g):
        if gate.requires_grad:
            _accumulate(gate, _unbroadcast(g * (a.value - b.value), gate.shape))
        if a.requires_grad:
            _accumulate(a, g * gate.value)
        if b.requires_grad:
            _accumulate(b, g * (1.0 - gate.value))

    return _node(out_value, "mix", (gate, a, b), backward)


# -- structural ops -----------------------------------------------------------

def concat_cols(parts) -> Tensor:
    parts = [constant(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(rows)}")
    out_value = np.concatenate([p.value for p in parts], axis=1)
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            _accumulate(p, g[:, lo:hi])

    return _node(out_value, "concat_cols", tuple(parts), backward)


def _one_hot(index: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((index.size, n))
    out[np.arange(index.size), index] = 1.0
    return out


def take_rows(x, index) -> Tensor:
    """Gather rows ``x[index]``; the adjoint scatter-adds back."""
    x = constant(x)
    index = np.asarray(index, dtype=np.intp)
    out_value = x.value[index]

    def backward(g):
        _accumulate(x, _one_hot(index, x.shape[0]).T @ g)

    return _node(out_value, "take_rows", (x,), backward)


def row_heads(x, weights, bias, index) -> Tensor:
    """Per-row linear heads: ``out[r] = x[r] . weights[index[r]] + bias[index[r]]``."""
    x, weights, bias = constant(x), constant(weights), constant(bias)
    index = np.asarray(index, dtype=np.intp)
    if weights.shape[1] != x.shape[1] or bias.shape != (weights.shape[0], 1):
        raise ShapeError(f"row_heads: {x.shape} rows against heads {weights.shape}/{bias.shape}")
    w_rows = weights.value[index]
    out_value = (x.value * w_rows).sum(axis=1, keepdims=True) + bias.value[index]

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * w_rows)
        if weights.requires_grad or bias.requires_grad:
            onehot = _one_hot(index, weights.shape[0])
            _accumulate(weights, onehot.T @ (g * x.value))
            _accumulate(bias, onehot.T @ g)

    return _node(out_value, "row_heads", (x, weights, bias), backward)


def concat_rows(parts) -> Tensor:
    parts = [constant(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(cols)}")
    out_value = np.concatenate([p.value for p in parts], axis=0)
    edges = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            _accumulate(p, g[lo:hi])

    return _node(out_value, "concat_rows", tuple(parts), backward)


def weighted_sse(pred, target, weight) -> Tensor:
    """``sum(weight * (pred - target)**2)`` with constant target and weight."""
    pred = constant(pred)
    target = as_matrix(target)
    weight = as_matrix(weight)
    if target.shape != pred.shape:
        raise ShapeError(f"weighted_sse: target {target.shape} vs prediction {pred.shape}")
    _broadcast_shape(pred.shape, weight.shape, "weighted_sse")
    err = pred.value - target
    out_value = np.array([[(weight * err * err).sum()]])

    def backward(g):
        _accumulate(pred, 2.0 * g[0, 0] * weight * err)

    return _node(out_value, "weighted_sse", (pred,), backward)


def row_sum(x) -> Tensor:
    x = constant(x)
    out_value = x.value.sum(axis=1, keepdims=True)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _node(out_value, "row_sum", (x,), backward)


def total(x) -> Tensor:
    x = constant(x)
    out_value = np.array([[x.value.sum()]])

    def backward(g):
        _accumulate(x, np.full(x.shape, g[0, 0]))

    return _node(out_value, "total", (x,), backward)


def block_mix(mixing: np.ndarray, x) -> Tensor:
    """Apply a fixed K x K matrix to every consecutive block of K rows.

    ``x`` holds B stacked K-row blocks (row ``b*K + k``); the result is
    ``mixing @ block`` for each block. ``mixing`` is a constant.
    """
    x = constant(x)
    mixing = as_matrix(mixing)
    k = mixing.shape[0]
    if mixing.shape != (k, k) or x.shape[0] % k:
        raise ShapeError(f"block_mix: {mixing.shape} mixing cannot act on {x.shape}")
    blocks = x.value.reshape(-1, k, x.shape[1])
    out_value = np.matmul(mixing, blocks).reshape(x.shape)

    def backward(g):
        gb = g.reshape(-1, k, x.shape[1])
        _accumulate(x, np.matmul(mixing.T, gb).reshape(x.shape))

    return _node(out_value, "block_mix", (x,), backward)


def backward(root: Tensor) -> None:
    """Reverse sweep from a 1 x 1 ``root``."""
    if root.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar root, got {root.shape}")
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- plain matrix helpers -----------------------------------------------------

def mat_mul(a, b) -> np.ndarray:
    """Matrix product of two 2-D arrays with a shape check."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    return a @ b


# -- gradient evaluation ------------------------------------------------------

ParamSet = Mapping[str, np.ndarray]


def grad_eval(f: Callable[[dict], Tensor], params: ParamSet):
    """Return ``(value, grads)`` of scalar program ``f`` at ``params``.

    ``f`` receives a dict of leaf tensors keyed like ``params``.
    """
    leaves = {name: Tensor(np.array(v, dtype=np.float64), True) for name, v in params.items()}
    # overflow is reported by the finiteness checks, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        out = f(leaves)
        if not isinstance(out, Tensor):
            raise TypeError("program must return a Tensor")
        backward(out)
    grads = {}
    for name, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        if not np.isfinite(g).all():
            raise NumericFailure("backward", f"non-finite gradient for '{name}'")
        grads[name] = np.array(g).reshape(np.shape(params[name]))
    return out.item(), grads


@dataclass
class CheckReport:
    max_rel_error: float
    tolerance: float
    worst: tuple | None = None
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(f, params: ParamSet, epsilon=1e-5, tolerance=1e-4) -> CheckReport:
    """Compare analytic gradients with central differences entry by entry."""
    if epsilon <= 0 or tolerance <= 0:
        raise ValueError("epsilon and tolerance must be positive")
    _, grads = grad_eval(f, params)

    def value_at(p):
        return f({n: Tensor(v) for n, v in p.items()}).item()

    work = {n: np.array(v, dtype=np.float64) for n, v in params.items()}
    worst_err, worst = 0.0, None
    per_param = {}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        param_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = value_at(work)
            flat[i] = orig - epsilon
            down = value_at(work)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            if not np.isfinite(numeric):
                raise NumericFailure("grad_check")
            a = gflat[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
            param_worst = max(param_worst, err)
            if err > worst_err:
                worst_err, worst = err, (name, i, a, numeric)
        per_param[name] = param_worst
    return CheckReport(worst_err, tolerance, worst, per_param)


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def opt_step(params: ParamSet, grads: ParamSet, state: AdamState):
    """One adaptive-moment update. Returns ``(new_params, new_state)``."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {np.shape(p)}")
        if not np.isfinite(g).all():
            raise NumericFailure("opt_step", f"non-finite gradient for '{name}'")
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        p_new = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.isfinite(p_new).all():
            raise NumericFailure("opt_step", f"parameter '{name}' became non-finite")
        new_params[name], new_m[name], new_v[name] = p_new, m, v
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
    return new_params, new_state


# -- randomness ---------------------------------------------------------------

class RandomSource:
    """Seeded PCG64 stream with splittable, order-independent sub-streams.

    The stream is fully determined by ``(seed, key)``: numpy's
    ``SeedSequence`` hashes both into the PCG64 state, so
    ``derive("sweep", 3, 1)`` always yields the same generator no matter
    how many other sub-streams were derived first.
    """

    def __init__(self, seed: int, key: tuple = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_int(k) for k in self.key))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def derive(self, *key) -> "RandomSource":
        return RandomSource(self.seed, self.key + key)

    def derive_seed(self, *key) -> int:
        """A 63-bit integer seed for a sub-component."""
        return int(self.derive(*key).generator.integers(0, 2**63 - 1))

    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)


def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("sub-stream keys must be non-negative")
        return int(k)
    # stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(str(k).encode("utf-8")).digest()[:8], "little")
