"""Dense reverse-mode differentiation over float64 numpy arrays.

Every value is at least 2-D. Leading axes beyond the last two are batch
axes: a ``(B, T, d)`` tensor is a stack of ``B`` matrices of shape ``(T, d)``.
Weight matrices are shared across the batch in ``matmul`` and row-vector
biases broadcast in ``add``; no other broadcasting is accepted.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GradientError(RuntimeError):
    """Misuse of the backward pass."""


class Tensor:
    """A float64 array that records the operations applied to it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim < 2:
            arr = arr.reshape(1, -1) if arr.ndim == 1 else arr.reshape(1, 1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single entry, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._backward = backward_fn if out.requires_grad else None
    out.name = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape_str(t: Tensor) -> str:
    return "x".join(str(n) for n in t.shape)


# --------------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; a 2-D ``b`` is shared across batch axes."""
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {_shape_str(a)} @ {_shape_str(b)} (inner dims {a.cols} != {b.rows})")
    if b.data.ndim > 2 and b.data.shape[:-2] != a.data.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ, {_shape_str(a)} @ {_shape_str(b)}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _node(out, "matmul", (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    out = np.swapaxes(a.data, -1, -2)

    def bw(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _node(out, "transpose", (a,), bw)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    # row-vector bias: (1, n) against (..., m, n)
    if b.data.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.cols:
        return
    raise DimensionError(f"{op}: shapes {_shape_str(a)} and {_shape_str(b)} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.data - b.data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _node(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accumulate(a, g * c)

    return _node(a.data * c, "scale", (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _node(out, "sigmoid", (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out * out))

    return _node(out, "tanh", (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, 2.0 * g * a.data)

    return _node(a.data * a.data, "square", (a,), bw)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(a: Tensor, kind: str, b: Tensor | None = None, c: float | None = None) -> Tensor:
    """Dispatch by name: add/sub/mul take ``b``, scale takes ``c``."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs a second operand")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        if c is None:
            raise ValueError("scale needs a constant")
        return scale(a, c)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""

    def bw(g):
        _accumulate(a, np.broadcast_to(g.reshape(()), a.shape))

    return _node(np.array([[a.data.sum()]]), "sum", (a,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Append columns left to right."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_cols needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                "concat_cols: row counts differ: " + ", ".join(_shape_str(p) for p in parts)
            )
    if len(parts) == 1:
        return parts[0]
    widths = [p.cols for p in parts]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                _accumulate(p, g[..., lo:hi])

    return _node(np.concatenate([p.data for p in parts], axis=-1), "concat", parts, bw)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        _accumulate(a, full)

    return _node(a.data[..., lo:hi].copy(), "slice_cols", (a,), bw)


def row(a: Tensor, t: int) -> Tensor:
    """Row ``t`` of every matrix in the batch, keeping a length-1 row axis."""

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., t : t + 1, :] = g
        _accumulate(a, full)

    return _node(a.data[..., t : t + 1, :].copy(), "row", (a,), bw)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate single-row tensors along the row axis."""
    parts = list(parts)
    for p in parts:
        if p.rows != 1 or p.shape[:-2] != parts[0].shape[:-2] or p.cols != parts[0].cols:
            raise DimensionError("stack_rows: parts must be matching single rows")

    def bw(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                _accumulate(p, g[..., i : i + 1, :])

    return _node(np.concatenate([p.data for p in parts], axis=-2), "stack_rows", parts, bw)


def flatten_batch(a: Tensor) -> Tensor:
    """(B, 1, n) -> (B, n)."""
    if a.data.ndim != 3 or a.rows != 1:
        raise DimensionError(f"flatten_batch expects (B, 1, n), got {_shape_str(a)}")
    shape = a.shape

    def bw(g):
        _accumulate(a, g.reshape(shape))

    return _node(a.data.reshape(shape[0], shape[2]), "flatten", (a,), bw)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis with max subtraction.

    ``mask`` is a boolean array broadcastable to ``a``; False entries get
    probability exactly zero. Every row must keep at least one True entry.
    """
    if a.data.size == 0:
        raise DimensionError("softmax_rows on empty tensor")
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _node(out, "softmax", (a,), bw)


def cross_entropy(probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-probability of the true class, clamped at ``LOG_EPS``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    p = probs.data.reshape(-1, probs.cols)
    if p.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: {p.shape[0]} rows but {labels.shape[0]} labels")
    if labels.size == 0:
        raise ValueError("cross_entropy: no labels")
    if labels.min() < 0 or labels.max() >= probs.cols:
        raise ValueError(f"cross_entropy: labels must lie in [0, {probs.cols - 1}]")
    n = labels.shape[0]
    idx = np.arange(n)
    picked = p[idx, labels]
    clamped = np.maximum(picked, LOG_EPS)
    loss = -np.log(clamped).mean()

    def bw(g):
        grad = np.zeros_like(p)
        live = picked > LOG_EPS
        grad[idx[live], labels[live]] = -1.0 / (picked[live] * n)
        _accumulate(probs, float(g.reshape(())) * grad.reshape(probs.shape))

    return _node(np.array([[loss]]), "cross_entropy", (probs,), bw)


# ---------------------------------------------------------------- backward


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``; parents precede children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked tensor feeding ``loss``.

    A graph can be differentiated once. Calling again before the leaves are
    reset with :func:`zero_grad` raises :class:`GradientError`.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tracked tensor")
    if loss.grad is not None:
        raise GradientError("backward already ran on this graph; reset gradients first")
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -------------------------------------------------------------- grad check


def numeric_grad(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``param``."""
    out = np.zeros(param.data.shape, dtype=param.data.dtype)
    flat = param.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return out


# finite differences at h=1e-5 are roundoff-limited near 1e-11 in float64;
# the numeric side runs in extended precision where the platform has it
EXTENDED = np.longdouble if np.finfo(np.longdouble).eps < 1e-18 else np.float64


def grad_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, extended: bool = True
) -> float:
    """Max over entries of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    ``f`` rebuilds the graph from the current parameter values on each call
    and returns a scalar tensor. Analytic gradients come from one float64
    backward pass.
    """
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    zero_grad(params)

    originals = [p.data for p in params]
    dtype = EXTENDED if extended else np.float64
    for p in params:
        p.data = p.data.astype(dtype)

    def value():
        return f().data.reshape(-1)[0]

    worst = 0.0
    try:
        for p, a in zip(params, analytic):
            n = numeric_grad(value, p, h).astype(np.float64)
            denom = np.maximum(1e-8, np.abs(a) + np.abs(n))
            err = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
            if math.isnan(err):
                return math.inf
            worst = max(worst, err)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return worst
