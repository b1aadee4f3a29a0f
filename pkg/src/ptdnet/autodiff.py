"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D :class:`Tensor`. Operations executed while a
:class:`Tape` is active are appended to it in execution order; calling
:meth:`Tape.backward` walks the record in exact reverse order and
accumulates adjoints into the leaves.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(w * w)
    >>> tape.backward(loss, [w])[0]
    array([[2., 4.]])

There is no broadcasting. Row/column scaling, bias addition and the graph
specific gathers/scatters are explicit primitives instead.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericalError

__all__ = [
    "Tensor", "Tape", "backward", "constant", "elementwise",
    "matmul", "add", "sub", "mul", "div", "neg", "scale", "shift",
    "sigmoid", "relu", "log", "exp", "sqrt", "power", "absolute", "clip01",
    "transpose", "total", "row_sum", "scale_rows", "scale_cols", "add_row",
    "gather_rows", "concat_cols", "scatter_symmetric", "div_scalar",
    "softmax_xent", "bce_logits", "rowwise_dot", "sigmoid_np",
]

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense real matrix, optionally a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        if other.shape == (1, 1) and self.shape != (1, 1):
            return div_scalar(self, other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def constant(data) -> Tensor:
    """Wrap an array as a non-differentiable tensor."""
    return Tensor(data)


class _Node:
    # only the id of the output is kept so that tensor -> node -> tensor never forms a cycle
    __slots__ = ("out_id", "inputs", "vjp", "kind")

    def __init__(self, out, inputs, vjp, kind):
        self.out_id = id(out)
        self.inputs = inputs
        self.vjp = vjp
        self.kind = kind


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        """Adjoints of ``loss`` with respect to leaves.

        With ``wrt`` given, returns a list of arrays aligned with it (zeros for
        leaves the loss does not depend on). Otherwise returns a dict mapping
        every differentiable leaf seen on the tape to its gradient.
        """
        if loss.shape != (1, 1):
            raise ContractError(f"loss must be 1x1, got {loss.shape}")
        adj: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad:
            adj[id(loss)] = np.ones((1, 1))
        for node in reversed(self.nodes):
            g = adj.pop(node.out_id, None)
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._node is None:
                    leaves[key] = inp
                prev = adj.get(key)
                adj[key] = gi if prev is None else prev + gi
        if wrt is not None:
            return [adj[id(t)] if id(t) in adj else np.zeros(t.shape) for t in wrt]
        out = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp._node is None:
                    out[inp] = adj.get(id(inp), np.zeros(inp.shape))
        return out


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None):
    return tape.backward(loss, wrt)


def _record(kind: str, out_arr: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    total_ = out_arr.sum()
    if not math.isfinite(total_):
        raise NumericalError(f"{kind}: non-finite value in output")
    out = Tensor._wrap(out_arr)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _active_tape()
        if tape is not None:
            node = _Node(out, inputs, vjp, kind)
            out._node = node
            tape.nodes.append(node)
    return out


def _same_shape(kind: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _record("matmul", A @ B, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


# --------------------------------------------------------------------------
# binary elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _record("mul", A * B, (a, b),
                   lambda g: (g * B if a.requires_grad else None,
                              g * A if b.requires_grad else None))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    A, B = a.data, b.data
    if np.any(B == 0):
        raise DomainError("div: zero divisor")
    out = A / B
    return _record("div", out, (a, b),
                   lambda g: (g / B if a.requires_grad else None,
                              -g * out / B if b.requires_grad else None))


def div_scalar(a: Tensor, s: Tensor) -> Tensor:
    """``a / s`` for a 1x1 tensor ``s``."""
    if s.shape != (1, 1):
        raise DimensionError(f"div_scalar: divisor must be 1x1, got {s.shape}")
    d = s.data[0, 0]
    if d == 0:
        raise DomainError("div_scalar: zero divisor")
    out = a.data / d
    return _record("div_scalar", out, (a, s),
                   lambda g: (g / d if a.requires_grad else None,
                              np.array([[-(g * out).sum() / d]]) if s.requires_grad else None))


# --------------------------------------------------------------------------
# unary elementwise

def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    """Add a scalar constant."""
    return _record("shift", a.data + float(c), (a,), lambda g: (g,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)
    return _record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    A = a.data
    if np.any(A <= 0):
        raise DomainError("log: input must be strictly positive")
    return _record("log", np.log(A), (a,), lambda g: (g / A,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow")
    return _record("exp", out, (a,), lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    A = a.data
    if np.any(A < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(A)
    # subgradient 0 at the origin
    inv = np.divide(0.5, out, out=np.zeros_like(out), where=out > 0)
    return _record("sqrt", out, (a,), lambda g: (g * inv,))


def power(a: Tensor, p: float) -> Tensor:
    A = a.data
    if p < 1 and np.any(A <= 0):
        raise DomainError(f"power: base must be positive for exponent {p}")
    out = A ** p
    return _record("power", out, (a,), lambda g: (g * p * A ** (p - 1),))


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def clip01(a: Tensor) -> Tensor:
    """``min(1, max(a, 0))``; gradient 1 strictly inside (0, 1), 0 elsewhere."""
    A = a.data
    inside = (A > 0) & (A < 1)
    return _record("clip01", np.clip(A, 0.0, 1.0), (a,), lambda g: (g * inside,))


_UNARY = {"sigmoid": sigmoid, "relu": relu, "log": log, "exp": exp, "neg": neg,
          "sqrt": sqrt, "abs": absolute, "clip01": clip01}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch a pointwise operation by name.

    ``scale`` takes a float as its second argument; binary kinds take a tensor
    of the same shape.
    """
    if kind == "scale":
        return scale(a, b)
    if kind in _UNARY:
        if b is not None:
            raise ContractError(f"{kind} is unary")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if not isinstance(b, Tensor):
            raise ContractError(f"{kind} needs a second tensor")
        return _BINARY[kind](a, b)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# reductions and structured broadcasts

def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("total", np.array([[a.data.sum()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0]),))


def row_sum(a: Tensor) -> Tensor:
    cols = a.cols
    return _record("row_sum", a.data.sum(axis=1, keepdims=True), (a,),
                   lambda g: (np.repeat(g, cols, axis=1),))


def scale_rows(a: Tensor, v: Tensor) -> Tensor:
    """``diag(v) @ a`` with ``v`` of shape (rows, 1)."""
    if v.shape != (a.rows, 1):
        raise DimensionError(f"scale_rows: {a.shape} by {v.shape}")
    A, V = a.data, v.data
    return _record("scale_rows", A * V, (a, v),
                   lambda g: (g * V if a.requires_grad else None,
                              (g * A).sum(axis=1, keepdims=True) if v.requires_grad else None))


def scale_cols(a: Tensor, v: Tensor) -> Tensor:
    """``a @ diag(v)`` with ``v`` of shape (cols, 1)."""
    if v.shape != (a.cols, 1):
        raise DimensionError(f"scale_cols: {a.shape} by {v.shape}")
    A, V = a.data, v.data.T
    return _record("scale_cols", A * V, (a, v),
                   lambda g: (g * V if a.requires_grad else None,
                              (g * A).sum(axis=0)[:, None] if v.requires_grad else None))


def add_row(a: Tensor, b: Tensor) -> Tensor:
    """Add the row vector ``b`` (1, cols) to every row of ``a``."""
    if b.shape != (1, a.cols):
        raise DimensionError(f"add_row: {a.shape} + {b.shape}")
    return _record("add_row", a.data + b.data, (a, b),
                   lambda g: (g, g.sum(axis=0, keepdims=True)))


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise DimensionError(f"gather_rows: index out of range for {a.rows} rows")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("gather_rows", a.data[idx], (a,), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [p.cols for p in parts])
    return _record("concat_cols", np.concatenate([p.data for p in parts], axis=1), parts,
                   lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def scatter_symmetric(values: Tensor, rows, cols, n: int, diag: float = 0.0) -> Tensor:
    """Place per-edge values (E, 1) at (u, v) and (v, u) of an n x n matrix.

    The diagonal is filled with the constant ``diag``. Pairs must be distinct,
    off-diagonal and given once per undirected edge.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if values.shape != (rows.size, 1) or cols.size != rows.size:
        raise DimensionError(f"scatter_symmetric: {values.shape} values for {rows.size} pairs")
    out = np.zeros((n, n))
    if diag:
        np.fill_diagonal(out, diag)
    vals = values.data[:, 0]
    out[rows, cols] = vals
    out[cols, rows] = vals
    return _record("scatter_symmetric", out, (values,),
                   lambda g: ((g[rows, cols] + g[cols, rows])[:, None],))


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products, shape (rows, 1)."""
    _same_shape("rowwise_dot", a, b)
    A, B = a.data, b.data
    return _record("rowwise_dot", np.einsum("ij,ij->i", A, B)[:, None], (a, b),
                   lambda g: (g * B if a.requires_grad else None,
                              g * A if b.requires_grad else None))


# --------------------------------------------------------------------------
# losses

def softmax_xent(logits: Tensor, labels, idx) -> Tensor:
    """Mean softmax cross-entropy over the rows ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("softmax_xent: empty node set")
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data[idx]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    y = labels[idx]
    loss = -logp[np.arange(idx.size), y].mean()
    shape = logits.shape

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(idx.size), y] -= 1.0
        out = np.zeros(shape)
        np.add.at(out, idx, p * (g[0, 0] / idx.size))
        return (out,)

    return _record("softmax_xent", np.array([[loss]]), (logits,), vjp)


def bce_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw scores (P, 1) against 0/1 targets."""
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if t.shape != logits.shape:
        raise DimensionError(f"bce_logits: {logits.shape} vs targets {t.shape}")
    if t.size == 0:
        raise ContractError("bce_logits: empty batch")
    x = logits.data
    # log(1 + e^x) - t x, stable form
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()
    p = sigmoid_np(x)
    return _record("bce_logits", np.array([[loss]]), (logits,),
                   lambda g: ((p - t) * (g[0, 0] / t.size),))


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf]
