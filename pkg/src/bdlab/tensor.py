"""Small dense float64 tensor with tape-based reverse-mode differentiation.

Values live in numpy arrays; the tape is the graph of ``Tensor`` nodes built
while ops run.  Only first-order gradients are supported.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class SingularMatrixError(ArithmeticError):
    def __init__(self, condition: float):
        super().__init__(f"matrix is singular or ill-conditioned (cond ~ {condition:.3e})")
        self.condition = condition


class ContractError(ValueError):
    """A documented precondition was violated."""


_grad_enabled = True
_op_log: list[str] | None = None

MAX_CONDITION = 1e12


@contextlib.contextmanager
def no_grad():
    """Run ops without recording parents on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_ops():
    """Collect the kind of every op executed inside the block.

    >>> with record_ops() as ops:
    ...     _ = Tensor([1.0]) + Tensor([2.0])
    >>> ops
    ['add']
    """
    global _op_log
    prev = _op_log
    log: list[str] = []
    _op_log = log
    try:
        yield log
    finally:
        _op_log = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node on the tape: forward value, parents and a local backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _op_log is not None:
        _op_log.append(op)
    out = Tensor(value, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.data / b.data
    return _make(
        "div",
        value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * value / b.data, b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make("square", a.data**2, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    value = np.sqrt(a.data)
    return _make("sqrt", value, (a,), lambda g: (0.5 * g / value,))


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)
    return _make("exp", value, (a,), lambda g: (g * value,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)
    return _make("tanh", value, (a,), lambda g: (g * (1.0 - value**2),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make("silu", a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    value = np.logaddexp(0.0, x)
    return _make("softplus", value, (a,), lambda g: (g * _sigmoid(x),))


# ---------------------------------------------------------------- reductions / shape


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", value, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    value = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(value.size, 1) if axis is not None else a.data.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make("mean", value, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got shape {a.shape}")
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with accumulation."""
    if isinstance(index, list):
        index = np.asarray(index)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make("take", a.data[index], (a,), backward)


def take_rows(a: Tensor, index) -> Tensor:
    """Row gather (embedding lookup)."""
    index = np.asarray(index)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make("take_rows", a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def block_diag(blocks: Sequence[Tensor]) -> Tensor:
    blocks = [as_tensor(b) for b in blocks]
    sizes = [b.shape[0] for b in blocks]
    n = sum(sizes)
    value = np.zeros((n, n))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for b, lo, hi in zip(blocks, offsets[:-1], offsets[1:]):
        value[lo:hi, lo:hi] = b.data
    return _make(
        "block_diag",
        value,
        tuple(blocks),
        lambda g: tuple(g[lo:hi, lo:hi] for lo, hi in zip(offsets[:-1], offsets[1:])),
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return _make(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def condition_number(a: np.ndarray) -> float:
    """1-norm condition estimate ``||A||_1 ||A^-1||_1`` from an LU solve."""
    import scipy.linalg

    try:
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    except (ValueError, np.linalg.LinAlgError):
        return np.inf
    if np.any(np.diag(lu) == 0):
        return np.inf
    inv = scipy.linalg.lu_solve((lu, piv), np.eye(a.shape[0]))
    return float(np.abs(a).sum(axis=0).max() * np.abs(inv).sum(axis=0).max())


def inverse_array(a: np.ndarray) -> np.ndarray:
    import scipy.linalg
    import warnings

    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"inverse needs a square matrix, got {a.shape}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        try:
            lu, piv = scipy.linalg.lu_factor(a)
        except (ValueError, np.linalg.LinAlgError):
            raise SingularMatrixError(np.inf) from None
        if np.any(np.diag(lu) == 0):
            raise SingularMatrixError(np.inf)
        inv = scipy.linalg.lu_solve((lu, piv), np.eye(a.shape[0]))
    cond = float(np.abs(a).sum(axis=0).max() * np.abs(inv).sum(axis=0).max())
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularMatrixError(cond)
    return inv


def mat_inverse(a: Tensor) -> Tensor:
    """Matrix inverse via partially pivoted LU.

    Raises ``SingularMatrixError`` when the 1-norm condition estimate exceeds
    ``MAX_CONDITION``.
    """
    a = as_tensor(a)
    inv = inverse_array(a.data)
    return _make("inverse", inv, (a,), lambda g: (-inv.T @ g @ inv.T,))


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n))


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from ``id(leaf)`` to its gradient.  Leaves that were already
    holding a gradient are overwritten, not accumulated.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
                leaves[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``params``; unreachable leaves get zeros."""
    params = list(params)
    leaves = backward(loss)
    return [leaves.get(id(p), np.zeros_like(p.data)) for p in params]
