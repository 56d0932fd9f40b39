"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its inputs and a local backward rule on the output tensor.
``backward`` walks the reachable nodes in reverse creation order, so the
traversal is deterministic and each node is visited exactly once.

Calling ``backward`` twice on the same loss raises :class:`GraphError`: the
graph is released after the first pass.

Broadcasting is restricted to a trailing 1-D operand whose length equals the
last axis of the other operand (bias add, gain multiply) and to Python
scalars.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, GraphError, ParameterError

_counter = itertools.count()
_grad_enabled = True
# gradients of intermediate nodes during an active backward() pass
_buffer: dict[int, np.ndarray] | None = None

# additive mask value; exp() of it underflows to exactly 0.0
NEG_INF = -1e30


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_counter)
        self._consumed = False

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_counter)
    out._consumed = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._backward is not None and _buffer is not None:
        prev = _buffer.get(id(t))
        _buffer[id(t)] = g.reshape(t.shape) if prev is None else prev + g.reshape(t.shape)
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g.reshape(t.shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise --------------------------------------------------------------

def _broadcast_kind(a: Tensor, b: Tensor, opname: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "bias_b"
    if a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return "bias_a"
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)

        def bw(g):
            _accum(a, g)

        return _result(a.data + c, (a,), bw)
    _broadcast_kind(a, b, "add")
    out = a.data + b.data

    def bw(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(g, b.shape))

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _result(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)

        def bw(g):
            _accum(a, g * c)

        return _result(a.data * c, (a,), bw)
    _broadcast_kind(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.shape))

    return _result(out, (a, b), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _result(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DegenerateInputError("log of non-positive value")

    def bw(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, 2.0 * a.data * g)

    return _result(a.data * a.data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _result(out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(a, g * d)

    return _result(out, (a,), bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = NEG_INF) -> Tensor:
    """Replace entries where the constant boolean ``mask`` is true."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, value, a.data)

    def bw(g):
        _accum(a, np.where(mask, 0.0, g))

    return _result(out, (a,), bw)


# -- reductions and shape ops ---------------------------------------------------

def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape))

    return _result(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _result(out, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs ndim >= 2, got shape {a.shape}")
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bw(g):
        _accum(a, g.transpose(inv))

    return _result(out, (a,), bw)


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing with scatter-add backward."""
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=np.float64)
    else:
        out = out.copy()

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accum(a, full)

    return _result(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _result(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``[..., m, k] @ [k, n]`` (shared weight) and batched
    ``[..., m, k] @ [..., k, n]`` with identical leading dimensions.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        out = a.data @ b.data

        def bw(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                k, n = b.shape
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))

        return _result(out, (a, b), bw)
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(out, (a, b), bw)


# -- normalisation and probability ------------------------------------------------

def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        _accum(a, g - p * g.sum(axis=axis, keepdims=True))

    return _result(out, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)

    return _result(out, (x, gain, bias), bw)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale each slice along ``axis`` to unit Euclidean norm."""
    axis = _check_axis(x, axis)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalise a zero vector")
    out = x.data / norm

    def bw(g):
        _accum(x, (g - out * (g * out).sum(axis=axis, keepdims=True)) / norm)

    return _result(out, (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _result(out, (table,), bw)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean over rows of -log softmax(logits)[target].

    ``weights`` optionally gives a per-row weight; the result is then the
    weighted sum divided by the weight total.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n, c] logits, got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"cross_entropy: {targets.shape[0]} targets for {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"cross_entropy target out of range [0, {c})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = float(-(w * logp[rows, targets]).sum())

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        _accum(logits, float(g) * w[:, None] * p)

    return _result(np.asarray(max(loss, 0.0)), (logits,), bw)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors (last axis)."""
    u = _as_tensor(u)
    v = _as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_similarity: shapes {u.shape} and {v.shape} differ")
    return sum(mul(l2_normalize(u), l2_normalize(v)), axis=-1)


# -- backward -----------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate; clear them with ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        loss._consumed = True
        return

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack_.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    global _buffer
    _buffer = {id(loss): np.ones_like(loss.data)}
    try:
        for t in nodes:
            g = _buffer.pop(id(t), None)
            if g is not None and t._backward is not None:
                t._backward(g)
            t._backward = None
            t._parents = ()
    finally:
        _buffer = None
    loss._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def numerical_gradient(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` with respect to every entry of ``param``."""
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(param.shape)


def gradient_check(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Return the max relative error between backward() and central differences.

    Per-entry error is ``|a - n| / max(|a|, |n|, floor)`` where ``floor`` is
    1e-3 of the largest gradient magnitude, so entries that are numerically
    zero do not dominate.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            return float(loss_fn().data)

    numeric = [numerical_gradient(value, p, h) for p in params]
    scale = max(
        max(float(np.abs(a).max()) for a in analytic),
        max(float(np.abs(n).max()) for n in numeric),
    )
    floor = max(1e-3 * scale, 1e-12)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(err.max()))
    return worst
