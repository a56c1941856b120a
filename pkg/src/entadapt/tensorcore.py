"""Dense float64 tensors with reverse-mode gradient accumulation.

Every differentiable operation records its inputs and a backward closure on
the output tensor.  Nodes carry a creation counter, so sorting the reachable
graph by that counter in descending order replays the operations in reverse
execution order, each exactly once.

Shapes are explicit: elementwise binary ops need identical shapes, and the
only broadcasting is the row-wise affine of :func:`add_bias`.  Constant
(non-differentiable) numpy operands such as attention masks may broadcast.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_counter = itertools.count()
_local = threading.local()

# op name -> factor applied to that op's input gradients; test hook only
_GRAD_CORRUPTION: dict[str, float] = {}


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run a block without recording operations."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextlib.contextmanager
def corrupt_gradient(op: str, factor: float = 1.5):
    """Scale the backward output of ``op`` (negative control for gradient checks)."""
    _GRAD_CORRUPTION[op] = factor
    try:
        yield
    finally:
        _GRAD_CORRUPTION.pop(op, None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_counter)
        self.requires_grad = False
        self.grad = None
        if requires_grad:
            self.requires_grad_(True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if not self.is_leaf:
            raise ContractError("requires_grad can only be toggled on leaf tensors")
        self.requires_grad = bool(flag)
        if flag and self.grad is None:
            self.grad = np.zeros_like(self.data)
        elif not flag:
            self.grad = None
        return self

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_scalar():
    raise ContractError("item() needs a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(out: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.op = op
    t._id = next(_counter)
    t.grad = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def tape(loss: Tensor) -> list[Tensor]:
    """Recorded op nodes reachable from ``loss``, in reverse execution order."""
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return [n for _, n in sorted(seen.items(), key=lambda kv: -kv[0])]


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every trainable ancestor."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any trainable tensor")
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in tape(loss):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf:
            _check_finite(g, "backward")
            node.grad += g
            continue
        in_grads = node._backward(g)
        factor = _GRAD_CORRUPTION.get(node.op)
        for parent, pg in zip(node._parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if factor is not None:
                pg = pg * factor
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def add_const(a: Tensor, c) -> Tensor:
    """``a + c`` for a constant array ``c`` broadcastable to ``a``."""
    c = np.asarray(c, dtype=np.float64)
    out = a.data + c
    if out.shape != a.shape:
        raise DimensionError(f"add_const: constant {c.shape} does not fit {a.shape}")
    return _make(out, "add_const", (a,), lambda g: (g,))


def mul_const(a: Tensor, c) -> Tensor:
    """``a * c`` for a constant array ``c`` broadcastable to ``a``."""
    c = np.asarray(c, dtype=np.float64)
    out = a.data * c
    if out.shape != a.shape:
        raise DimensionError(f"mul_const: constant {c.shape} does not fit {a.shape}")
    return _make(out, "mul_const", (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(y, "gelu", (a,), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine shift.

    ``b`` is either ``[d]`` (shared by all rows) or ``[B, d]`` for ``x`` of
    shape ``[B, ..., d]`` (one shift per leading item).
    """
    d = x.shape[-1]
    if b.shape == (d,):
        axes = tuple(range(x.ndim - 1))
        out = x.data + b.data
        return _make(out, "add_bias", (x, b), lambda g: (g, g.sum(axis=axes)))
    if x.ndim >= 2 and b.shape == (x.shape[0], d):
        mid = (slice(None),) + (None,) * (x.ndim - 2) + (slice(None),)
        axes = tuple(range(1, x.ndim - 1))
        out = x.data + b.data[mid]
        return _make(out, "add_bias", (x, b), lambda g: (g, g.sum(axis=axes)))
    raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a [..., k] @ b [k, n] -> [..., n]``."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    k, n = bd.shape

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product ``[..., m, k] @ [..., k, n]`` with identical leading dims."""
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, "bmm", (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {src} -> {tuple(shape)}") from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------- normalisations


def softmax(x: Tensor, mask=None) -> Tensor:
    """Max-subtracted softmax over the last axis.

    ``mask`` is an optional constant added to ``x`` first (large negative
    entries knock positions out).
    """
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax needs a nonempty last axis")
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("log_softmax needs a nonempty last axis")
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    y = x.data - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, "log_softmax", (x,), bw)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("logsumexp needs a nonempty last axis")
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    p = np.exp(x.data - lse)
    return _make(lse[..., 0], "logsumexp", (x,), lambda g: (g[..., None] * p,))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layernorm needs at least two features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    axes = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, "layernorm", (x, gain, bias), bw)


# --------------------------------------------------------------- reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    src = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % x.ndim
    out = x.data.sum(axis=ax)
    return _make(out, "sum", (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),))


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


# ------------------------------------------------------------------ indexing


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` (embedding lookup, row repeat)."""
    index = np.asarray(index, dtype=np.intp)
    src = x.shape
    ax = axis % x.ndim
    if index.size and (index.min() < 0 or index.max() >= src[ax]):
        raise ContractError(f"take: index out of range for axis of size {src[ax]}")

    def bw(g):
        gx = np.zeros(src)
        moved_g = np.moveaxis(g, list(range(ax, ax + index.ndim)), list(range(index.ndim)))
        np.add.at(np.moveaxis(gx, ax, 0), index, moved_g)
        return (gx,)

    return _make(np.take(x.data, index, axis=ax), "take", (x,), bw)


def pick(x: Tensor, index) -> Tensor:
    """``out[...] = x[..., index[...]]``: select one entry of the last axis per row."""
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape[:-1]:
        raise DimensionError(f"pick: index {index.shape} does not match rows of {x.shape}")
    src = x.shape
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(src)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(out, "pick", (x,), bw)


def stack(tensors: Iterable[Tensor]) -> Tensor:
    """Stack equally-shaped tensors along a new leading axis."""
    ts = list(tensors)
    if not ts:
        raise DimensionError("stack of nothing")
    shape = ts[0].shape
    for t in ts:
        _same_shape(ts[0], t, "stack")
    out = np.stack([t.data for t in ts])
    return _make(out, "stack", ts, lambda g: tuple(g[i] for i in range(len(ts))))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise DimensionError("concat of nothing")
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    splits = np.cumsum(sizes)[:-1]
    return _make(out, "concat", ts, lambda g: tuple(np.split(g, splits, axis=ax)))
