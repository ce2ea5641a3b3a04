"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation that sees an input with ``requires_grad``
appends a node to the active :class:`Tape`.  Nodes are appended in
execution order, so the tape is already topologically sorted and
:func:`backward` is a single reverse sweep.

Storage is float32.  Inside :func:`check_mode` freshly created tensors are
float64; that mode exists for finite-difference checks only.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import rng
from .errors import (
    AxisError,
    BroadcastError,
    NoTapeError,
    OracleError,
    RankError,
    ShapeError,
)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: Tape = Tape()
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)


@dataclass
class Node:
    parents: tuple["Tensor", ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    A tape is consumed by :func:`backward`; tensors recorded before that
    point become detached.  Use it as a context manager to make it the
    active tape for the current thread.
    """

    nodes: list[Node] = field(default_factory=list)
    generation: int = 0

    def record(self, parents: tuple["Tensor", ...], fn: BackwardFn) -> tuple["Tape", int, int]:
        self.nodes.append(Node(parents, fn))
        return (self, self.generation, len(self.nodes) - 1)

    def consume(self) -> None:
        self.nodes.clear()
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._previous = _state.tape
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous
        del self._previous


_state = _State()


def active_tape() -> Tape:
    return _state.tape


def default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def check_mode():
    """Create new tensors in float64 for the duration of the block."""
    prev = _state.dtype
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.generic):
            data = np.asarray(data)
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _state.dtype
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: tuple[Tape, int, int] | None = None

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def tape_id(self) -> int | None:
        """Index of this tensor's node on the active tape, if it is live."""
        node = self._node
        if node is None:
            return None
        tape, gen, idx = node
        if tape is not _state.tape or gen != tape.generation:
            return None
        return idx

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axes=None, keepdims=False):
        return reduce(self, axes, "sum", keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce(self, axes, "mean", keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce(self, axes, "max", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    @property
    def T(self):
        return permute(self, tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2))


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _state.dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _state.tape.record(parents, fn)
    return out


# -- construction ------------------------------------------------------

def _check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    return shape


def tensor_new(
    shape: Sequence[int],
    init: str = "zeros",
    *,
    value: float | None = None,
    seed: rng.SeedLike | None = None,
    lo: float = 0.0,
    hi: float = 1.0,
    fan_in: int | None = None,
    requires_grad: bool = False,
    dtype=None,
) -> Tensor:
    """Allocate a tensor filled by one of the named initialisers.

    ``init`` is one of ``zeros``, ``ones``, ``constant`` (needs ``value``),
    ``uniform`` (needs ``seed``; draws in ``[lo, hi)``) and ``kaiming``
    (needs ``seed`` and ``fan_in``; uniform in ``±sqrt(6 / fan_in)``).
    """
    shape = _check_shape(shape)
    dtype = np.dtype(dtype or _state.dtype)
    if init == "zeros":
        data = np.zeros(shape, dtype)
    elif init == "ones":
        data = np.ones(shape, dtype)
    elif init == "constant":
        if value is None:
            raise ValueError("constant init needs a value")
        data = np.full(shape, value, dtype)
    elif init in ("uniform", "kaiming"):
        if seed is None:
            raise ValueError(f"{init} init needs a seed")
        if init == "kaiming":
            if not fan_in or fan_in < 1:
                raise ValueError("kaiming init needs a positive fan_in")
            bound = math.sqrt(6.0 / fan_in)
            lo, hi = -bound, bound
        u = rng.stream(seed).random(math.prod(shape))
        data = (lo + (hi - lo) * u).reshape(shape).astype(dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, **kw) -> Tensor:
    return tensor_new(shape, "zeros", **kw)


def ones(shape, **kw) -> Tensor:
    return tensor_new(shape, "ones", **kw)


# -- element-wise ------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise BroadcastError(f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # np.maximum keeps NaN so non-finite activations stay visible downstream
    mask = a.data > 0
    return _result(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1 - y),))


def ewise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch an element-wise op by name (``add``, ``sub``, ``mul``,
    ``relu``, ``sigmoid``, ``scale``).  For ``scale`` pass the factor as ``b``."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown element-wise op {kind!r}")


# -- contraction -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading axes must be equal, except that a rank-2 right operand is
    shared across the batch (the linear-layer case).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), back)


# -- reductions --------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(t: Tensor, axes=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes``; reduced axes are dropped unless
    ``keepdims``.  Max routes its gradient to the first maximal element
    (lowest flat index within each reduced slice)."""
    axes = _norm_axes(axes, t.ndim)
    in_shape = t.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
    count = math.prod(in_shape[i] for i in axes) if axes else 1

    if kind == "sum":
        y = t.data.sum(axis=axes, keepdims=keepdims)
        return _result(y, (t,), lambda g: (np.broadcast_to(g.reshape(kept), in_shape).copy(),))
    if kind == "mean":
        y = t.data.sum(axis=axes, keepdims=keepdims) / t.dtype.type(count)
        return _result(
            y.astype(t.dtype),
            (t,),
            lambda g: (np.broadcast_to(g.reshape(kept) / count, in_shape).astype(t.dtype),),
        )
    if kind == "max":
        rest = tuple(i for i in range(t.ndim) if i not in axes)
        moved = np.transpose(t.data, rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            y = y.reshape(kept)
        inv = np.argsort(rest + axes)

        def back(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            return (np.transpose(gflat.reshape(moved.shape), inv),)

        return _result(y, (t,), back)
    raise ValueError(f"unknown reduction {kind!r}")


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    (axis,) = _norm_axes(axis, t.ndim)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (t,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    (axis,) = _norm_axes(axis, t.ndim)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(y)
    return _result(y, (t,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# -- shape ops ---------------------------------------------------------

def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = t.shape
    try:
        y = t.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {in_shape} to {tuple(shape)}") from None
    return _result(y, (t,), lambda g: (g.reshape(in_shape),))


def permute(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(t.ndim)):
        raise AxisError(f"{axes} is not a permutation of rank {t.ndim}")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    (axis,) = _norm_axes(axis, tensors[0].ndim)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def pad(t: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; ``widths`` holds one ``(before, after)`` pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != t.ndim:
        raise ShapeError("pad needs one (before, after) pair per axis")
    sl = tuple(slice(a, a + s) for (a, _), s in zip(widths, t.shape))
    return _result(np.pad(t.data, widths), (t,), lambda g: (g[sl],))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- differentiation ---------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf
    that requires grad, then consume the active tape."""
    if loss.ndim != 0:
        raise RankError(f"backward needs a rank-0 loss, got shape {loss.shape}")
    start = loss.tape_id
    if start is None:
        raise NoTapeError("loss is not recorded on the active tape")
    tape = _state.tape
    pending: dict[int, np.ndarray] = {start: np.ones_like(loss.data)}
    for i in range(start, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = parent.tape_id
            if pid is not None:
                pending[pid] = pending[pid] + pg if pid in pending else pg
            elif parent._node is None:
                pg = np.asarray(pg, dtype=parent.dtype)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    tape.consume()


def numeric_grad(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``f`` at the flat ``indices`` of ``x``
    (all of them by default).  Raises OracleError when ``f`` is not
    deterministic."""
    with no_grad():
        base1 = float(f(x).data)
        base2 = float(f(x).data)
    if base1 != base2 and not (math.isnan(base1) and math.isnan(base2)):
        raise OracleError(f"f is not deterministic: {base1!r} != {base2!r}")
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    num = np.empty(len(idx))
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(flat[i])
            hi = float(f(x).data)
            flat[i] = orig - eps
            down = float(flat[i])
            lo = float(f(x).data)
            flat[i] = orig
            # divide by the step actually stored, not the nominal 2*eps
            num[j] = (hi - lo) / (up - down)
    return num


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    """Flat autodiff gradient of scalar ``f`` with respect to leaf ``x``."""
    if not x.requires_grad:
        raise ValueError("gradient checks need a tensor with requires_grad=True")
    with Tape():
        x.grad = None
        backward(f(x))
    return (np.zeros_like(x.data) if x.grad is None else x.grad).reshape(-1)


def relative_error(analytic, numeric) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, or the plain maximum absolute
    error when both vectors vanish."""
    ana = np.asarray(analytic, dtype=np.float64)
    num = np.asarray(numeric, dtype=np.float64)
    err = np.abs(ana - num).max(initial=0.0)
    denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0))
    return float(err if denom == 0 else err / denom)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    *,
    indices: Sequence[int] | None = None,
) -> float:
    """Compare autodiff gradients of scalar ``f`` at ``x`` with central
    differences; returns :func:`relative_error` over the checked flat
    indices.  ``x`` must be a leaf that requires grad; other leaves touched
    by ``f`` also receive gradients, which callers may reuse.
    """
    analytic = analytic_grad(f, x)
    idx = range(x.size) if indices is None else indices
    numeric = numeric_grad(f, x, eps, idx)
    return relative_error(analytic[list(idx)], numeric)
