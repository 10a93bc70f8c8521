"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation creates a :class:`Node` holding the parent
tensors and a backward closure. Nodes receive strictly increasing indices
at creation, so the recorded graph is a DAG by construction and
:meth:`Tensor.backward` can replay it in reverse insertion order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_node_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One tape entry: parents, backward rule and its saved context."""

    __slots__ = ("index", "op", "parents", "backward_fn")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward_fn: Callable):
        self.index = next(_node_counter)
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.index}, {self.op})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and (not isinstance(data, (np.ndarray, np.generic)) or arr.dtype not in (np.float32, np.float64)):
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Gradients add to any existing ``.grad``; call :meth:`zero_grad`
        between steps to reset them.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {list(self.shape)}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if self.node is None:
            if self.requires_grad:
                self._accumulate(grad)
            return

        nodes = {}
        stack = [self.node]
        while stack:
            node = stack.pop()
            if node.index in nodes:
                continue
            nodes[node.index] = node
            for p in node.parents:
                if p is not None and p.node is not None and p.node.index not in nodes:
                    stack.append(p.node)

        pending = {self.node.index: grad}
        for idx in sorted(nodes, reverse=True):
            node = nodes[idx]
            g = pending.pop(idx, None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if p is None or pg is None or not p.requires_grad:
                    continue
                if p.node is not None:
                    key = p.node.index
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
                else:
                    p._accumulate(pg)

    def _accumulate(self, g) -> None:
        g = np.asarray(g, dtype=self.dtype)
        if g.shape != self.shape:
            g = g.reshape(self.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __pow__(self, other):
        return power(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def make_result(data, parents: Sequence, backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output and record it on the tape if needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p is not None and p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of trailing-axes broadcasting)."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {list(a.shape)} and {list(b.shape)}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_check(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_check(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)

        def backward_scalar(g):
            return (g * s,)

        return make_result(a.data * s, (a,), backward_scalar, "mul")
    _broadcast_check(a, b, "mul")

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_check(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def power(a, p) -> Tensor:
    a = _as_tensor(a)
    if isinstance(p, Tensor):
        _broadcast_check(a, p, "pow")
        out = a.data ** p.data

        def backward(g):
            ga = unbroadcast(g * p.data * a.data ** (p.data - 1), a.shape) if a.requires_grad else None
            gp = None
            if p.requires_grad:
                gp = unbroadcast(g * out * np.log(a.data), p.shape)
            return ga, gp

        return make_result(out, (a, p), backward, "pow")
    p = float(p)
    out = a.data ** p

    def backward_scalar(g):
        return (g * p * a.data ** (p - 1),)

    return make_result(out, (a,), backward_scalar, "pow")


def elementwise(op_kind: str, a, b) -> Tensor:
    """Dispatch ``add``/``sub``/``mul``/``div``/``pow`` by name."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": power}
    if op_kind not in ops:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return ops[op_kind](a, b)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def abs_(x: Tensor) -> Tensor:
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {list(a.shape)} @ {list(b.shape)} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims differ: {list(a.shape)} @ {list(b.shape)}") from None
    out = a.data @ b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g.reshape(tuple(n for i, n in enumerate(shape) if i not in axes)), axes)
    return g


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        return (np.broadcast_to(_expand(g, x.shape, axes, keepdims), x.shape),)

    return make_result(out, (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[i] for i in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        return (np.broadcast_to(_expand(g, x.shape, axes, keepdims) / count, x.shape),)

    return make_result(out, (x,), backward, "mean")


def reduce_max(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Maximum; the gradient goes to the first maximal element only."""
    axes = _norm_axes(axis, x.ndim)
    keep = [i for i in range(x.ndim) if i not in axes]
    moved = np.transpose(x.data, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)

    def backward(g):
        g = g.reshape(arg.shape)
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        inv = np.argsort(keep + list(axes))
        return (np.transpose(gflat.reshape(moved.shape), inv),)

    return make_result(out, (x,), backward, "max")


def reduce(op_kind: str, x: Tensor, axes=None, keepdims=False) -> Tensor:
    ops = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if op_kind not in ops:
        raise ValueError(f"unknown reduction {op_kind!r}")
    return ops[op_kind](x, axes, keepdims)


# ---------------------------------------------------------------------------
# rearrangement
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = int(np.prod([s for s in shape if s != -1]))
    if shape.count(-1) > 1 or (-1 not in shape and known != x.size) or (
        -1 in shape and (known == 0 or x.size % known)
    ):
        raise ShapeError(f"cannot reshape {list(x.shape)} ({x.size} elements) to {list(shape)}")
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {list(axes)} for rank {x.ndim}")
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[list(t.shape) for t in tensors]} disagree"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def getitem(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; backward scatters with accumulation."""
    if isinstance(key, Tensor):
        key = key.data
    out = x.data[key]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return make_result(out, (x,), backward, "getitem")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis % x.ndim] = slice(start, stop)
    key = tuple(idx)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return make_result(x.data[key], (x,), backward, "slice")


def pad(x: Tensor, widths) -> Tensor:
    """Zero-pad with ``widths`` = one ``(before, after)`` pair per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != x.ndim or any(v < 0 for w in widths for v in w):
        raise ShapeError(f"pad widths {widths} invalid for shape {list(x.shape)}")
    key = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return make_result(np.pad(x.data, widths), (x,), lambda g: (g[key],), "pad")


def crop(x: Tensor, widths) -> Tensor:
    """Inverse of :func:`pad`: drop ``(before, after)`` entries per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != x.ndim or any(b + a >= n for (b, a), n in zip(widths, x.shape)):
        raise ShapeError(f"crop widths {widths} invalid for shape {list(x.shape)}")
    key = tuple(slice(b, n - a) for (b, a), n in zip(widths, x.shape))
    return make_result(x.data[key], (x,), lambda g: (np.pad(g, widths),), "crop")


def take_along_axis(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather ``x`` along ``axis``; ``indices`` broadcast like numpy's."""
    indices = np.asarray(indices)
    out = np.take_along_axis(x.data, indices, axis=axis)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        full = np.broadcast_to(indices, g.shape)
        grid = list(np.indices(g.shape, sparse=True))
        grid[axis % x.ndim] = full
        np.add.at(gx, tuple(grid), g)
        return (gx,)

    return make_result(out, (x,), backward, "take_along_axis")
