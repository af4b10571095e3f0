"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a :class:`Node` to the active
:class:`Graph`.  Nodes are stored in insertion order, which is already a
topological order, so :func:`backward` simply walks the list in reverse.
A graph is consumed by its backward pass; touching it afterwards raises
:class:`~akd.errors.LifecycleError`.

Values are stored at the default dtype (``float32`` unless changed with
:func:`default_dtype`); reductions and softmax statistics accumulate in
``float64``.  Any NaN or Inf produced by a forward op is a hard error.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from akd.errors import (
    ContractError,
    DimensionError,
    FreezeViolationError,
    LifecycleError,
    NumericalError,
)

__all__ = [
    "Graph",
    "Node",
    "Tensor",
    "backward",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "log",
    "exp",
    "clamp_min",
    "sum",
    "mean",
    "reshape",
    "permute",
    "transpose",
    "take",
    "concat",
]


class _State(threading.local):
    def __init__(self) -> None:
        self.graph: Graph | None = None
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)


_state = _State()


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are stored at."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def get_default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them in any graph."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Node:
    __slots__ = ("graph", "index", "op", "parents", "backward_fn")

    def __init__(self, graph: "Graph", op: str, parents: tuple, backward_fn: Callable):
        self.graph = graph
        self.index = len(graph.nodes)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Graph:
    """Append-only record of the ops of one forward pass.

    Can be used as a context manager to make it the active graph.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False
        # indices of nodes visited by the backward pass, in visit order
        self.visited: list[int] = []
        self._prev: Graph | None = None

    def __enter__(self) -> "Graph":
        self._prev = _state.graph
        _state.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _state.graph = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


def _active_graph() -> Graph:
    g = _state.graph
    if g is None or g.consumed:
        g = Graph()
        _state.graph = g
    return g


def _check_finite(data: np.ndarray, op: str) -> None:
    # one summation pass; only a non-finite total needs the exact elementwise test
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(data, axis=None)
    if np.isfinite(total):
        return
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite value produced by {op}")


class Tensor:
    """A dense array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "_requires_grad", "node", "frozen", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _state.dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.frozen = False
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t._requires_grad = False
        t.node = None
        t.frozen = False
        t.name = None
        return t

    # -- properties ----------------------------------------------------
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
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        if value and self.frozen:
            raise FreezeViolationError(f"tensor {self.name or '<unnamed>'} is frozen")
        self._requires_grad = bool(value)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def freeze(self) -> "Tensor":
        self._requires_grad = False
        self.frozen = True
        self.grad = None
        return self

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.frozen:
            raise FreezeViolationError(f"gradient write into frozen tensor {self.name or '<unnamed>'}")
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no graph history, never requires gradients."""
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self._requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state.dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result and register a node if any parent needs gradients."""
    _check_finite(data, op)
    out = Tensor._wrap(data)
    if not _state.grad_enabled:
        return out
    live = [p for p in parents if p._requires_grad]
    if not live:
        return out
    graph = None
    for p in live:
        if p.node is None:
            continue
        if p.node.graph.consumed:
            raise LifecycleError(f"{op}: input belongs to a graph already consumed by backward")
        if graph is None:
            graph = p.node.graph
        elif graph is not p.node.graph:
            raise LifecycleError(f"{op}: inputs come from two different graphs")
    if graph is None:
        graph = _active_graph()
    node = Node(graph, op, tuple(parents), backward_fn)
    graph.nodes.append(node)
    out.node = node
    out._requires_grad = True
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.accumulate_grad(np.ones_like(loss.data))
            return
        raise ContractError("loss does not depend on any tensor that requires gradients")
    graph = loss.node.graph
    if graph.consumed:
        raise LifecycleError("graph was already consumed by a backward pass")
    graph.consumed = True
    if _state.graph is graph:
        _state.graph = None

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[loss.node.index] = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        g = grads[node.index]
        if g is None:
            continue
        grads[node.index] = None
        graph.visited.append(node.index)
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p._requires_grad:
                continue
            if p.node is None:
                p.accumulate_grad(pg)
            elif grads[p.node.index] is None:
                grads[p.node.index] = pg
            else:
                grads[p.node.index] = grads[p.node.index] + pg
    # a consumed graph is never replayed: drop closures so activations are freed now, not at gc time
    for node in graph.nodes:
        node.backward_fn = None
        node.parents = ()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)
    dt = a.dtype

    def bw(g):
        return ((g * c).astype(dt, copy=False),)

    return _make((a.data * c).astype(dt, copy=False), (a,), bw, "scale")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if (ad <= 0).any():
        raise NumericalError("log of a non-positive value")
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; gradient flows only where ``a > floor``."""
    keep = a.data > floor
    out = np.where(keep, a.data, floor).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * keep,), "clamp_min")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a._requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b._requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # fold leading axes into one big product
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=True),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    n = int(np.prod([shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, shape) / n).astype(a.dtype),)

    return _make(np.asarray(out), (a,), bw, "mean")


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "permute")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError("transpose needs ndim >= 2")
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), bw, "take")


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the feature axis by default)."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty list")
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw, "concat")
