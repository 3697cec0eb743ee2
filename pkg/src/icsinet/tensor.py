"""Dense tensors with reverse-mode automatic differentiation.

Every tensor receives a monotonically increasing ``node_id`` when it is
created, so the order in which operations are recorded is a topological
order of the graph. :func:`backward` walks the reachable nodes in exactly
the reverse of that order.

Only tensor-scalar broadcasting is supported: a Python number, or a tensor
holding a single element, may be combined with a tensor of any shape.
Anything else must be reshaped explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_ids = itertools.count()
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


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


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A float array that can take part in a recorded computation.

    ``grad`` stays ``None`` until a backward pass reaches the tensor; leaf
    gradients accumulate across backward calls until :func:`zero_grads`.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_float_array(data, dtype)
        if self.data.ndim > 0 and 0 in self.data.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- operator sugar ---------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward`` maps the output gradient to one gradient (or ``None``) per
    parent. Nothing is recorded when gradients are disabled or no parent
    requires them.
    """
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# --- graph traversal ------------------------------------------------------
def trace(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in recording order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack.extend(node._parents)
    return [seen[k] for k in sorted(seen)]


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every reachable leaf.

    Calling this twice without :func:`zero_grads` in between adds the
    second gradient to the first.
    """
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward() root does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for node in reversed(trace(root)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                # tensor-scalar broadcast: the scalar side collects the total
                pg = np.asarray(pg.sum()).reshape(parent.shape)
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad = np.zeros_like(p.data)


# --- elementwise ------------------------------------------------------------
def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return make_node(a.data + np.asarray(b, a.dtype), (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_pair(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        return make_node(np.asarray(a, b.dtype) - b.data, (b,), lambda g: (-g,))
    if not isinstance(b, Tensor):
        return make_node(a.data - np.asarray(b, a.dtype), (a,), lambda g: (g,))
    _check_pair(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = np.asarray(b, a.dtype)
        return make_node(a.data * s, (a,), lambda g: (g * s,))
    _check_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    if not isinstance(a, Tensor):
        a = Tensor(np.full(b.shape, a, dtype=b.dtype))
    _check_pair(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return make_node(out, (a, b), lambda g: (g / bd, -g * out / bd))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g * 0.5 / out,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return make_node(xd**p, (x,), lambda g: (g * p * xd ** (p - 1),))


# --- reductions ---------------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g.reshape(kept_shape), shape).copy(),)

    return make_node(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# --- shape manipulation ---------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return make_node(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of an NCHW (or N,C,...) tensor."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel_slice: [{start}:{stop}] out of range for shape {x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_node(x.data[:, start:stop], (x,), bw)


# --- verification ------------------------------------------------------------------
def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    exclude: np.ndarray | None = None,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``x`` is perturbed in place (and restored) one entry at a time.
    ``exclude`` is a boolean mask of entries to skip (e.g. near kinks);
    ``indices`` restricts the check to the given flat positions.
    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        x.requires_grad = was
        raise ContractError(f"grad_check: function must return a scalar, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    skip = None if exclude is None else np.asarray(exclude).reshape(-1)
    worst = 0.0
    with no_grad():
        for k in positions:
            if skip is not None and skip[k]:
                continue
            orig = flat[k]
            flat[k] = orig + h
            fp = f(x).item()
            flat[k] = orig - h
            fm = f(x).item()
            flat[k] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
