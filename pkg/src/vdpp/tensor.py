"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Every operation returns a new :class:`Tensor`.  When grad mode is on and any
input requires gradients, the output remembers its parents and a closure that
maps the output gradient to per-parent gradients.  :func:`backward` collects
the reachable nodes into a :class:`GradTape` ordered by creation sequence and
replays it in reverse.

Only scalar broadcasting is allowed in elementwise ops; anything wider must go
through :func:`broadcast_to` so that gradient reduction stays explicit.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "ew_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "tanh",
    "abs_",
    "relu",
    "sqrt",
    "gelu",
    "matmul",
    "softmax_lastdim",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "take",
    "concat",
    "stack",
    "lerp_gather",
    "backward",
    "zero_grads",
    "grad_check",
]

_seq = itertools.count()
_grad_enabled = True


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


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite value produced by {op}")


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._seq = next(_seq)

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._seq = next(_seq)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def _binary_shapes(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcast allowed)")


def _scalar_safe(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_scalar_safe(g, a), _scalar_safe(g, b)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_scalar_safe(g, a), _scalar_safe(-g, b)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    return Tensor._result(
        a.data * b.data,
        (a, b),
        lambda g: (_scalar_safe(g * b.data, a), _scalar_safe(g * a.data, b)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: divisor contains zero")
    out = a.data / b.data

    def bw(g):
        return _scalar_safe(g / b.data, a), _scalar_safe(-g * out / b.data, b)

    return Tensor._result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)

    def bw(g):
        if np.any(out == 0):
            raise ZeroDivisionError("sqrt: gradient undefined at 0")
        return (g * 0.5 / out,)

    return Tensor._result(out, (a,), bw, "sqrt")


_EW = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "tanh": tanh,
    "exp": exp,
    "abs": abs_,
    "neg": neg,
    "relu": relu,
    "sqrt": sqrt,
}
_UNARY = {"tanh", "exp", "abs", "neg", "relu", "sqrt"}


def ew_op(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind not in _EW:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        return _EW[kind](a)
    if b is None:
        raise ValueError(f"{kind} takes two operands")
    return _EW[kind](a, b)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation, built from primitives
    inner = mul(_GELU_C, add(x, mul(0.044715, mul(x, mul(x, x)))))
    return mul(mul(0.5, x), add(1.0, tanh(inner)))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics on leading dims.

    For 2-D operands the gradient rules are dA = G Bᵀ and dB = Aᵀ G; batched
    operands reduce the gradient over any broadcast leading dims.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree {a.shape} @ {b.shape}")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul: incompatible batch dims {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw, "matmul")


def softmax_lastdim(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ValueError("softmax_lastdim: last extent must be >= 1")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (x,), bw, "softmax")


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def broadcast_to(x, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient is summed back."""
    x = _as_tensor(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()
    return Tensor._result(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx], dtype=np.float64)

    def bw(g):
        full = np.zeros_like(x.data)
        if _has_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return Tensor._result(out, (x,), bw, "getitem")


def take(x, indices, axis: int) -> Tensor:
    """Gather along one axis; indices may repeat (gradients accumulate)."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def bw(g):
        full = np.zeros((x.shape[axis],) + tuple(np.delete(x.shape, axis)), dtype=np.float64)
        np.add.at(full, indices, np.moveaxis(g, axis, 0))
        return (np.moveaxis(full, 0, axis),)

    return Tensor._result(out, (x,), bw, "take")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(xs), bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)
    n = len(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor._result(out, tuple(xs), bw, "stack")


def lerp_gather(x, axis: int, lo: np.ndarray, hi: np.ndarray, w: np.ndarray) -> Tensor:
    """``x[lo] + w * (x[hi] - x[lo])`` along ``axis``.

    The lerp form keeps constant inputs exact and reduces to a plain gather
    where ``w == 0``.
    """
    x = _as_tensor(x)
    axis = axis % x.ndim
    lo = np.asarray(lo, dtype=np.intp)
    hi = np.asarray(hi, dtype=np.intp)
    w = np.asarray(w, dtype=np.float64)
    wshape = [1] * x.ndim
    wshape[axis] = w.size
    wb = w.reshape(wshape)
    x0 = np.take(x.data, lo, axis=axis)
    x1 = np.take(x.data, hi, axis=axis)
    out = x0 + wb * (x1 - x0)

    def bw(g):
        gm = np.moveaxis(g, axis, 0)
        wm = w.reshape((-1,) + (1,) * (g.ndim - 1))
        full = np.zeros((x.shape[axis],) + gm.shape[1:], dtype=np.float64)
        np.add.at(full, lo, gm * (1.0 - wm))
        np.add.at(full, hi, gm * wm)
        return (np.moveaxis(full, 0, axis),)

    return Tensor._result(out, (x,), bw, "lerp_gather")


# ---------------------------------------------------------------- backward


class GradTape:
    """Nodes reachable from an output, in execution order."""

    def __init__(self, output: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack_ = [output]
        while stack_:
            t = stack_.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack_.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        self.output = output
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> list[Tensor]:
        """Propagate ``seed`` backward; returns nodes in visit order."""
        grads: dict[int, np.ndarray] = {id(self.output): seed}
        visited = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            visited.append(node)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        return visited


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: tensor is not part of a gradient tape")
    GradTape(loss).replay(np.ones_like(loss.data))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable, x, h: float = 1e-5, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` receives it unchanged and
    returns a scalar Tensor.  The error per coordinate is
    ``|analytic - fd| / (|analytic| + |fd| + eps)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = f(x)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]
    worst = 0.0
    with no_grad():
        for t, an in zip(xs, analytic):
            flat = t.data.reshape(-1)
            af = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(x).item()
                flat[i] = orig - h
                fm = f(x).item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * h)
                err = abs(af[i] - fd) / (abs(af[i]) + abs(fd) + eps)
                worst = max(worst, err)
    for t in xs:
        t.grad = None
    return worst
