"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array. Operations on tensors that
require gradients record a lineage node (an op tag, the parent tensors and a
closure mapping the output gradient to parent gradients). :meth:`Tensor.backward`
walks that graph once in reverse topological order and accumulates ``grad``
on every leaf that requires it.

Layout convention is N x C x H x W throughout.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# Inputs to log/BCE are clamped to this band.
LOG_EPS = 1e-7

_checked = False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an operation sees or produces NaN/inf."""


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Validate finiteness of every operation's inputs and output while active."""
    global _checked
    prev, _checked = _checked, enabled
    try:
        yield
    finally:
        _checked = prev


def is_checked() -> bool:
    return _checked


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # -- construction -----------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Wrap an op result, recording lineage if any parent requires grad."""
        if _checked:
            for i, p in enumerate(parents):
                if not np.all(np.isfinite(p.data)):
                    raise NonFiniteError(f"{op}: input {i} ({p.name or 'unnamed'}, shape {p.shape}) is not finite")
            if not np.all(np.isfinite(data)):
                raise NonFiniteError(f"{op}: produced non-finite output of shape {tuple(data.shape)}")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.op = op
            out.parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out.op = None
            out.parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        ``self`` must be a scalar unless an explicit output gradient is given.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor without gradient lineage")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; every node appears exactly once."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        # python scalars adopt the other operand's dtype at the call site
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(x, dtype=dtype)


# -- broadcasting -----------------------------------------------------------


def _align(a: Tensor, b: Tensor, op: str) -> tuple[np.ndarray, np.ndarray]:
    """Return operand arrays ready for numpy broadcasting, or raise ShapeError.

    Besides numpy's rules, a length-C vector is accepted against an N x C x H x W
    tensor and broadcast per channel.
    """
    x, y = a.data, b.data
    if x.shape == y.shape:
        return x, y
    if y.ndim == 1 and x.ndim == 4 and y.shape[0] == x.shape[1] and y.shape[0] != x.shape[3]:
        y = y.reshape(1, -1, 1, 1)
    elif x.ndim == 1 and y.ndim == 4 and x.shape[0] == y.shape[1] and x.shape[0] != y.shape[3]:
        x = x.reshape(1, -1, 1, 1)
    try:
        np.broadcast_shapes(x.shape, y.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None
    return x, y


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of broadcasting)."""
    if g.shape == shape:
        return g
    if len(shape) == 1 and g.ndim == 4 and g.shape[1] == shape[0] and g.shape[3] != shape[0]:
        return g.sum(axis=(0, 2, 3))
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    x, y = _align(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(x + y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    x, y = _align(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(x - y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    x, y = _align(a, b, "mul")
    sa, sb = a.shape, b.shape
    return Tensor._make(x * y, (a, b), lambda g: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)), "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    x, y = _align(a, b, "div")
    sa, sb = a.shape, b.shape
    out = x / y

    def backward(g):
        return _unbroadcast(g / y, sa), _unbroadcast(-g * out / y, sb)

    return Tensor._make(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiable python scalar."""
    c = float(c)
    return Tensor._make(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # maximum (unlike where) lets NaN through so divergence stays visible
    return Tensor._make(np.maximum(a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return Tensor._make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    """Natural log. Callers clamp to [LOG_EPS, 1 - LOG_EPS] first where inputs are probabilities."""
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log: input must be strictly positive; clamp it first")
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    return Tensor._make(out, (a,), lambda g: (g * inside,), "clamp")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
}


def elementwise(op: str, a: Tensor, b=None, **kwargs) -> Tensor:
    """Dispatch an elementwise op by tag.

    ``scale`` takes the python factor as ``b``; ``clamp`` takes ``lo``/``hi`` keywords.
    """
    if op == "scale":
        return scale(a, b)
    if op == "clamp":
        return clamp(a, **kwargs)
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b) if b is not None else fn(a)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _coerce(a, b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return Tensor._make(x @ y, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        # J^T g for J = diag(s) - s s^T
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward, "softmax")


# -- shape manipulation -----------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return Tensor._make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(int(i) for i in np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


# -- reductions -------------------------------------------------------------


def _norm_axes(axes, ndim: int, op: str) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"{op}: axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"{op}: repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce(op: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None)."""
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    axes = _norm_axes(axes, a.ndim, op)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if op == "mean":
        out = out / out.dtype.type(count)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g):
        g = np.broadcast_to(g.reshape(kept), src)
        if op == "mean":
            g = g / g.dtype.type(count)
        return (np.array(g),)

    return Tensor._make(np.asarray(out), (a,), backward, op)


def sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", a, axes, keepdims)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axes, keepdims)
