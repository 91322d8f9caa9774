"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive builds its output eagerly and, when any input requires a
gradient, records a backward closure on the output.  ``Tensor.backward``
walks the recorded nodes in reverse topological order and accumulates
gradients additively into leaf tensors.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "no_grad",
    "fixed_reduction_order",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "divide",
    "concat",
    "reshape",
    "transpose",
    "tensor_sum",
    "tensor_mean",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softmax",
    "log_softmax",
    "clip",
    "gather_rows",
    "sqdist",
    "grl",
    "grad_check",
]


class ShapeError(ValueError):
    """Inputs do not satisfy a primitive's shape rule."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


_GRAD_ENABLED = True
_FIXED_ORDER = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def fixed_reduction_order(enabled: bool = True):
    """Force sequential, left-to-right reductions in ``sqdist`` and ``tensor_sum``.

    Results then match a naive loop accumulation bit for bit, at a large cost
    in speed.  The default fast path uses BLAS and pairwise summation.
    """
    global _FIXED_ORDER
    prev = _FIXED_ORDER
    _FIXED_ORDER = enabled
    try:
        yield
    finally:
        _FIXED_ORDER = prev


def fixed_order_enabled() -> bool:
    return _FIXED_ORDER


class Tensor:
    """A node in the differentiation graph.

    ``data`` is a float64 ndarray treated as immutable once created; only
    ``grad`` is written after construction.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"
        self.name = name

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
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return divide(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _slice(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_mean(self, axis, keepdims)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def softmax(self, axis: int = -1) -> Tensor:
        return softmax(self, axis)

    def log_softmax(self, axis: int = -1) -> Tensor:
        return log_softmax(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation -----------------------------------------------
    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Populate ``grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ----------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # sum() is NaN/Inf iff some element is (overflow of finite sums aside)
    if not math.isfinite(float(np.sum(arr))):
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(x, c: float) -> Tensor:
    """Multiply by a constant python scalar."""
    x = as_tensor(x)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def divide(x, c: float) -> Tensor:
    """Divide by a constant python scalar (kept distinct from ``scale`` for exact rounding)."""
    x = as_tensor(x)
    if c == 0.0:
        raise ZeroDivisionError("division of a tensor by zero")
    return _node(x.data / c, (x,), lambda g: (g / c,), "divide")


# ----------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D ``b`` and ``a`` of rank 1..3, or 1-D ``b``.

    Shape rule: the last axis of ``a`` must equal the first axis of ``b``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if b.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * b.data
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1)
        else:
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                if a.ndim == 1:
                    gb = np.outer(a.data, g)
                else:
                    gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.data.T, (x,), lambda g: (g.T,), "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Join tensors along ``axis``; all other axes must agree."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        parts = []
        for i in range(len(ts)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _node(out, tuple(ts), backward, "concat")


def _slice(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    if isinstance(index, (list, np.ndarray)) or (
        isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index)
    ):
        raise TypeError("advanced indexing is not supported; use gather_rows")
    out = x.data[index]
    src = x.shape

    def backward(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _node(np.array(out, dtype=np.float64), (x,), backward, "slice")


def gather_rows(table, indices: np.ndarray, padding_idx: int | None = None) -> Tensor:
    """Row lookup ``table[indices]``; the gradient for ``padding_idx`` is discarded."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        if padding_idx is not None:
            gt[padding_idx] = 0.0
        return (gt,)

    return _node(table.data[idx], (table,), backward, "gather")


# ----------------------------------------------------------------------
# reductions


def _sequential_sum(arr: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        flat = arr.reshape(-1)
        out = np.cumsum(flat)[-1] if flat.size else np.float64(0.0)
        return np.reshape(out, (1,) * arr.ndim) if keepdims else np.asarray(out)
    return np.take(np.cumsum(arr, axis=axis), [-1], axis=axis) if keepdims else np.take(
        np.cumsum(arr, axis=axis), -1, axis=axis
    )


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if _FIXED_ORDER:
        out = _sequential_sum(x.data, axis, keepdims)
    else:
        out = np.asarray(np.sum(x.data, axis=axis, keepdims=keepdims))
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(out, dtype=np.float64), (x,), backward, "sum")


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return divide(tensor_sum(x, axis, keepdims), float(count))


# ----------------------------------------------------------------------
# elementwise unary


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # two-branch form avoids overflow in exp for large |d|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; zero gradient where clamped."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ----------------------------------------------------------------------
# pairwise distances


def _sqdist_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        d = a[:, k, None] - b[None, :, k]
        out += d * d
    return out


def sqdist(a, b) -> Tensor:
    """Squared Euclidean distance between every row of ``a`` (n×d) and of ``b`` (m×d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sqdist: shapes {a.shape} and {b.shape} need matching row width")
    if _FIXED_ORDER:
        out = _sqdist_sequential(a.data, b.data)
    else:
        aa = np.einsum("ij,ij->i", a.data, a.data)
        bb = np.einsum("ij,ij->i", b.data, b.data)
        out = np.maximum(aa[:, None] + bb[None, :] - 2.0 * (a.data @ b.data.T), 0.0)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = 2.0 * (g.sum(axis=1)[:, None] * a.data - g @ b.data)
        if b.requires_grad:
            gb = 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)
        return ga, gb

    return _node(out, (a, b), backward, "sqdist")


# ----------------------------------------------------------------------
# gradient reversal


def grl(x, coeff: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-coeff``."""
    if coeff < 0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {coeff}")
    x = as_tensor(x)
    neg = -float(coeff)
    return _node(x.data.copy(), (x,), lambda g: (neg * g,), "grl")


# ----------------------------------------------------------------------
# finite-difference checking


def grad_check(fn: Callable[..., Tensor], point, step: float = 1e-6) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``point`` is a tensor or a sequence of tensors; ``fn`` is called with
    them as positional arguments and must return a scalar tensor.  Each
    point's ``data`` is perturbed in place and restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    points: list[Tensor] = [point] if isinstance(point, Tensor) else list(point)
    saved_flags = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
        p.zero_grad()
    try:
        out = fn(*points)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        out.backward()
        analytic = [p.grad.copy() for p in points]

        worst = 0.0
        with no_grad():
            for p, ga in zip(points, analytic):
                if not p.data.flags.c_contiguous:
                    p.data = np.ascontiguousarray(p.data)
                flat = p.data.reshape(-1)
                gflat = ga.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = fn(*points).item()
                    flat[i] = orig - step
                    fm = fn(*points).item()
                    flat[i] = orig
                    fd = (fp - fm) / (2.0 * step)
                    err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
                    worst = max(worst, err)
        return worst
    finally:
        for p, flag in zip(points, saved_flags):
            p.requires_grad = flag


def parameters_grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-6) -> float:
    """``grad_check`` over many parameter tensors for a zero-argument loss closure."""
    return grad_check(lambda *_: loss_fn(), list(params), step)
