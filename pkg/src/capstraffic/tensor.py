"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor`; the underlying buffers are
marked read-only so values can be shared freely. When at least one operand
requires a gradient, the result remembers its parents and a vector-Jacobian
product closure. :func:`backward` linearises that graph into a
:class:`GradTape` (topological order) and walks it once in reverse.

Broadcasting is deliberately absent except between a tensor and a scalar
(Python number or 0-d tensor). Use :func:`broadcast_to` to broadcast
explicitly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import GradientError, ShapeError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


class Tensor:
    """An immutable n-dimensional array of doubles, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        array = np.array(data, dtype=DTYPE)
        if any(dim < 1 for dim in array.shape):
            raise ShapeError("tensor dimensions must all be >= 1", array.shape)
        self.data = _freeze(array)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _freeze(np.asarray(data, dtype=DTYPE))
        out.name = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
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
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.name = self.name
        out._parents = ()
        out._vjp = None
        return out

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{grad})"

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

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self) -> "Tensor":
        return relu(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones(x.shape))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape))


# ---------------------------------------------------------------------------
# elementwise


def _is_scalar(value) -> bool:
    if isinstance(value, Tensor):
        return value.ndim == 0
    return isinstance(value, (int, float, np.floating, np.integer))


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Undo scalar-with-tensor promotion.
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _binary_operands(kind: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{kind}: at least one operand must be a Tensor")
    a_t, b_t = as_tensor(a), as_tensor(b)
    if a_t.shape != b_t.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{kind}: operand shapes differ", a_t.shape, b_t.shape)
    return a_t, b_t


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


_UNARY = {"neg": neg, "relu": relu, "exp": exp, "log": log, "sqrt": sqrt, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Apply the named pointwise operation, e.g. ``elementwise("add", a, b)``."""
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"{kind} takes a single operand")
        return _UNARY[kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("cannot reshape", x.shape, shape) from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over broadcast axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("cannot broadcast", x.shape, shape) from None
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, dim in enumerate(x.shape) if dim == 1 and shape[lead + i] != 1
    )

    def vjp(g):
        return (g.sum(axis=axes, keepdims=True).reshape(x.shape) if axes else g,)

    return Tensor._from_op(out, (x,), vjp)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._from_op(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    return tsum(x, axis=axes, keepdims=keepdims) / float(count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands", a.shape, b.shape)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul inner dimensions disagree", a.shape, b.shape)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), vjp)


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Differentiable ``numpy.einsum`` with explicit output subscripts.

    Repeated indices inside a single operand (diagonals) are not supported.
    """
    if "->" not in subscripts:
        raise ValueError("einsum needs explicit output subscripts")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ValueError("einsum operand count does not match subscripts")
    sizes: dict[str, int] = {}
    for sub_, op in zip(in_subs, operands):
        if len(sub_) != op.ndim or len(set(sub_)) != len(sub_):
            raise ShapeError(f"einsum subscripts {sub_!r} do not fit operand", op.shape)
        for letter, dim in zip(sub_, op.shape):
            if sizes.setdefault(letter, dim) != dim:
                raise ShapeError(f"einsum size mismatch on index {letter!r}", op.shape)
    datas = [op.data for op in operands]
    out = np.einsum(subscripts, *datas, optimize=len(operands) > 2)

    def vjp(g):
        grads = []
        for k, sub_k in enumerate(in_subs):
            others = [s for j, s in enumerate(in_subs) if j != k] + [out_sub]
            available = set("".join(others))
            kept = "".join(c for c in sub_k if c in available)
            spec_k = ",".join(others) + "->" + kept
            arrays = [d for j, d in enumerate(datas) if j != k] + [g]
            gk = np.einsum(spec_k, *arrays, optimize=len(arrays) > 2)
            if kept != sub_k:
                # indices that appear only in operand k: gradient is constant along them
                gk = np.expand_dims(gk, tuple(i for i, c in enumerate(sub_k) if c not in available))
                gk = np.broadcast_to(gk, operands[k].shape)
            grads.append(gk)
        return tuple(grads)

    return Tensor._from_op(out, operands, vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), vjp)


# ---------------------------------------------------------------------------
# reverse mode


class GradTape:
    """Topologically ordered record of the nodes a scalar depends on.

    Operands always precede the nodes that consume them, and :meth:`backward`
    visits every node exactly once. The tape holds no gradient state, so
    replaying it is idempotent.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
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
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, seed: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
        root = self.nodes[-1]
        grads: dict[int, np.ndarray] = {
            id(root): np.ones(root.shape) if seed is None else np.asarray(seed, dtype=DTYPE)
        }
        leaves: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                leaves[node] = np.array(g, dtype=DTYPE)
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return leaves


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every tracked leaf tensor.

    The returned mapping is keyed by the leaf tensors themselves; each
    gradient has the same shape as its tensor.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor with requires_grad=True")
    return GradTape.record(loss).backward()


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x, h: float = 1e-5
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    probe = Tensor(x0, requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise GradientError(f"function must return a scalar, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise GradientError("function value is not finite at x")
    analytic = backward(out).get(probe) if out.requires_grad else None
    if analytic is None:
        analytic = np.zeros_like(x0)

    worst = 0.0
    with no_grad():
        for i in range(x0.size):
            shifted = x0.copy()
            shifted.flat[i] = x0.flat[i] + h
            f_plus = f(Tensor(shifted)).item()
            shifted.flat[i] = x0.flat[i] - h
            f_minus = f(Tensor(shifted)).item()
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise GradientError(f"function value is not finite near coordinate {i}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.flat[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
