"""Dense float64 tensors with reverse-mode automatic differentiation.

Every kernel returns a new :class:`Tensor`. When any input requires a
gradient, the output keeps a reference to its inputs together with a closure
that maps the output adjoint to the input adjoints. :func:`backward` walks
those records in reverse topological order (the tape) exactly once.

Elementwise kernels (``add``, ``sub``, ``mul``, ``div``, ``maximum_scalar``)
follow numpy broadcasting; their adjoints are summed back to operand shape.
No other kernel broadcasts implicitly.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

EPS_PROB = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self.name = name

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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

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

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"kernel '{op}' produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
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
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at 0 is 0
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is max(a, floor) and the
    adjoint vanishes wherever the floor is active."""
    a = as_tensor(a)
    if floor is None:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        return _make(out, (a,), lambda g: (g / a.data,), "log")
    active = a.data > floor
    arg = np.where(active, a.data, floor)

    def bw(g):
        return (np.where(active, g / arg, 0.0),)

    return _make(np.log(arg), (a,), bw, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)

    return _make(out, (a,), bw, "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def maximum_scalar(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; adjoint passes only where a > floor."""
    a = as_tensor(a)
    active = a.data > floor
    return _make(np.where(active, a.data, floor), (a,), lambda g: (g * active,), "maximum_scalar")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """np.matmul semantics: batch axes broadcast, trailing two contract."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def _left_multiply(m, x: np.ndarray, axis: int) -> np.ndarray:
    """m @ x along ``axis``, one contiguous (rows, rest) slab per leading index
    so the sparse kernel never sees a transposed copy."""
    lead, rows = x.shape[:axis], x.shape[axis]
    rest = x.shape[axis + 1:]
    slabs = np.ascontiguousarray(x).reshape((-1, rows, int(np.prod(rest, dtype=np.int64))))
    out = np.empty((slabs.shape[0], m.shape[0], slabs.shape[2]))
    for i, slab in enumerate(slabs):
        out[i] = m @ slab
    return out.reshape(lead + (m.shape[0],) + rest)


def propagate(m, x, axis: int = 0) -> Tensor:
    """Left-multiply ``x`` along ``axis`` by a constant (sparse or dense)
    matrix ``m``: out[..., n, ...] = sum_k m[n, k] x[..., k, ...].

    With a CSR ``m`` the cost is O(nnz(m) * (x.size / x.shape[axis])).
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    if m.shape[1] != x.shape[axis]:
        raise ShapeError(f"propagate: matrix {m.shape} does not conform to axis {axis} of {x.shape}")
    out = _left_multiply(m, x.data, axis)

    def bw(g):
        mt = m.T.tocsr() if sp.issparse(m) else m.T
        return (_left_multiply(mt, g, axis),)

    return _make(out, (x,), bw, "propagate")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "mean")


def max_(a, axis: int = -1) -> Tensor:
    """Maximum along one axis; the adjoint goes to the first maximal entry."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)  # argmax returns the lowest index on ties
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), bw, "max")


def l2norm(a, naxes: int = 1) -> Tensor:
    """Euclidean norm over the trailing ``naxes`` axes (adjoint 0 at the origin)."""
    a = as_tensor(a)
    if not 1 <= naxes <= a.ndim:
        raise ShapeError(f"l2norm: cannot reduce {naxes} trailing axes of {a.shape}")
    axes = tuple(range(a.ndim - naxes, a.ndim))
    out = np.sqrt((a.data * a.data).sum(axis=axes))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (a.data * np.expand_dims(scale, axes),)

    return _make(out, (a,), bw, "l2norm")


# ---------------------------------------------------------------- normalisers

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def masked_softmax(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where entries with ``mask == 0`` get weight exactly 0
    (additive -inf masking). A row with no unmasked entry is rejected."""
    a = as_tensor(a)
    keep = np.broadcast_to(np.asarray(mask) != 0, a.shape)
    if not keep.any(axis=axis).all():
        raise ValueError("masked_softmax: a row is fully masked")
    filled = np.where(keep, a.data, -np.inf)
    shifted = filled - filled.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, shifted, 0.0)), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "masked_softmax")


# ---------------------------------------------------------------- shape kernels

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[index], dtype=np.float64)
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in parts)

    def bw(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return _make(out, (a,), bw, "slice")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def gather(a, indices, axis: int = 0) -> Tensor:
    """Select (and possibly repeat or permute) entries along ``axis``."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of {a.shape}")
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _make(out, (a,), bw, "gather")


def kernel_set() -> dict[str, Callable]:
    """Catalogue of differentiable kernels by name."""
    return {
        "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
        "relu": relu, "abs": abs_, "exp": exp, "log": log, "sqrt": sqrt,
        "sigmoid": sigmoid, "maximum_scalar": maximum_scalar,
        "matmul": matmul, "propagate": propagate,
        "sum": sum_, "mean": mean, "max": max_, "l2norm": l2norm,
        "softmax": softmax, "masked_softmax": masked_softmax,
        "reshape": reshape, "transpose": transpose, "swapaxes": swapaxes,
        "broadcast_to": broadcast_to, "slice": slice_, "concat": concat,
        "gather": gather,
    }


# ---------------------------------------------------------------- divergence

def kl_divergence(p, q) -> Tensor:
    """Row-wise KL(p || q) = sum p * ln(p / q), averaged over the batch axis.

    ``p`` and ``q`` hold one distribution per row (last axis). Log arguments
    are floored at ``EPS_PROB``.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    if (p.data < 0).any() or (q.data < 0).any():
        raise ValueError("kl_divergence: distributions must be nonnegative")
    for name, t in (("p", p), ("q", q)):
        if not np.allclose(t.data.sum(axis=-1), 1.0, rtol=0.0, atol=1e-8):
            raise ValueError(f"kl_divergence: rows of {name} must sum to 1")
    if p.ndim == 1:
        p, q = reshape(p, (1, -1)), reshape(q, (1, -1))
    terms = mul(p, sub(log(p, EPS_PROB), log(q, EPS_PROB)))
    rows = sum_(terms, axis=-1)
    return mean(reshape(rows, (-1,)))


# ---------------------------------------------------------------- tape

@dataclass
class ComputationTape:
    """Kernel records reachable from an output, inputs before consumers."""

    records: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that
    requires a gradient, then release the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    tape = ComputationTape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.records):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in tape.records:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: list[float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"grad_check {state}: max rel err {self.max_error:.3e} (tol {self.tol:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> float:
    """||a - n||_inf / max(||a||_inf, ||n||_inf), with a floor of 1e-8 on
    the denominator so exact zeros compare absolutely. An explicit ``scale``
    replaces the per-array denominator."""
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    if scale is None:
        scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    return float(diff / max(scale, 1e-8))


def numeric_grad(function: Callable[..., Tensor], inputs: Sequence[Tensor], which: int, h: float) -> np.ndarray:
    x = inputs[which]
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = function(*inputs).item()
            flat[i] = orig - h
            fm = function(*inputs).item()
            flat[i] = orig
            out.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(function: Callable[..., Tensor], inputs: Iterable[Tensor],
               h: float = 1e-5, tol: float = 1e-4, joint: bool = False) -> GradCheckReport:
    """Compare analytic gradients with central differences, per input.

    ``function`` maps the inputs to a scalar tensor. With ``joint`` the
    inputs are treated as one parameter vector: each input's error is scaled
    by the largest gradient entry over all inputs, so a tensor whose gradient
    is near zero is not judged against its own round-off. Failures are
    reported in the returned object, never raised.
    """
    inputs = list(inputs)
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    backward(function(*inputs))
    pairs = []
    for k, x in enumerate(inputs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        pairs.append((analytic, numeric_grad(function, inputs, k, h)))
    scale = None
    if joint:
        scale = max((max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0)) for a, n in pairs),
                    default=0.0)
    errors = [relative_error(a, n, scale) for a, n in pairs]
    return GradCheckReport(errors, tol)
