"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape: every operation returns a new ``Tensor`` holding its value and
a closure that routes the upstream gradient to its parents. ``backward()`` on
a scalar walks the graph once in reverse topological order. Everything is
64-bit so analytic gradients can be checked against central finite
differences at tight tolerances.

Operations accept leading batch dimensions beyond their documented minimal
shapes; gradients for broadcast operands are summed back to the operand
shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


def _asarray(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode gradients.

    Operations never mutate their operands. Tensors built from raw data are
    validated to be finite; intermediate results skip the check for speed
    (training loops surface non-finite losses at the step level).
    """

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, _parents=(), _backward=None, _validate=True):
        self.value = _asarray(value)
        if _validate and not np.isfinite(self.value).all():
            raise NumericError("tensor contains non-finite values")
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.value.reshape(())[()])

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.size != 1:
            raise ShapeError("backward() requires a scalar root")
        order = _toposort(self)
        _accumulate(self, np.ones_like(self.value))
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division only supported by a python scalar")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named leaf tensor whose gradient persists across backward passes."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        if not name:
            raise ValueError("parameter name must be nonempty")
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root, root first (reverse topological order)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(grad: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...],
                    keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            grad = np.expand_dims(grad, ax)
    return np.broadcast_to(grad, shape)


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.value + b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return Tensor(out, (a, b), backward, _validate=False)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.value * b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return Tensor(out, (a, b), backward, _validate=False)


def neg(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        _accumulate(a, -g)

    return Tensor(-a.value, (a,), backward, _validate=False)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.value > 0

    def backward(g):
        _accumulate(a, g * mask)

    return Tensor(a.value * mask, (a,), backward, _validate=False)


def abs_value(a) -> Tensor:
    a = _lift(a)
    sign = np.sign(a.value)

    def backward(g):
        _accumulate(a, g * sign)

    return Tensor(np.abs(a.value), (a,), backward, _validate=False)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    out = a.value.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.value.shape))

    return Tensor(out, (a,), backward, _validate=False)


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return Tensor(a.value.transpose(axes), (a,), backward, _validate=False)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.value, shape).copy()

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))

    return Tensor(out, (a,), backward, _validate=False)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    values = [t.value for t in tensors]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(start, stop)
            _accumulate(t, g[tuple(key)])

    return Tensor(out, tuple(tensors), backward, _validate=False)


def getitem(a, key) -> Tensor:
    a = _lift(a)
    out = a.value[key]

    def backward(g):
        gx = np.zeros_like(a.value)
        np.add.at(gx, key, g)
        _accumulate(a, gx)

    return Tensor(out, (a,), backward, _validate=False)


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0; gradient scatters (and sums duplicates)."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = a.value[idx]

    def backward(g):
        gx = np.zeros_like(a.value)
        np.add.at(gx, idx, g)
        _accumulate(a, gx)

    return Tensor(out, (a,), backward, _validate=False)


def pad_spatial(a, before_h: int, after_h: int, before_w: int, after_w: int) -> Tensor:
    """Zero-pad the two axes preceding the channel axis (-3 and -2)."""
    a = _lift(a)
    widths = [(0, 0)] * a.ndim
    widths[-3] = (before_h, after_h)
    widths[-2] = (before_w, after_w)
    out = np.pad(a.value, widths)
    core = tuple(
        slice(b, dim + b) for (b, _), dim in zip(widths, a.value.shape)
    )

    def backward(g):
        _accumulate(a, g[core])

    return Tensor(out, (a,), backward, _validate=False)


# ---------------------------------------------------------------------------
# reductions


def sum_over(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        _accumulate(a, _expand_reduced(g, a.value.shape, axes, keepdims).copy())

    return Tensor(out, (a,), backward, _validate=False)


def mean_over(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.value.shape[ax] for ax in axes])) if axes else 1
    out = a.value.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        _accumulate(a, _expand_reduced(g, a.value.shape, axes, keepdims) / count)

    return Tensor(out, (a,), backward, _validate=False)


# ---------------------------------------------------------------------------
# nonlinear blocks


def matmul(a, b) -> Tensor:
    """Matrix product with optional broadcast batch dimensions."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.value.shape))
        _accumulate(b, _unbroadcast(gb, b.value.shape))

    return Tensor(out, (a, b), backward, _validate=False)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction."""
    a = _lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - inner) * out)

    return Tensor(out, (a,), backward, _validate=False)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    m = a.value.max(axis=axis, keepdims=True)
    out_keep = m + np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True))
    soft = np.exp(a.value - out_keep)
    out = np.squeeze(out_keep, axis=axis)

    def backward(g):
        _accumulate(a, np.expand_dims(g, axis) * soft)

    return Tensor(out, (a,), backward, _validate=False)


def masked_logsumexp(a, mask, axis: int = -1) -> Tensor:
    """logsumexp restricted to ``mask``; rows with no active entry yield 0.

    The zero convention keeps empty rows inert: callers are expected to
    weight them out, and their gradient contribution is exactly zero.
    """
    a = _lift(a)
    mask = np.asarray(mask, dtype=bool)
    mask = np.broadcast_to(mask, a.shape)
    filled = np.where(mask, a.value, -np.inf)
    m = filled.max(axis=axis, keepdims=True)
    has_any = np.isfinite(m)
    safe_m = np.where(has_any, m, 0.0)
    e = np.where(mask, np.exp(a.value - safe_m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    safe_s = np.where(s > 0, s, 1.0)
    out_keep = np.where(has_any, safe_m + np.log(safe_s), 0.0)
    soft = np.where(mask, e / safe_s, 0.0)
    out = np.squeeze(out_keep, axis=axis)

    def backward(g):
        _accumulate(a, np.expand_dims(g, axis) * soft)

    return Tensor(out, (a,), backward, _validate=False)


def l2_norm(a) -> Tensor:
    """Euclidean norm along the last axis.

    At an exactly-zero vector the subgradient 0 is used, so downstream
    contrastive losses stay finite when two compared vectors coincide.
    """
    a = _lift(a)
    sq = (a.value ** 2).sum(axis=-1)
    out = np.sqrt(sq)
    safe = np.where(out > 0, out, 1.0)

    def backward(g):
        _accumulate(a, (g / safe)[..., None] * a.value)

    return Tensor(out, (a,), backward, _validate=False)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine.

    Zero-variance slices are regularized by ``eps`` rather than special-cased.
    ``gain``/``bias`` must be broadcastable to the input with matching last
    axis.
    """
    a, gain, bias = _lift(a), _lift(gain), _lift(bias)
    if gain.shape[-1] != a.shape[-1] or bias.shape[-1] != a.shape[-1]:
        raise ShapeError(
            f"layer_norm affine shape {gain.shape}/{bias.shape} does not match "
            f"last axis of {a.shape}")
    n = a.shape[-1]
    mu = a.value.mean(axis=-1, keepdims=True)
    centered = a.value - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.value + bias.value

    def backward(g):
        _accumulate(gain, _unbroadcast(g * xhat, gain.value.shape))
        _accumulate(bias, _unbroadcast(g, bias.value.shape))
        gx = g * gain.value
        term = gx - gx.mean(axis=-1, keepdims=True) \
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * term)

    return Tensor(out, (a, gain, bias), backward, _validate=False)


def conv2d_3x3(x, kernel, bias) -> Tensor:
    """3x3 convolution with zero "same" padding and stride 1.

    ``x`` is [h, w, cin] or [batch, h, w, cin]; ``kernel`` is
    [3, 3, cin, cout]; output spatial dims equal the input's. Built from
    padded slices and matrix products, so the gradient is exact by
    construction.
    """
    x, kernel, bias = _lift(x), _lift(kernel), _lift(bias)
    if kernel.ndim != 4 or kernel.shape[0] != 3 or kernel.shape[1] != 3:
        raise ShapeError(f"kernel must be [3,3,cin,cout], got {kernel.shape}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv input must be 3-d or 4-d, got {x.shape}")
    if x.shape[-1] != kernel.shape[2]:
        raise ShapeError(
            f"input channels {x.shape[-1]} do not match kernel {kernel.shape[2]}")
    h, w = x.shape[-3], x.shape[-2]
    padded = pad_spatial(x, 1, 1, 1, 1)
    lead = (slice(None),) if x.ndim == 4 else ()
    out = None
    for di in range(3):
        for dj in range(3):
            window = getitem(padded, lead + (slice(di, di + h), slice(dj, dj + w),
                                             slice(None)))
            tap = getitem(kernel, (di, dj))
            term = matmul(window, tap)
            out = term if out is None else add(out, term)
    return add(out, bias)


# ---------------------------------------------------------------------------
# optimization and verification


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    decay_per_step: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < self.decay_per_step <= 1.0):
            raise ValueError("decay_per_step must be in (0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def lr_at(self, step: int) -> float:
        return self.learning_rate * self.decay_per_step ** step


def sgd_step(params: Iterable[Parameter], cfg: SgdConfig, step: int) -> None:
    """In-place decayed SGD update with weight decay; zeroes gradients."""
    lr = cfg.lr_at(step)
    params = list(params)
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.value -= lr * (p.grad + cfg.weight_decay * p.value)
        p.grad[...] = 0.0


def zero_gradients(params: Iterable[Parameter]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.value)
        else:
            p.grad[...] = 0.0


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter],
               h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds a scalar from the current parameter values on every call.
    The error per coordinate is |analytic - fd| / max(1, |analytic|).
    """
    params = list(params)
    zero_gradients(params)
    out = f()
    if out.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    zero_gradients(params)

    worst = 0.0
    for p, ref in zip(params, analytic):
        flat = p.value.reshape(-1)
        ref_flat = ref.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(ref_flat[i] - fd) / max(1.0, abs(ref_flat[i]))
            if err > worst:
                worst = err
    return worst
