"""
Dense tensors with reverse-mode automatic differentiation.

Tensors wrap 64-bit numpy arrays. Operations on tensors that require
gradients record their parents and a backward rule; `backward()` walks the
recorded graph in reverse topological order and accumulates gradients into
the leaves. Broadcasting is limited to leading batch dimensions: an operand
may be a scalar or have a shape equal to the trailing shape of the other.
"""

import logging
import math
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from lib.errors import NumericError, ShapeError
from lib.rng import RngStream

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
STD_FLOOR = 1e-6

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Process-wide recording switches."""

    grad_enabled: bool = True
    debug: bool = False


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations without recording them."""
    previous = Tape.grad_enabled
    Tape.grad_enabled = False
    try:
        yield
    finally:
        Tape.grad_enabled = previous


@contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    """Check every op result for NaN/Inf while active."""
    previous = Tape.debug
    Tape.debug = enabled
    try:
        yield
    finally:
        Tape.debug = previous


class Tensor:
    """
    Dense row-major array of 64-bit floats with optional gradient tracking.

    Leaf tensors are validated on creation: non-finite data is rejected.
    """

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericError("Tensor data must be finite")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _from_op(
        cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = Tape.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        if Tape.debug and not np.all(np.isfinite(data)):
            raise NumericError(f"{op} produced non-finite values")
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    def numpy(self) -> np.ndarray:
        """Copy of the underlying array."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator overloads
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)


TensorLike = Tensor | np.ndarray | float | int


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap constants as non-tracking tensors; tensors are returned unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _check_broadcast(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a == b or a == () or b == ():
        return
    if len(a) > len(b) and a[len(a) - len(b) :] == b:
        return
    if len(b) > len(a) and b[len(b) - len(a) :] == a:
        return
    raise ShapeError(op, a, b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead > 0 else grad


# Elementwise binary ops


def add(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("add", ta.shape, tb.shape)
    return Tensor._from_op(ta.data + tb.data, (ta, tb), lambda g: (g, g), "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", ta.shape, tb.shape)
    return Tensor._from_op(ta.data - tb.data, (ta, tb), lambda g: (g, -g), "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", ta.shape, tb.shape)
    return Tensor._from_op(
        ta.data * tb.data, (ta, tb), lambda g: (g * tb.data, g * ta.data), "mul"
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("div", ta.shape, tb.shape)
    out = ta.data / tb.data
    return Tensor._from_op(
        out, (ta, tb), lambda g: (g / tb.data, -g * out / tb.data), "div"
    )


def neg(a: TensorLike) -> Tensor:
    ta = as_tensor(a)
    return Tensor._from_op(-ta.data, (ta,), lambda g: (-g,), "neg")


def power(a: TensorLike, exponent: float) -> Tensor:
    ta = as_tensor(a)
    out = ta.data**exponent
    return Tensor._from_op(
        out, (ta,), lambda g: (g * exponent * ta.data ** (exponent - 1),), "pow"
    )


# Linear algebra and structure


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """
    Matrix product over the last two axes.

    Both operands need at least two dimensions. Leading (stack) dimensions
    must be equal, or one operand must be a plain matrix that is shared
    across the other's stack.
    """
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim < 2 or tb.ndim < 2 or ta.shape[-1] != tb.shape[-2]:
        raise ShapeError("matmul", ta.shape, tb.shape)
    lead_a, lead_b = ta.shape[:-2], tb.shape[:-2]
    if lead_a and lead_b and lead_a != lead_b:
        raise ShapeError("matmul", ta.shape, tb.shape)

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(tb.data, -1, -2))
        gb = np.matmul(np.swapaxes(ta.data, -1, -2), g)
        return _unbroadcast(ga, ta.shape), _unbroadcast(gb, tb.shape)

    return Tensor._from_op(np.matmul(ta.data, tb.data), (ta, tb), _backward, "matmul")


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    ta = as_tensor(a)
    try:
        out = ta.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError("reshape", ta.shape, tuple(shape)) from e
    return Tensor._from_op(out, (ta,), lambda g: (g.reshape(ta.shape),), "reshape")


def swapaxes(a: TensorLike, axis1: int, axis2: int) -> Tensor:
    ta = as_tensor(a)
    return Tensor._from_op(
        np.swapaxes(ta.data, axis1, axis2),
        (ta,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
        "swapaxes",
    )


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ValueError("concat needs at least one tensor")
    ndim = parts[0].ndim
    axis_ = axis % ndim
    for part in parts[1:]:
        same_rank = part.ndim == ndim
        if not same_rank or any(
            part.shape[d] != parts[0].shape[d] for d in range(ndim) if d != axis_
        ):
            raise ShapeError("concat", parts[0].shape, part.shape)
    sizes = [p.shape[axis_] for p in parts]
    boundaries = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, boundaries, axis=axis_))

    return Tensor._from_op(
        np.concatenate([p.data for p in parts], axis=axis_), tuple(parts), _backward, "concat"
    )


def slice_(a: TensorLike, index) -> Tensor:
    ta = as_tensor(a)
    out = np.array(ta.data[index], dtype=np.float64)

    def _backward(g):
        full = np.zeros_like(ta.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out, (ta,), _backward, "slice")


def sum_(a: TensorLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    out = np.asarray(ta.data.sum(axis=axis, keepdims=keepdims))

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ta.shape),)

    return Tensor._from_op(out, (ta,), _backward, "sum")


def mean(a: TensorLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    count = ta.data.size if axis is None else ta.shape[axis]
    return sum_(ta, axis, keepdims) * (1.0 / count)


# Elementwise nonlinearities


def tanh(a: TensorLike) -> Tensor:
    ta = as_tensor(a)
    out = np.tanh(ta.data)
    return Tensor._from_op(out, (ta,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: TensorLike) -> Tensor:
    ta = as_tensor(a)
    out = expit(ta.data)
    return Tensor._from_op(out, (ta,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: TensorLike) -> Tensor:
    ta = as_tensor(a)
    s = expit(ta.data)
    return Tensor._from_op(
        ta.data * s, (ta,), lambda g: (g * s * (1.0 + ta.data * (1.0 - s)),), "silu"
    )


def softplus(a: TensorLike) -> Tensor:
    ta = as_tensor(a)
    return Tensor._from_op(
        np.logaddexp(0.0, ta.data), (ta,), lambda g: (g * expit(ta.data),), "softplus"
    )


def exp(a: TensorLike) -> Tensor:
    ta = as_tensor(a)
    out = np.exp(ta.data)
    return Tensor._from_op(out, (ta,), lambda g: (g * out,), "exp")


def log(a: TensorLike) -> Tensor:
    ta = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ta.data)
    return Tensor._from_op(out, (ta,), lambda g: (g / ta.data,), "log")


def abs_(a: TensorLike) -> Tensor:
    ta = as_tensor(a)
    return Tensor._from_op(np.abs(ta.data), (ta,), lambda g: (g * np.sign(ta.data),), "abs")


def relu(a: TensorLike) -> Tensor:
    ta = as_tensor(a)
    mask = ta.data > 0
    return Tensor._from_op(ta.data * mask, (ta,), lambda g: (g * mask,), "relu")


def clamp_min(a: TensorLike, floor: float) -> Tensor:
    ta = as_tensor(a)
    mask = ta.data >= floor
    return Tensor._from_op(
        np.maximum(ta.data, floor), (ta,), lambda g: (g * mask,), "clamp_min"
    )


def positive(a: TensorLike, floor: float = STD_FLOOR) -> Tensor:
    """softplus(a) + floor: the positivity transform used for every predicted std."""
    return softplus(a) + floor


# Reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into `.grad` of every tracked leaf.

    Args:
        loss: Scalar tensor produced by recorded operations

    Raises:
        ShapeError: If loss is not a scalar
        ValueError: If nothing was recorded for loss
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape)
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g), strict=True):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = _unbroadcast(np.asarray(parent_grad), parent.shape)
            previous = grads.get(id(parent))
            grads[id(parent)] = parent_grad if previous is None else previous + parent_grad


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
) -> float:
    """
    Compare analytic gradients of a scalar function with central differences.

    Args:
        fn: Function of the input tensors returning a scalar tensor
        inputs: Leaf tensors with requires_grad=True
        h: Finite-difference step

    Returns:
        Largest relative error over the inputs, measured as
        ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)
    """
    for tensor in inputs:
        tensor.zero_grad()
    backward(fn(*inputs))
    worst = 0.0
    for tensor in inputs:
        analytic = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        with no_grad():
            for k in range(flat.size):
                original = flat[k]
                flat[k] = original + h
                upper = fn(*inputs).item()
                flat[k] = original - h
                lower = fn(*inputs).item()
                flat[k] = original
                numeric.reshape(-1)[k] = (upper - lower) / (2.0 * h)
        scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric)) / scale)
    return worst


# Distributions


def _require_positive(name: str, std: Tensor) -> None:
    if np.any(std.data <= 0):
        raise ValueError(f"{name}: standard deviation must be positive")


def gaussian_log_prob(x: TensorLike, mean_: TensorLike, std: TensorLike) -> Tensor:
    """Elementwise log N(x; mean, std^2)."""
    tx, tm, ts = as_tensor(x), as_tensor(mean_), as_tensor(std)
    _require_positive("gaussian_log_prob", ts)
    z = (tx - tm) / ts
    return z * z * -0.5 - log(ts) - 0.5 * LOG_2PI


def kl_diag_gaussians(
    mean_q: TensorLike, std_q: TensorLike, mean_p: TensorLike, std_p: TensorLike
) -> Tensor:
    """
    KL(q || p) between diagonal Gaussians, summed over the last axis.

    Scalars (0-d inputs) return the elementwise value.
    """
    mq, sq, mp, sp = (as_tensor(v) for v in (mean_q, std_q, mean_p, std_p))
    _require_positive("kl_diag_gaussians", sq)
    _require_positive("kl_diag_gaussians", sp)
    diff = mq - mp
    elementwise = log(sp) - log(sq) + (sq * sq + diff * diff) / (sp * sp * 2.0) - 0.5
    if elementwise.ndim == 0:
        return elementwise
    return sum_(elementwise, axis=-1)


def reparam_sample(mean_: TensorLike, std: TensorLike, rng: RngStream) -> Tensor:
    """mean + std * eps with eps ~ N(0, I) drawn from `rng`; std is floored at 1e-6."""
    tm, ts = as_tensor(mean_), as_tensor(std)
    if np.any(ts.data < 0):
        raise ValueError("reparam_sample: standard deviation must be non-negative")
    if ts.shape != tm.shape:
        raise ShapeError("reparam_sample", tm.shape, ts.shape)
    eps = rng.normal(tm.shape)
    return tm + clamp_min(ts, STD_FLOOR) * eps
