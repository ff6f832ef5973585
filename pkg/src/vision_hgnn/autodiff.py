"""
Dense tensors with reverse-mode differentiation.

Every differentiable operation in the model is built from the functions in this
module. Each call records its inputs and a backward rule on the output tensor;
:func:`backward` orders the recorded graph topologically (a :class:`Tape`) and
walks it in reverse, visiting each node once.

Broadcasting is limited to exact shapes plus 0-d scalars. Row-wise bias
addition is handled by :func:`linear` and the normalization ops instead.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError

_grad_state = threading.local()
_node_ids = itertools.count()

_GELU_C = math.sqrt(2.0 / math.pi)


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def kink_margin(fn: Callable[[], "Tensor"]) -> float:
    """Smallest |input| seen by any relu while evaluating ``fn``.

    Central differences are meaningless when a step crosses a relu kink, so
    gradient checks use this to reject instances that sit too close to one.
    """
    prev = getattr(_grad_state, "kink_margins", None)
    _grad_state.kink_margins = []
    try:
        with no_grad():
            fn()
        return min(_grad_state.kink_margins, default=float("inf"))
    finally:
        _grad_state.kink_margins = prev


class Tensor:
    """A shaped float array that can participate in gradient computation.

    ``data`` is a C-contiguous numpy array of dtype float32 or float64.
    ``grad`` is populated by :func:`backward` and always has the shape of
    ``data``; it stays ``None`` for tensors created with ``requires_grad=False``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float64
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise ConfigError(f"unsupported tensor dtype {dtype}; use float32 or float64")
        self.data = _contiguous(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return arr if arr.flags.c_contiguous else arr.copy()


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out.node_id = None
    out._parents = ()
    out._backward = None
    return out


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_rule: Callable) -> Tensor:
    out = _wrap(_contiguous(np.asarray(data)))
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_node_ids)
        out._parents = parents
        out._backward = backward_rule
    return out


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=like.dtype))


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only exact or scalar broadcast)")


def _fit(g: np.ndarray, t: Tensor) -> np.ndarray:
    # reduce a broadcast gradient back onto a 0-d operand
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations reachable from one output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Returns a map from each tensor that received a gradient to its
    accumulated ``grad``. Calling twice without zeroing doubles the grads.
    """
    if loss.ndim != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = Tape.record(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        touched[node] = node.grad
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
    return touched


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_pair(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)))


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_pair(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)))


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (_fit(g * bd, a), _fit(g * ad, b)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    margins = getattr(_grad_state, "kink_margins", None)
    if margins is not None and x.data.size:
        margins.append(float(np.abs(x.data).min()))
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def rule(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return _result(out, (x,), rule)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight`` plus an optional bias added to every row."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        return _result(out, (x, weight), lambda g: (g @ wd.T, xd.T @ g))
    if bias.shape != (wd.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match output width {wd.shape[1]}")
    return _result(out + bias.data, (x, weight, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), rule)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; repeated indices accumulate on backward."""
    index = np.asarray(index, dtype=np.intp)
    n = x.shape[0]

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    if index.size and (index.min() < -n or index.max() >= n):
        raise IndexError(f"take_rows: index out of range for {n} rows")
    return _result(x.data[index], (x,), rule)


# ---------------------------------------------------------------------------
# Reductions and normalizers
# ---------------------------------------------------------------------------


def sum_reduce(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(out), (x,), rule)


def mean_reduce(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise DimensionError("mean over an empty axis")
    return scale(sum_reduce(x, axis), 1.0 / count)


def softmax_over(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax along ``axis``.

    Entries where ``mask`` is False get probability 0; every slice along
    ``axis`` must keep at least one unmasked entry.
    """
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data
    if mask is not None:
        if mask.shape != x.shape:
            raise DimensionError(f"softmax mask shape {mask.shape} does not match {x.shape}")
        if not mask.any(axis=axis).all():
            raise DimensionError("softmax: a slice has every entry masked")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), rule)


def log_softmax_over(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    z = x.data
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    return _result(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def _normalize_backward(g_hat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axis: int) -> np.ndarray:
    m = xhat.shape[axis]
    return (inv / m) * (
        m * g_hat - g_hat.sum(axis=axis, keepdims=True) - xhat * (g_hat * xhat).sum(axis=axis, keepdims=True)
    )


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of an n x d matrix, then apply ``gain`` and ``bias``."""
    if x.ndim != 2:
        raise DimensionError(f"layer_norm expects n x d input, got {x.shape}")
    d = x.shape[1]
    if d == 0:
        raise DimensionError("layer_norm over zero features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data

    def rule(g):
        g_hat = g * gd
        return (_normalize_backward(g_hat, xhat, inv, 1), (g * xhat).sum(axis=0), g.sum(axis=0))

    return _result(xhat * gd + bias.data, (x, gain, bias), rule)


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-feature normalization over the rows of an n x d matrix.

    In training mode the row statistics are used and the running estimates
    are updated in place (unbiased variance when n > 1). In eval mode the
    running estimates are used.
    """
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects n x d input, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,) or running_mean.shape != (d,) or running_var.shape != (d,):
        raise DimensionError(f"batch_norm parameter shapes do not match width {d}")
    xd, gd = x.data, gain.data
    if not training:
        inv = 1.0 / np.sqrt(running_var.astype(x.dtype) + eps)
        xhat = (xd - running_mean.astype(x.dtype)) * inv
        return _result(
            xhat * gd + bias.data,
            (x, gain, bias),
            lambda g: (g * gd * inv, (g * xhat).sum(axis=0), g.sum(axis=0)),
        )
    n = xd.shape[0]
    mu = xd.mean(axis=0, keepdims=True)
    var = xd.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    unbiased = var[0] * (n / (n - 1)) if n > 1 else var[0]
    running_mean *= 1 - momentum
    running_mean += momentum * mu[0]
    running_var *= 1 - momentum
    running_var += momentum * unbiased

    def rule(g):
        return (_normalize_backward(g * gd, xhat, inv, 0), (g * xhat).sum(axis=0), g.sum(axis=0))

    return _result(xhat * gd + bias.data, (x, gain, bias), rule)


def dropout(x: Tensor, rate: float, training: bool, key: Sequence[int] = (0, 0, 0, 0)) -> Tensor:
    """Inverted dropout with a counter-based mask.

    ``key`` is ``(seed, epoch, layer, sample)``; the Philox stream keyed by the
    seed and positioned by the remaining counters supplies one uniform draw per
    element, so masks are reproducible regardless of call order.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    seed, *counter = (int(k) for k in key)
    counter = (counter + [0, 0, 0, 0])[:4]
    bits = np.random.Generator(np.random.Philox(key=seed, counter=counter))
    keep = bits.random(x.shape) >= rate
    factor = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep * factor
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|a|, max|n|)`` over one tensor.

    The error is scaled by the tensor's largest gradient component. An
    elementwise ratio would blow up on near-zero components, where the
    central-difference roundoff (about |f| * 1e-16 / step) dominates.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.abs(a).max()), float(np.abs(n).max()), floor)
    return float(np.abs(a - n).max() / scale)


def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``target.data``."""
    flat = target.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            grad[i] = (up - down) / (2 * step)
    return grad.reshape(target.shape)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild its graph from the current ``inputs`` on every call.
    Inputs should be float64; float32 cannot resolve the differences.
    """
    zero_grad(inputs)
    backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_gradient(fn, t, step)))
    zero_grad(inputs)
    return worst
