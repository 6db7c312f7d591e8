"""Dense tensors with reverse-mode automatic differentiation.

Every operation the network needs is a function in this module that takes
:class:`Tensor` operands, computes its value eagerly with numpy, and (when
gradient recording is on and some operand requires a gradient) links the
result to its operands together with a closure computing the adjoint.
:meth:`Tensor.backward` replays those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .exceptions import BoundsError, ContractError, ShapeError

__all__ = [
    "Tensor", "Tape", "BatchNormState", "no_grad", "is_grad_enabled",
    "as_tensor", "matmul", "add", "sub", "mul", "div", "neg", "pointwise_linear",
    "relu", "leaky_relu", "softmax", "log_softmax", "concat", "gather_rows",
    "max_over_axis", "mean_over_axis", "sum_over_axis", "transpose", "reshape",
    "batch_norm", "segment_mean", "dropout",
]

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """An n-dimensional array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Wrap ``value`` as a constant tensor, adopting ``like``'s dtype for raw numbers."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None and not isinstance(value, np.ndarray) else None
    return Tensor(value, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Nodes reachable from a root, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
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

    def replay(self, seed: np.ndarray) -> None:
        root = self.nodes[-1]
        pending = {id(root): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
        # the graph is consumed: intermediates drop their links to free activations
        for node in self.nodes:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() on a tensor that is not on the tape")
    if loss.is_leaf:
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    Tape.from_root(loss).replay(seed)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"shapes {a.shape} and {b.shape} are not aligned")

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), grad_fn)


def pointwise_linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-point affine map over the trailing feature axis (a kernel-size-1 Conv1d).

    ``x`` is ``(..., c_in)``, ``weight`` is ``(c_in, c_out)`` and ``bias`` ``(c_out,)``.
    """
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("pointwise_linear", f"input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("pointwise_linear", f"bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out.reshape(lead + (weight.shape[1],)), parents, grad_fn)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("transpose", f"needs at least 2 axes, got {x.shape}")
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope).astype(x.dtype, copy=False)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def _check_axis(name: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(name, f"axis {axis} is invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("softmax", x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("log_softmax", x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), grad_fn)


# ---------------------------------------------------------------------------
# Structural ops and reductions
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", "needs at least one tensor")
    ref = tensors[0]
    axis = _check_axis("concat", ref, axis)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise ShapeError("concat", f"shape {t.shape} does not match {ref.shape} off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def gather_rows(x: Tensor, indices) -> Tensor:
    """``x[indices]`` along the first axis; ``indices`` may have any shape."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("gather_rows", f"indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise BoundsError(
            f"gather_rows: index range [{idx.min()}, {idx.max()}] outside [0, {x.shape[0]})"
        )

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), grad_fn)


def max_over_axis(x: Tensor, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis`` plus the winning positions (first occurrence on ties)."""
    x = as_tensor(x)
    axis = _check_axis("max_over_axis", x, axis)
    arg = np.argmax(x.data, axis=axis)
    arg_k = np.expand_dims(arg, axis)
    values = np.take_along_axis(x.data, arg_k, axis=axis).squeeze(axis)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg_k, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(values, (x,), grad_fn), arg


def sum_over_axis(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    axis = _check_axis("sum_over_axis", x, axis)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean_over_axis(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
        return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))
    axis = _check_axis("mean_over_axis", x, axis)
    n = x.shape[axis]

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), grad_fn)


def segment_mean(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Average the rows of ``x`` that share a segment id; empty segments give zero rows."""
    x = as_tensor(x)
    ids = np.asarray(segment_ids)
    if ids.shape != (x.shape[0],):
        raise ShapeError("segment_mean", f"{ids.shape[0] if ids.ndim else 'scalar'} ids for {x.shape[0]} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise BoundsError(f"segment_mean: segment ids outside [0, {num_segments})")
    counts = np.bincount(ids, minlength=num_segments).astype(x.dtype)
    safe = np.maximum(counts, 1)
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, ids, x.data)
    out /= safe.reshape((-1,) + (1,) * (x.ndim - 1))

    def grad_fn(g):
        return ((g / safe.reshape((-1,) + (1,) * (x.ndim - 1)))[ids],)

    return _result(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# Normalization and regularization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics of one normalization layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: Optional[BatchNormState] = None,
    training: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each trailing-axis channel over all leading axes.

    In training mode the batch statistics are used and, when ``state`` is
    given, folded into its running averages; otherwise the running
    statistics are used.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", f"input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        m = x.size // c
        mean = x.data.mean(axis=axes)
        centered = x.data - mean
        var = (centered * centered).mean(axis=axes)
        if state is not None:
            mom = state.momentum
            unbiased = var * (m / (m - 1)) if m > 1 else var
            state.running_mean *= 1 - mom
            state.running_mean += mom * mean
            state.running_var *= 1 - mom
            state.running_var += mom * unbiased
    else:
        if state is None:
            raise ContractError("batch_norm in inference mode needs running statistics")
        m = None
        centered = x.data - state.running_mean
        var = state.running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        g2 = g.reshape(-1, c)
        xh2 = xhat.reshape(-1, c)
        dgamma = (g2 * xh2).sum(axis=0) if gamma.requires_grad else None
        dbeta = g2.sum(axis=0) if beta.requires_grad else None
        if not x.requires_grad:
            return None, dgamma, dbeta
        gg = g * gamma.data
        if training:
            gg2 = gg.reshape(-1, c)
            dx = inv_std * (gg - gg2.mean(axis=0) - xhat * (gg2 * xh2).mean(axis=0))
        else:
            dx = gg * inv_std
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), grad_fn)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or outside training."""
    x = as_tensor(x)
    if not training or p <= 0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))
