"""Dense tensors with reverse-mode differentiation and a momentum optimizer.

Every differentiable operation is a plain function taking `Tensor` operands.
When gradient tracking is enabled and at least one operand requires a
gradient, the operation appends an entry to the active `Tape`; `backward`
walks the tape in exact reverse order and accumulates into `Tensor.grad`.
"""

from __future__ import annotations

import contextlib
import contextvars
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from jsenet.errors import ContractError, DegenerateGroupError, DimensionError
from jsenet.settings import get_precision_bits

LOG_CLAMP = 1e-7
LEAKY_SLOPE = 0.1
BN_DECAY = 0.99
BN_EPS = 1e-5

_DTYPE: type[np.floating] = np.float64 if get_precision_bits() == 64 else np.float32

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("jsenet_grad_enabled", default=True)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("jsenet_tape", default=None)
_thread_state = threading.local()


def get_default_dtype() -> type[np.floating]:
    return _DTYPE


def set_default_dtype(dtype: type[np.floating]) -> None:
    """Switch the float width used for new tensors (float32 or float64)."""
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"Unsupported tensor dtype: {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype: type[np.floating]) -> Iterator[None]:
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; results never require a gradient."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """Row-major float array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "_requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=_DTYPE))
        self.name = name
        self.grad: np.ndarray | None = None
        self._requires_grad = False
        self.requires_grad = requires_grad

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        self._requires_grad = bool(flag)
        if flag and self.grad is None:
            self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Tensor | np.ndarray | float | int


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; an entry's inputs always precede it."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token: contextvars.Token | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def clear(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.entries:
            raise ContractError("backward called on an empty tape")
        if loss.grad is None:
            raise ContractError("loss does not depend on any tensor requiring a gradient")
        loss.grad += 1.0
        for entry in reversed(self.entries):
            upstream = entry.output.grad
            if upstream is None or not upstream.any():
                continue
            for tensor, contribution in zip(entry.inputs, entry.backward(upstream)):
                if contribution is not None and tensor.requires_grad:
                    tensor.grad += contribution
        self.clear()


def current_tape() -> Tape:
    """The tape of the active context, or the per-thread default tape."""
    tape = _active_tape.get()
    if tape is not None:
        return tape
    if not hasattr(_thread_state, "tape"):
        _thread_state.tape = Tape()
    return _thread_state.tape


def backward(loss: Tensor) -> None:
    current_tape().backward(loss)


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    track = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        current_tape().record(TapeEntry(op, inputs, out, rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# --- Arithmetic ---

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), rule)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), rule)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result("sub", a.data - b.data, (a, b), rule)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), rule)


# --- Layout ---

def concat(tensors: Sequence[TensorLike], axis: int = 1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ContractError("concat needs at least one tensor")
    ndim = parts[0].data.ndim
    axis = axis % ndim
    for t in parts[1:]:
        if t.data.ndim != ndim or any(
            t.shape[d] != parts[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise DimensionError("concat", *(p.shape for p in parts))
    bounds = np.cumsum([0] + [t.shape[axis] for t in parts])

    def rule(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        ]

    return _result("concat", np.concatenate([t.data for t in parts], axis=axis), parts, rule)


def slice_column(x: TensorLike, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_column[{start}:{stop}]", x.shape)

    def rule(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result("slice_column", x.data[:, start:stop], (x,), rule)


def gather_rows(x: TensorLike, index: np.ndarray) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise DimensionError("gather_rows", x.shape, index.shape)

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result("gather_rows", x.data[index], (x,), rule)


def scatter_add_rows(x: TensorLike, index: np.ndarray, num_rows: int) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != x.shape[0] or (index.size and (index.min() < 0 or index.max() >= num_rows)):
        raise DimensionError("scatter_add_rows", x.shape, index.shape)
    out = np.zeros((num_rows,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, index, x.data)

    def rule(g):
        return (g[index],)

    return _result("scatter_add_rows", out, (x,), rule)


# --- Nonlinearities ---

def leaky_relu(x: TensorLike, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0

    def rule(g):
        return (np.where(positive, g, slope * g),)

    return _result("leaky_relu", np.where(positive, x.data, slope * x.data), (x,), rule)


def softmax_rows(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError("softmax_rows", x.shape)
    shifted = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = shifted / shifted.sum(axis=1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result("softmax_rows", s, (x,), rule)


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    s = np.exp(-np.logaddexp(0.0, -x.data))

    def rule(g):
        return (g * s * (1.0 - s),)

    return _result("sigmoid", s, (x,), rule)


def log(x: TensorLike) -> Tensor:
    """Natural log of inputs clamped to [1e-7, 1 - 1e-7]."""
    x = as_tensor(x)
    clamped = np.clip(x.data, LOG_CLAMP, 1.0 - LOG_CLAMP)
    inside = (x.data >= LOG_CLAMP) & (x.data <= 1.0 - LOG_CLAMP)

    def rule(g):
        return (np.where(inside, g / clamped, 0.0),)

    return _result("log", np.log(clamped), (x,), rule)


def abs(x: TensorLike) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def rule(g):
        return (g * np.sign(x.data),)

    return _result("abs", np.abs(x.data), (x,), rule)


def clamp(x: TensorLike, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)

    def rule(g):
        return (np.where(inside, g, 0.0),)

    return _result("clamp", np.clip(x.data, low, high), (x,), rule)


# --- Reductions ---

def sum(x: TensorLike) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def rule(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.asarray(x.data.sum()), (x,), rule)


def mean(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ContractError("mean of an empty tensor")
    return mul(sum(x), 1.0 / x.size)


@dataclass(frozen=True)
class IndexGroups:
    """Variable-length row groups in compressed form: group i is indices[offsets[i]:offsets[i+1]]."""

    offsets: np.ndarray
    indices: np.ndarray

    @property
    def num_groups(self) -> int:
        return len(self.offsets) - 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def group_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_groups), self.counts)

    def group(self, i: int) -> np.ndarray:
        return self.indices[self.offsets[i]:self.offsets[i + 1]]

    @classmethod
    def from_lists(cls, groups: Sequence[Sequence[int]]) -> "IndexGroups":
        counts = np.array([len(g) for g in groups], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        flat = np.concatenate([np.asarray(g, dtype=np.int64) for g in groups]) if groups else np.zeros(0, np.int64)
        return cls(offsets, flat.astype(np.int64))


def group_means(values: np.ndarray, groups: IndexGroups) -> np.ndarray:
    """Row means per group; raises on empty groups."""
    counts = groups.counts
    if groups.num_groups and counts.min() == 0:
        empty = int(np.flatnonzero(counts == 0)[0])
        raise DegenerateGroupError(f"index group {empty} is empty")
    if groups.num_groups == 0:
        return np.zeros((0,) + values.shape[1:], dtype=values.dtype)
    sums = np.add.reduceat(values[groups.indices], groups.offsets[:-1], axis=0)
    return sums / counts.reshape((-1,) + (1,) * (values.ndim - 1))


def mean_over_index_groups(x: TensorLike, groups: IndexGroups) -> Tensor:
    x = as_tensor(x)
    if groups.indices.size and groups.indices.max() >= x.shape[0]:
        raise DimensionError("mean_over_index_groups", x.shape, groups.indices.shape)
    out = group_means(x.data, groups)
    counts = groups.counts.reshape((-1,) + (1,) * (x.data.ndim - 1))
    owner = groups.group_ids()

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, groups.indices, (g / counts)[owner])
        return (full,)

    return _result("mean_over_index_groups", out, (x,), rule)


# --- Normalization ---

class BatchNormState:
    """Running statistics of one batch-norm layer.

    The first updates average the batches seen so far; the decay takes over
    once `count / (count + 1)` reaches it.
    """

    def __init__(self, channels: int, decay: float = BN_DECAY):
        self.decay = decay
        self.count = 0
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        decay = min(self.decay, self.count / (self.count + 1.0))
        self.running_mean = decay * self.running_mean + (1.0 - decay) * mean
        self.running_var = decay * self.running_var + (1.0 - decay) * var
        self.count += 1


def batch_norm(
    x: TensorLike,
    gamma: TensorLike,
    beta: TensorLike,
    state: BatchNormState,
    training: bool,
) -> Tensor:
    """Normalize each channel over all points of the batch."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    channels = x.shape[1] if x.data.ndim == 2 else -1
    if channels < 0 or gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError("batch_norm", x.shape, gamma.shape, beta.shape)
    n = x.shape[0]
    if training:
        if n == 0:
            raise ContractError("batch_norm over zero points")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        unbiased = var * n / (n - 1) if n > 1 else var
        state.update(mu, unbiased)
    else:
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x.data - mu) * inv_std

    def rule(g):
        d_hat = g * gamma.data
        if training:
            dx = inv_std / n * (n * d_hat - d_hat.sum(axis=0) - x_hat * (d_hat * x_hat).sum(axis=0))
        else:
            dx = d_hat * inv_std
        return dx, (g * x_hat).sum(axis=0), g.sum(axis=0)

    return _result("batch_norm", x_hat * gamma.data + beta.data, (x, gamma, beta), rule)


# --- Point convolution ---

def point_conv(
    features: TensorLike,
    neighbors: np.ndarray,
    influence: np.ndarray,
    weights: TensorLike,
) -> Tensor:
    """Fused kernel-point convolution.

    features: (N, C) support features; neighbors: (M, H) support rows, padded
    with N; influence: (M, H, Kp) kernel-point influences (constant);
    weights: (Kp, C, O). Returns (M, O).
    """
    features, weights = as_tensor(features), as_tensor(weights)
    n, c = features.shape
    m, h = neighbors.shape
    kp, wc, o = weights.shape
    if wc != c or influence.shape != (m, h, kp):
        raise DimensionError("point_conv", features.shape, neighbors.shape, influence.shape, weights.shape)
    influence = influence.astype(features.data.dtype, copy=False)
    padded = np.concatenate([features.data, np.zeros((1, c), dtype=features.data.dtype)], axis=0)
    gathered = padded[neighbors]                                   # (M, H, C)
    infl_t = np.ascontiguousarray(influence.transpose(0, 2, 1))    # (M, Kp, H)
    weighted = np.matmul(infl_t, gathered).reshape(m, kp * c)      # (M, Kp*C)
    flat_w = weights.data.reshape(kp * c, o)

    def rule(g):
        d_weights = (weighted.T @ g).reshape(kp, c, o)
        d_weighted = (g @ flat_w.T).reshape(m, kp, c)
        d_gathered = np.matmul(influence, d_weighted)              # (M, H, C)
        d_padded = np.zeros_like(padded)
        np.add.at(d_padded, neighbors, d_gathered)
        return d_padded[:n], d_weights

    return _result("point_conv", weighted @ flat_w, (features, weights), rule)


# --- Optimizer ---

class MomentumOptimizer:
    """Heavy-ball SGD: v <- m*v - lr*g ; p <- p + v."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.98):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ContractError(f"optimizer got {len(grads)} gradients for {len(self.params)} parameters")
        for p, v, g in zip(self.params, self.velocities, grads):
            if g is None or g.shape != p.shape:
                raise ContractError(
                    f"gradient shape {None if g is None else g.shape} does not match parameter "
                    f"'{p.name}' {p.shape}"
                )
            v *= self.momentum
            v -= self.lr * g
            p.data += v.astype(p.data.dtype, copy=False)
