"""Reverse-mode autodiff over numpy arrays, flat parameter vectors and Adam.

A computation is any callable ``fn(params, inputs) -> Tensor`` where
``params`` maps segment names to :class:`Tensor` leaves. Everything is
float64. Graph nodes are only recorded when some ancestor requires a
gradient, so the same code doubles as a plain forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return f"Tensor({self.data!r})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    # graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, backward)
        return Tensor(data)

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ConfigurationError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def backward(g):
            self._accumulate(_unbroadcast(g / other.data, self.shape))
            other._accumulate(_unbroadcast(-g * self.data / other.data**2, other.shape))

        return Tensor._make(self.data / other.data, (self, other), backward)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ConfigurationError("only constant exponents are supported")
        p = float(exponent)

        def backward(g):
            self._accumulate(g * p * self.data ** (p - 1))

        return Tensor._make(self.data**p, (self,), backward)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ConfigurationError(
                f"matmul expects 2-d operands, got {self.shape} and {other.shape}"
            )
        if self.shape[1] != other.shape[0]:
            raise ConfigurationError(f"matmul shape mismatch {self.shape} @ {other.shape}")

        def backward(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)

        return Tensor._make(self.data @ other.data, (self, other), backward)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, index):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            self._accumulate(full)

        return Tensor._make(self.data[index], (self,), backward)

    # reductions and reshaping -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        def backward(g):
            self._accumulate(g.reshape(self.shape))

        return Tensor._make(self.data.reshape(*shape), (self,), backward)

    @property
    def T(self):
        return Tensor._make(self.data.T, (self,), lambda g: self._accumulate(g.T))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# elementwise functions -------------------------------------------------


def _unary(x, value, local_grad):
    x = as_tensor(x)
    return Tensor._make(value, (x,), lambda g: x._accumulate(g * local_grad()))


def exp(x):
    x = as_tensor(x)
    e = np.exp(x.data)
    return _unary(x, e, lambda: e)


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(x.data)
    return _unary(x, value, lambda: 1.0 / x.data)


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _unary(x, t, lambda: 1.0 - t * t)


def relu(x):
    # subgradient at exactly 0 is 0
    x = as_tensor(x)
    return _unary(x, np.maximum(x.data, 0.0), lambda: (x.data > 0).astype(np.float64))


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _unary(x, s, lambda: s * (1.0 - s))


def softplus(x):
    """log(1 + e^x), computed without overflow."""
    x = as_tensor(x)
    value = np.logaddexp(0.0, x.data)
    return _unary(x, value, lambda: _sigmoid_np(x.data))


def log_sigmoid(x):
    return -softplus(-as_tensor(x))


def identity(x):
    return as_tensor(x)


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    s = np.log(np.sum(np.exp(x.data - m), axis=axis, keepdims=True)) + m
    value = s if keepdims else np.squeeze(s, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(g * np.exp(x.data - s))

    return Tensor._make(value, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    return x - logsumexp(x, axis=axis, keepdims=True)


def _sigmoid_np(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


ACTIVATIONS: dict[str, Callable] = {
    "tanh": tanh,
    "relu": relu,
    "identity": identity,
    "sigmoid": sigmoid,
    "softplus": softplus,
}


# parameter vectors -----------------------------------------------------


@dataclass(frozen=True)
class Segment:
    start: int
    stop: int
    shape: tuple


@dataclass(frozen=True, eq=False)
class ParamVector:
    """A flat float64 vector with named, disjoint, covering segments."""

    values: np.ndarray
    layout: Mapping[str, Segment] = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        pos = 0
        for name, seg in self.layout.items():
            if seg.start != pos or seg.stop - seg.start != int(np.prod(seg.shape, dtype=int)):
                raise ConfigurationError(f"layout segment {name!r} is not contiguous")
            pos = seg.stop
        if pos != values.size:
            raise ConfigurationError(
                f"layout covers {pos} values but the vector has {values.size}"
            )
        if not np.all(np.isfinite(values)):
            bad = next(
                name
                for name, seg in self.layout.items()
                if not np.all(np.isfinite(values[seg.start : seg.stop]))
            )
            raise NumericError(f"non-finite parameter in segment {bad!r}", segment=bad)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        layout = {}
        chunks = []
        pos = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout[name] = Segment(pos, pos + arr.size, tuple(arr.shape))
            chunks.append(arr.reshape(-1))
            pos += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    def __len__(self):
        return self.values.size

    def __getitem__(self, name) -> np.ndarray:
        seg = self.layout[name]
        return self.values[seg.start : seg.stop].reshape(seg.shape)

    def names(self):
        return list(self.layout)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self[name] for name in self.layout}

    def tensors(self, requires_grad=True) -> dict[str, Tensor]:
        return {
            name: Tensor(self[name], requires_grad=requires_grad) for name in self.layout
        }

    def with_values(self, values) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ConfigurationError(
                f"expected {self.values.size} values, got shape {values.shape}"
            )
        return ParamVector(values, self.layout)

    def replace(self, **arrays) -> "ParamVector":
        values = self.values.copy()
        for name, arr in arrays.items():
            seg = self.layout[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != seg.shape:
                raise ConfigurationError(f"segment {name!r} expects shape {seg.shape}")
            values[seg.start : seg.stop] = arr.reshape(-1)
        return ParamVector(values, self.layout)

    def segment_of(self, index: int) -> str:
        for name, seg in self.layout.items():
            if seg.start <= index < seg.stop:
                return name
        raise IndexError(index)

    def flatten_grads(self, grads: Mapping[str, np.ndarray | None]) -> np.ndarray:
        out = np.zeros(self.values.size)
        for name, seg in self.layout.items():
            g = grads.get(name)
            if g is not None:
                out[seg.start : seg.stop] = np.broadcast_to(g, seg.shape).reshape(-1)
        return out


@dataclass(frozen=True)
class GradResult:
    value: float
    gradient: np.ndarray


Computation = Callable[[Mapping[str, Tensor], object], Tensor]


def _run(fn, tensors, inputs):
    try:
        out = fn(tensors, inputs)
    except KeyError as exc:
        raise ConfigurationError(f"computation needs parameter segment {exc}") from exc
    out = as_tensor(out)
    if out.data.size != 1:
        raise ConfigurationError(f"computation must return a scalar, got shape {out.shape}")
    return out


def evaluate(fn: Computation, params: ParamVector, inputs=None) -> float:
    return float(_run(fn, params.tensors(requires_grad=False), inputs).data)


def value_and_grads(fn, params: Sequence[ParamVector], inputs=None):
    """Single backward pass through ``fn(list_of_tensor_dicts, inputs)``."""
    tensor_sets = [p.tensors() for p in params]
    try:
        out = fn(tensor_sets, inputs)
    except KeyError as exc:
        raise ConfigurationError(f"computation needs parameter segment {exc}") from exc
    out = as_tensor(out)
    if out.data.size != 1:
        raise ConfigurationError(f"computation must return a scalar, got shape {out.shape}")
    value = float(out.data)
    if not np.isfinite(value):
        raise NumericError("non-finite objective value")
    out.backward()
    grads = []
    for p, ts in zip(params, tensor_sets):
        g = p.flatten_grads({k: t.grad for k, t in ts.items()})
        if not np.all(np.isfinite(g)):
            bad = p.segment_of(int(np.flatnonzero(~np.isfinite(g))[0]))
            raise NumericError(f"non-finite gradient in segment {bad!r}", segment=bad)
        grads.append(g)
    return value, grads


def gradients(fn: Computation, params: ParamVector, inputs=None) -> GradResult:
    value, (grad,) = value_and_grads(lambda ts, x: fn(ts[0], x), [params], inputs)
    return GradResult(value, grad)


def finite_diff_check(
    fn: Computation,
    params: ParamVector,
    inputs=None,
    eps: float = 1e-5,
    indices=None,
) -> float:
    """Max over parameters of |analytic - central difference| / max(1, |analytic|).

    ``indices`` restricts the comparison to a subset of coordinates, which
    keeps the check affordable on networks with ~10^4 parameters.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigurationError("eps must lie in [1e-7, 1e-3]")
    analytic = gradients(fn, params, inputs).gradient
    idx = range(len(params)) if indices is None else indices
    base = params.values
    worst = 0.0
    for i in idx:
        plus = base.copy()
        plus[i] += eps
        minus = base.copy()
        minus[i] -= eps
        fd = (
            evaluate(fn, params.with_values(plus), inputs)
            - evaluate(fn, params.with_values(minus), inputs)
        ) / (2 * eps)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


# Adam -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n, learning_rate=3e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, beta1, beta2, epsilon)


def adam_step(params: ParamVector, grad, state: AdamState, direction="descend"):
    """One Adam update; returns ``(new_params, new_state)``."""
    if state.learning_rate <= 0:
        raise ConfigurationError("Adam learning rate must be positive")
    if direction not in ("ascend", "descend"):
        raise ConfigurationError(f"unknown direction {direction!r}")
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape:
        raise ConfigurationError("gradient length does not match parameters")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to adam_step")
    if direction == "ascend":
        g = -g
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_values = params.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon)
    return params.with_values(new_values), new_state
