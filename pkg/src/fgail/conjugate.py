"""Learnable convex conjugate: a fully input-convex network over a scalar.

Layer ``i`` computes ``z[i+1] = g(z[i] @ Wz[i] + z0 @ Wu[i] + b[i])`` with
``z0 = u + b_s``; the output is ``z[k] + b_s``. The inner weights ``Wz`` of
layers ``1..k-1`` are kept non-negative and ``g`` is convex non-decreasing,
so the output is convex in ``u``. Layer 0 has no inner weights.

The shared bias ``b_s`` enters both the input and the output, so changing
it by ``-delta/2`` turns ``f(u)`` into ``f(u - delta/2) - delta/2``: that is
the whole zero-gap shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from . import diffcore as dc
from .diffcore import ParamVector
from .errors import ConfigurationError, NumericError

OUTPUT_ACTIVATIONS = ("identity", "relu")


@dataclass(frozen=True, eq=False)
class FicnnParams:
    vector: ParamVector
    layer_count: int
    nodes_per_layer: int
    output_activation: str = "identity"

    def __post_init__(self):
        if self.layer_count < 1 or self.nodes_per_layer < 1:
            raise ConfigurationError("FICNN needs at least one layer and one node")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")

    @classmethod
    def from_arrays(cls, shortcut, inner, biases, shared_bias, output_activation="identity"):
        """Build from explicit per-layer arrays.

        ``shortcut[i]`` has shape ``(1, n_i)``, ``inner[j]`` (for layer
        ``j + 1``) has shape ``(n_j, n_{j+1})``, ``biases[i]`` shape ``(n_i,)``.
        The last layer must have a single output unit.
        """
        k = len(shortcut)
        if len(biases) != k or len(inner) != k - 1:
            raise ConfigurationError("inconsistent FICNN layer lists")
        arrays = {}
        for i in range(k):
            arrays[f"Wu{i}"] = np.asarray(shortcut[i], dtype=float).reshape(1, -1)
            if i > 0:
                arrays[f"Wz{i}"] = np.asarray(inner[i - 1], dtype=float)
            arrays[f"b{i}"] = np.asarray(biases[i], dtype=float).reshape(-1)
        arrays["bs"] = np.array(float(shared_bias))
        if arrays[f"Wu{k - 1}"].shape[1] != 1:
            raise ConfigurationError("the last FICNN layer must have one unit")
        nodes = arrays["Wu0"].shape[1] if k > 1 else 1
        return cls(ParamVector.from_arrays(arrays), k, nodes, output_activation)

    @property
    def shortcut_weights(self):
        return [self.vector[f"Wu{i}"] for i in range(self.layer_count)]

    @property
    def inner_weights(self):
        return [self.vector[f"Wz{i}"] for i in range(1, self.layer_count)]

    @property
    def biases(self):
        return [self.vector[f"b{i}"] for i in range(self.layer_count)]

    @property
    def shared_bias(self) -> float:
        return float(self.vector["bs"])

    def with_vector(self, vector: ParamVector) -> "FicnnParams":
        return FicnnParams(vector, self.layer_count, self.nodes_per_layer, self.output_activation)

    def is_nonneg(self) -> bool:
        return all(np.all(w >= 0) for w in self.inner_weights)


def layer_sizes(layer_count, nodes_per_layer):
    return [nodes_per_layer] * (layer_count - 1) + [1]


def init_ficnn(rng, layer_count=4, nodes_per_layer=100, scale=0.1, output_activation="identity"):
    """Weights uniform(-scale, scale), inner weights clipped at 0, biases 0."""
    sizes = layer_sizes(layer_count, nodes_per_layer)
    arrays = {}
    prev = None
    for i, n in enumerate(sizes):
        arrays[f"Wu{i}"] = rng.uniform(-scale, scale, size=(1, n))
        if i > 0:
            arrays[f"Wz{i}"] = np.maximum(rng.uniform(-scale, scale, size=(prev, n)), 0.0)
        arrays[f"b{i}"] = np.zeros(n)
        prev = n
    arrays["bs"] = np.array(0.0)
    return FicnnParams(
        ParamVector.from_arrays(arrays), layer_count, nodes_per_layer, output_activation
    )


def ficnn_graph(p, u, layer_count, output_activation="identity"):
    """Differentiable forward pass; ``u`` is a Tensor of shape ``(n, 1)``."""
    z0 = u + p["bs"]
    z = None
    for i in range(layer_count):
        pre = z0 @ p[f"Wu{i}"] + p[f"b{i}"]
        if i > 0:
            pre = pre + z @ p[f"Wz{i}"]
        last = i == layer_count - 1
        z = dc.relu(pre) if (not last or output_activation == "relu") else pre
    return z + p["bs"]


def _forward_np(params: FicnnParams, u, with_grad=False):
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    v = params.vector
    z0 = u + v["bs"]
    z = dz = None
    k = params.layer_count
    for i in range(k):
        wu = v[f"Wu{i}"]
        pre = z0 @ wu + v[f"b{i}"]
        dpre = np.broadcast_to(wu, pre.shape)
        if i > 0:
            wz = v[f"Wz{i}"]
            pre = pre + z @ wz
            dpre = dpre + dz @ wz
        if i < k - 1 or params.output_activation == "relu":
            active = pre > 0
            z = np.where(active, pre, 0.0)
            dz = np.where(active, dpre, 0.0)
        else:
            z, dz = pre, dpre
    f = z[:, 0] + v["bs"]
    return (f, dz[:, 0]) if with_grad else f


def eval_fstar(params: FicnnParams, u):
    """Evaluate f*(u) for a scalar or array of inputs."""
    out = _forward_np(params, u)
    if not np.all(np.isfinite(out)):
        raise NumericError("conjugate network produced a non-finite value")
    return float(out[0]) if np.ndim(u) == 0 else out


def fstar_derivative(params: FicnnParams, u):
    """d f*/du via forward-mode through the network (relu'(0) = 0)."""
    _, d = _forward_np(params, u, with_grad=True)
    return float(d[0]) if np.ndim(u) == 0 else d


def project_nonneg(params: FicnnParams) -> FicnnParams:
    clipped = {
        f"Wz{i}": np.maximum(params.vector[f"Wz{i}"], 0.0) for i in range(1, params.layer_count)
    }
    if not clipped:
        return params
    return params.with_vector(params.vector.replace(**clipped))


def project_slopes(params: FicnnParams, bounds) -> FicnnParams:
    """Make the gap's minimiser interior: f*'(lo) <= 1 <= f*'(hi) on ``bounds``.

    The last layer's shortcut weight enters the (linear) output with slope
    exactly 1 in u, so adding ``a`` to it tilts f* by ``a * (u + b_s)``:
    slopes change uniformly and convexity is untouched. By convexity
    f*'(lo) <= f*'(hi), so one tilt always satisfies both inequalities.
    Only meaningful for the identity output activation; parameters that
    already comply are returned unchanged.
    """
    if params.output_activation != "identity":
        return params
    lo, hi = bounds
    s_lo = float(fstar_derivative(params, lo))
    s_hi = float(fstar_derivative(params, hi))
    if s_hi < 1.0:
        tilt = 1.0 - s_hi
    elif s_lo > 1.0:
        tilt = 1.0 - s_lo
    else:
        return params
    name = f"Wu{params.layer_count - 1}"
    return params.with_vector(params.vector.replace(**{name: params.vector[name] + tilt}))


def apply_shift(params: FicnnParams, delta: float) -> FicnnParams:
    """Replace ``b_s`` by ``b_s - delta/2``; the function becomes ``f(u - delta/2) - delta/2``."""
    if not math.isfinite(delta):
        raise NumericError("cannot shift by a non-finite gap")
    return params.with_vector(params.vector.replace(bs=np.array(params.shared_bias - delta / 2)))


def shift_function(fstar, delta: float) -> "ScalarFunction":
    """Eq. 6 on a plain scalar function: ``f(u - delta/2) - delta/2``.

    Same transform :func:`apply_shift` realises through ``b_s``; used for
    analytic test doubles that are not FICNNs.
    """
    if not math.isfinite(delta):
        raise NumericError("cannot shift by a non-finite gap")
    f = as_scalar_function(fstar)
    h = delta / 2
    return ScalarFunction(lambda u: f(np.asarray(u) - h) - h,
                          lambda u: f.derivative(np.asarray(u) - h))


def shifted_bounds(bounds, delta):
    """Where the domain ``bounds`` of f* lands after a shift by ``delta``."""
    if bounds is None:
        return None
    return (bounds[0] + delta / 2, bounds[1] + delta / 2)


@dataclass(frozen=True)
class GapEstimate:
    delta: float
    argmin_u: float
    step_size: float
    iterations: int
    initial_u: float
    bounds: tuple | None = None
    method: str = "descent"


class ScalarFunction:
    """Bundle of a scalar function and its derivative, both vectorised."""

    def __init__(self, value: Callable, derivative: Callable):
        self.value = value
        self.derivative = derivative

    def __call__(self, u):
        return self.value(u)

    @classmethod
    def from_ficnn(cls, params: FicnnParams) -> "ScalarFunction":
        return cls(lambda u: eval_fstar(params, u), lambda u: fstar_derivative(params, u))


def as_scalar_function(fstar) -> ScalarFunction:
    if isinstance(fstar, ScalarFunction):
        return fstar
    if isinstance(fstar, FicnnParams):
        return ScalarFunction.from_ficnn(fstar)
    raise ConfigurationError("expected FicnnParams or ScalarFunction")


def estimate_min_gap(
    fstar,
    initial_u: float = 0.0,
    step_size: float = 0.05,
    iterations: int = 200,
    bounds=None,
    grid_points: int = 0,
) -> GapEstimate:
    """Estimate inf_u {f*(u) - u} by gradient descent on u.

    Each step moves ``u <- u - step_size * (f*'(u) - 1)``; with ``bounds``
    the iterate is projected back into the interval. When ``grid_points``
    is positive the descent result is cross-checked against a uniform grid
    over ``bounds`` followed by a bracketed scalar minimisation, and the
    smallest gap found wins.
    """
    if step_size <= 0:
        raise ConfigurationError("step size must be positive")
    if iterations < 1:
        raise ConfigurationError("need at least one iteration")
    f = as_scalar_function(fstar)
    lo, hi = bounds if bounds is not None else (-math.inf, math.inf)
    u = min(max(float(initial_u), lo), hi)
    for _ in range(iterations):
        u = u - step_size * (float(f.derivative(u)) - 1.0)
        u = min(max(u, lo), hi)
        if not math.isfinite(u) or abs(u) > 1e6:
            raise NumericError(
                f"gap descent diverged (u={u:.3g}); use a smaller step size or bounds"
            )
    best_u = u
    best_gap = float(f(u)) - u
    method = "descent"

    if grid_points > 0:
        if bounds is None:
            raise ConfigurationError("a grid check needs finite bounds")
        grid = np.linspace(lo, hi, grid_points)
        gaps = np.asarray(f(grid)) - grid
        j = int(np.argmin(gaps))
        cands = []
        if gaps[j] < best_gap - 1e-12:
            cands.append((float(gaps[j]), float(grid[j]), "grid"))
        step = (hi - lo) / (grid_points - 1)
        a, b = max(lo, grid[j] - step), min(hi, grid[j] + step)
        if b > a:
            res = minimize_scalar(
                lambda x: float(f(x)) - x, bounds=(a, b), method="bounded",
                options={"xatol": 1e-10},
            )
            cands.append((float(f(res.x)) - float(res.x), float(res.x), "refined"))
        for gap, cand_u, how in cands:
            if gap < best_gap - 1e-12:
                best_gap, best_u, method = gap, cand_u, how

    # recomputed so that delta == f*(argmin) - argmin holds exactly
    delta = float(f(best_u)) - best_u
    return GapEstimate(delta, best_u, step_size, iterations, float(initial_u),
                       None if bounds is None else (float(lo), float(hi)), method)


def convexity_probe(fstar: Callable, domain=(-10.0, 10.0), samples=10_000, seed=0) -> float:
    """Worst Jensen violation f(l*a + (1-l)*b) - l*f(a) - (1-l)*f(b) over random triples."""
    if samples < 100:
        raise ConfigurationError("convexity probe needs at least 100 samples")
    if isinstance(fstar, FicnnParams):
        params = fstar
        fstar = lambda u: eval_fstar(params, u)  # noqa: E731
    rng = np.random.default_rng(seed)
    a = rng.uniform(domain[0], domain[1], samples)
    b = rng.uniform(domain[0], domain[1], samples)
    lam = rng.uniform(0.0, 1.0, samples)
    mid = np.asarray(fstar(lam * a + (1 - lam) * b), dtype=float)
    chord = lam * np.asarray(fstar(a), dtype=float) + (1 - lam) * np.asarray(fstar(b), dtype=float)
    return float(np.max(mid - chord))


def zero_gap(params: FicnnParams, bounds, step_size=0.05, iterations=200, initial_u=0.0,
             grid_points=512):
    """Estimate the minimum gap over ``bounds`` and shift it away.

    Returns ``(shifted_params, estimate, new_bounds)``.
    """
    est = estimate_min_gap(params, initial_u, step_size, iterations, bounds, grid_points)
    return apply_shift(params, est.delta), est, shifted_bounds(bounds, est.delta)
