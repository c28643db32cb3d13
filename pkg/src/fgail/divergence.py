"""Closed-form f-divergences, exact discrete values, Gaussian oracles and
the variational lower-bound estimator.

Conjugates and final activations are written with :mod:`fgail.diffcore`
ops so they can sit inside a differentiable objective; call them on a
plain array through :meth:`DivergenceSpec.fstar`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, stats

from . import diffcore as dc
from .conjugate import FicnnParams, eval_fstar, ficnn_graph
from .errors import ConfigurationError, NumericError
from .nets import reward_values

CLOSED_FORM = ("KL", "RKL", "JS_star")


@dataclass(frozen=True)
class DivergenceSpec:
    name: str
    generator: Callable  # f on (0, inf), numpy in/out
    conjugate: Callable  # f*, diffcore Tensor in/out
    conjugate_domain: tuple  # open interval
    final_activation: Callable  # raw reward output -> u, Tensor in/out
    generator_at_zero: float = 0.0  # lim_{v->0} f(v)
    generator_slope_at_inf: float = 0.0  # lim_{v->inf} f(v)/v
    ficnn: FicnnParams | None = None

    def fstar(self, u):
        """Evaluate the conjugate on numbers or arrays."""
        if self.ficnn is not None:
            return eval_fstar(self.ficnn, u)
        out = self.conjugate(dc.Tensor(np.asarray(u, dtype=float))).data
        return float(out) if np.ndim(u) == 0 else out

    def in_domain(self, u):
        lo, hi = self.conjugate_domain
        u = np.asarray(u)
        return (u > lo) & (u < hi)

    def check_domain(self, u, what="sample"):
        ok = self.in_domain(u) & np.isfinite(u)
        if not np.all(ok):
            bad = int(np.flatnonzero(~np.atleast_1d(ok))[0])
            value = np.atleast_1d(u)[bad]
            raise NumericError(
                f"{self.name} conjugate evaluated outside its domain at {what} {bad} (u={value!r})"
            )


def _kl_generator(v):
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0)


def _js_generator(v):
    v = np.asarray(v, dtype=float)
    return _kl_generator(v) - (1 + v) * np.log1p(v)


def _rkl_activation(x):
    return -dc.exp(x)


def _js_conjugate(u):
    # -log(1 - e^u) for u < 0
    return -dc.log(1.0 - dc.exp(u))


def closed_form(name: str) -> DivergenceSpec:
    if name == "KL":
        return DivergenceSpec(
            "KL", _kl_generator, lambda u: dc.exp(u - 1.0), (-math.inf, math.inf),
            dc.identity, 0.0, math.inf,
        )
    if name == "RKL":
        return DivergenceSpec(
            "RKL", lambda v: -np.log(v), lambda u: -1.0 - dc.log(-dc.as_tensor(u)),
            (-math.inf, 0.0), _rkl_activation, math.inf, 0.0,
        )
    if name == "JS_star":
        return DivergenceSpec(
            "JS_star", _js_generator, _js_conjugate, (-math.inf, 0.0), dc.log_sigmoid, 0.0, 0.0,
        )
    raise ConfigurationError(f"unknown divergence {name!r}; expected one of {CLOSED_FORM}")


def learned(ficnn: FicnnParams, bounds=(-10.0, 10.0), grid_points=4001) -> DivergenceSpec:
    """Spec backed by a conjugate network.

    The generator is recovered numerically as max over a grid on ``bounds``
    of ``u*v - f*(u)``.
    """
    grid = np.linspace(bounds[0], bounds[1], grid_points)
    cache = {}

    def generator(v):
        if "f" not in cache:
            cache["f"] = eval_fstar(ficnn, grid)
        v = np.asarray(v, dtype=float)
        return np.max(np.multiply.outer(v, grid) - cache["f"], axis=-1)

    def conjugate(u):
        u = dc.as_tensor(u)
        p = ficnn.vector.tensors(requires_grad=False)
        out = ficnn_graph(p, u.reshape(-1, 1), ficnn.layer_count, ficnn.output_activation)
        return out.reshape(*u.shape)

    return DivergenceSpec(
        "learned", generator, conjugate, (-math.inf, math.inf), dc.identity, ficnn=ficnn
    )


def recover_generator(spec: DivergenceSpec, v, bounds, grid_points=200_001):
    """Numerical biconjugate f(v) = max over a grid of u of {u v - f*(u)}."""
    grid = np.linspace(bounds[0], bounds[1], grid_points)
    grid = grid[spec.in_domain(grid)]
    fvals = spec.fstar(grid)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    return np.array([np.max(x * grid - fvals) for x in v])


# discrete distributions -------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigurationError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    def sample(self, n, rng):
        return rng.choice(self.probs.size, size=n, p=self.probs)


def exact_divergence_discrete(P: DiscreteDist, Q: DiscreteDist, spec: DivergenceSpec) -> float:
    """sum_x q(x) f(p(x)/q(x)); returns math.inf when the sum diverges."""
    p, q = P.probs, Q.probs
    if p.shape != q.shape:
        raise ConfigurationError("distributions have different supports")
    total = 0.0
    for px, qx in zip(p, q):
        if qx > 0 and px > 0:
            total += qx * float(spec.generator(px / qx))
        elif qx > 0:
            total += qx * spec.generator_at_zero
        elif px > 0:
            total += px * spec.generator_slope_at_inf
    return total


# Gaussian oracles -------------------------------------------------------


@dataclass(frozen=True)
class GaussianSpec:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ConfigurationError("standard deviation must be positive")

    def sample(self, n, rng):
        return rng.normal(self.mean, self.std, size=n)


def gaussian_kl_oracle(P: GaussianSpec, Q: GaussianSpec) -> float:
    return (
        math.log(Q.std / P.std)
        + (P.std**2 + (P.mean - Q.mean) ** 2) / (2 * Q.std**2)
        - 0.5
    )


def gaussian_oracle(name: str, P: GaussianSpec, Q: GaussianSpec) -> float:
    """D_f(P||Q) for two Gaussians: closed form for KL/RKL, quadrature otherwise."""
    if name == "KL":
        return gaussian_kl_oracle(P, Q)
    if name == "RKL":
        return gaussian_kl_oracle(Q, P)
    spec = closed_form(name)
    lo = min(P.mean - 12 * P.std, Q.mean - 12 * Q.std)
    hi = max(P.mean + 12 * P.std, Q.mean + 12 * Q.std)

    def integrand(x):
        px = stats.norm.pdf(x, P.mean, P.std)
        qx = stats.norm.pdf(x, Q.mean, Q.std)
        return qx * float(spec.generator(px / qx)) if qx > 0 else 0.0

    value, _ = integrate.quad(integrand, lo, hi, limit=200)
    return value


# variational estimate ---------------------------------------------------


def _as_rows(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def variational_terms(samples_P, samples_Q, reward, spec: DivergenceSpec):
    """Per-sample T(x) on P and f*(T(x)) on Q."""
    uP = reward_values(reward, _as_rows(samples_P), spec)
    uQ = reward_values(reward, _as_rows(samples_Q), spec)
    fQ = np.asarray(spec.fstar(uQ), dtype=float)
    if not np.all(np.isfinite(fQ)):
        bad = int(np.flatnonzero(~np.isfinite(fQ))[0])
        raise NumericError(f"non-finite conjugate value at sample {bad}")
    return uP, fQ


def variational_estimate(samples_P, samples_Q, reward, spec: DivergenceSpec) -> float:
    """mean_P T(x) - mean_Q f*(T(x)), a lower bound on D_f(P||Q)."""
    if len(samples_P) == 0 or len(samples_Q) == 0:
        raise ConfigurationError("both sample sets must be non-empty")
    uP, fQ = variational_terms(samples_P, samples_Q, reward, spec)
    return float(uP.mean() - fQ.mean())


def variational_standard_error(samples_P, samples_Q, reward, spec) -> float:
    uP, fQ = variational_terms(samples_P, samples_Q, reward, spec)
    return float(math.sqrt(uP.var(ddof=1) / uP.size + fQ.var(ddof=1) / fQ.size))
