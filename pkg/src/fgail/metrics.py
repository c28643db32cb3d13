"""Diagnostics of the conjugate's input distribution (Fig. 2, Table 4) and CSV export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .conjugate import FicnnParams, ScalarFunction, estimate_min_gap
from .errors import ConfigurationError, NumericError

DEFAULT_BANDWIDTH = 0.3
GRID_POINTS = 512
ZERO_GAP_TOLERANCE = 2e-3


@dataclass(frozen=True, eq=False)
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float


def kde_grid(samples, bandwidth=DEFAULT_BANDWIDTH, points=GRID_POINTS):
    """Uniform grid over [min - 4h, max + 4h]."""
    x = np.asarray(samples, dtype=float)
    return np.linspace(x.min() - 4 * bandwidth, x.max() + 4 * bandwidth, points)


def kde(samples, bandwidth=DEFAULT_BANDWIDTH, grid=None) -> DensityCurve:
    """Gaussian kernel density estimate evaluated on ``grid``."""
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size == 0:
        raise ConfigurationError("kde needs at least one sample")
    if not bandwidth > 0:
        raise ConfigurationError("bandwidth must be positive")
    grid = kde_grid(x, bandwidth) if grid is None else np.asarray(grid, dtype=float)
    z = (grid[:, None] - np.sort(x)[None, :]) / bandwidth
    density = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * bandwidth * math.sqrt(2 * math.pi))
    return DensityCurve(grid, density, float(bandwidth))


def _as_function(fstar):
    if isinstance(fstar, (FicnnParams, ScalarFunction)):
        return fstar
    if callable(fstar):
        return ScalarFunction(fstar, lambda u: _numeric_derivative(fstar, u))
    raise ConfigurationError("expected a conjugate evaluator")


def _numeric_derivative(f, u, h=1e-6):
    u = np.asarray(u, dtype=float)
    return (np.asarray(f(u + h)) - np.asarray(f(u - h))) / (2 * h)


def find_zero_gap_point(fstar, bounds=None, initial_u=0.0, step_size=0.05, iterations=200,
                        grid_points=GRID_POINTS, tolerance=ZERO_GAP_TOLERANCE) -> float:
    """Minimiser ũ of f*(u) − u by Alg. 2 descent plus grid refinement.

    Where the gap is flat at zero (f* touching u on an interval) the descent
    endpoint is returned. Raises if the residual gap exceeds ``tolerance``,
    which means the conjugate was never shifted.
    """
    est = estimate_min_gap(
        _as_function(fstar), initial_u, step_size, iterations, bounds,
        grid_points if bounds is not None else 0,
    )
    if abs(est.delta) > tolerance:
        raise NumericError(
            f"residual gap {est.delta:.3g} at u={est.argmin_u:.4g} exceeds {tolerance}; "
            "the conjugate has not been shifted to zero gap"
        )
    return est.argmin_u


@dataclass(frozen=True)
class InputStats:
    mean: float
    std: float
    zero_gap_point: float
    delta_u: float
    combined: float
    count: int = 0

    @classmethod
    def from_values(cls, mean, std, zero_gap_point, count=0):
        if std < 0:
            raise ConfigurationError("standard deviation must be non-negative")
        delta_u = abs(zero_gap_point - mean)
        return cls(float(mean), float(std), float(zero_gap_point), float(delta_u),
                   float(delta_u + std), int(count))


def input_stats(samples, zero_gap_point, min_samples=30) -> InputStats:
    """ū, σ (population standard deviation), Δ_u = |ũ − ū| and Δ_u + σ."""
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size < min_samples:
        raise ConfigurationError(f"input_stats needs at least {min_samples} samples, got {x.size}")
    return InputStats.from_values(x.mean(), x.std(), zero_gap_point, x.size)


# CSV --------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


STATS_HEADER = ("epoch", "mean", "std", "u_tilde", "delta_u", "combined", "count")
EPOCH_HEADER = ("epoch", "objective_value", "mean_env_return", "normalized_return", "gap_delta",
                "entropy", "trpo_accepted", "mean_kl")


def write_stats(path, rows):
    """``rows``: iterable of (epoch, InputStats)."""
    write_csv(path, STATS_HEADER, [
        (e, s.mean, s.std, s.zero_gap_point, s.delta_u, s.combined, s.count) for e, s in rows
    ])


def write_density(path, curve: DensityCurve):
    write_csv(path, ("grid", "density"), zip(curve.grid, curve.density))


def fstar_curve(fstar_np, bounds, points=GRID_POINTS):
    u = np.linspace(bounds[0], bounds[1], points)
    f = np.asarray(fstar_np(u), dtype=float)
    return u, f, f - u


def write_fstar_curve(path, fstar_np, bounds, points=GRID_POINTS):
    u, f, gap = fstar_curve(fstar_np, bounds, points)
    write_csv(path, ("u", "fstar_u", "gap"), zip(u, f, gap))


def write_epochs(path, reports):
    write_csv(path, EPOCH_HEADER, [
        (r.epoch, r.objective_value, r.mean_env_return, r.normalized_return, r.gap_delta,
         r.entropy, r.trpo_accepted, r.mean_kl) for r in reports
    ])
