import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgail.conjugate import ScalarFunction, init_ficnn, zero_gap
from fgail.errors import ConfigurationError, NumericError
from fgail.metrics import (
    InputStats,
    find_zero_gap_point,
    fstar_curve,
    input_stats,
    kde,
    read_csv,
    write_csv,
    write_fstar_curve,
    write_stats,
)


def test_kde_examples():
    c = kde([0.0, 0.0], 0.3, grid=np.array([0.0, 3.0]))
    assert c.density[0] == pytest.approx(1 / (0.3 * math.sqrt(2 * math.pi)))
    assert c.density[1] < 1e-10
    one = kde([1.5])
    assert np.trapezoid(one.density, one.grid) == pytest.approx(1.0, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40))
def test_kde_properties(xs):
    c = kde(xs)
    assert np.all(c.density >= 0)
    assert 0.95 <= np.trapezoid(c.density, c.grid) <= 1.0 + 1e-9
    p = kde(list(reversed(xs)), grid=c.grid)
    assert np.allclose(p.density, c.density)


def test_kde_errors():
    with pytest.raises(ConfigurationError):
        kde([])
    with pytest.raises(ConfigurationError):
        kde([1.0], bandwidth=0)


def test_zero_gap_point_examples():
    assert find_zero_gap_point(lambda u: np.exp(np.asarray(u) - 1), iterations=2000) == pytest.approx(1.0, abs=1e-3)
    shifted = ScalarFunction(lambda u: (np.asarray(u) + 0.125) ** 2 + 0.125,
                             lambda u: 2 * (np.asarray(u) + 0.125))
    assert find_zero_gap_point(shifted, (-2, 2)) == pytest.approx(0.375, abs=1e-6)
    relu = lambda u: np.maximum(0, u)  # noqa: E731
    assert find_zero_gap_point(relu, initial_u=0.7) == pytest.approx(0.7)  # flat region: endpoint


def test_zero_gap_point_rejects_unshifted():
    with pytest.raises(NumericError):
        find_zero_gap_point(lambda u: np.asarray(u) ** 2, (-2, 2))


def test_zero_gap_point_on_shifted_ficnn():
    f = init_ficnn(np.random.default_rng(2), 3, 40)
    g, _, b = zero_gap(f, (-3.0, 3.0))
    u = find_zero_gap_point(g, b)
    from fgail.conjugate import eval_fstar
    assert abs(eval_fstar(g, u) - u) <= 2e-3


def test_input_stats_examples():
    s = InputStats.from_values(0.7, 0.1, 0.5)
    assert s.delta_u == pytest.approx(0.2) and s.combined == pytest.approx(0.3)
    z = input_stats(np.full(40, 0.25), 0.25)
    assert z.delta_u == 0 and z.std == 0 and z.combined == 0
    with pytest.raises(ConfigurationError):
        input_stats(np.zeros(10), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=30, max_size=60), st.floats(-5, 5), st.floats(-100, 100))
def test_input_stats_translation_invariant(xs, ut, shift):
    a = input_stats(np.array(xs), ut)
    b = input_stats(np.array(xs) + shift, ut + shift)
    assert b.delta_u == pytest.approx(a.delta_u, abs=1e-9)
    assert b.std == pytest.approx(a.std, abs=1e-9)


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "x.csv", ("a", "b"), [(1, 0.1), (2, True)])
    header, rows = read_csv(tmp_path / "x.csv")
    assert header == ["a", "b"] and rows == [["1", "0.1"], ["2", "true"]]
    write_stats(tmp_path / "s.csv", [(3, InputStats.from_values(0.7, 0.1, 0.5, 40))])
    header, rows = read_csv(tmp_path / "s.csv")
    assert header[:6] == ["epoch", "mean", "std", "u_tilde", "delta_u", "combined"]
    assert float(rows[0][5]) == pytest.approx(0.3)


def test_fstar_curve_columns(tmp_path):
    u, f, gap = fstar_curve(lambda x: np.asarray(x) ** 2, (-1, 1), 5)
    assert np.allclose(gap, f - u)
    write_fstar_curve(tmp_path / "f.csv", lambda x: np.asarray(x) ** 2, (-1, 1))
    header, rows = read_csv(tmp_path / "f.csv")
    assert header == ["u", "fstar_u", "gap"] and len(rows) == 512
