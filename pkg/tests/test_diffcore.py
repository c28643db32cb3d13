import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgail import diffcore as dc
from fgail.diffcore import AdamState, ParamVector, adam_step, evaluate, finite_diff_check, gradients
from fgail.errors import ConfigurationError, NumericError
from fgail.nets import init_mlp, mlp_graph


def scalar(**kw):
    return ParamVector.from_arrays({k: np.array(float(v)) for k, v in kw.items()})


def test_evaluate_examples():
    assert evaluate(lambda p, _: p["x"] * p["x"], scalar(x=3)) == 9.0
    assert evaluate(lambda p, _: dc.relu(p["w"] * p["x"] + p["b"]), scalar(w=1, b=0, x=-2)) == 0.0
    assert evaluate(lambda p, _: dc.tanh(p["x"]), scalar(x=0)) == 0.0


def test_evaluate_deterministic():
    p = scalar(x=0.37)
    f = lambda q, _: dc.exp(dc.tanh(q["x"]) * 3.1)  # noqa: E731
    assert evaluate(f, p) == evaluate(f, p)


def test_evaluate_missing_segment_is_configuration_error():
    with pytest.raises(ConfigurationError):
        evaluate(lambda p, _: p["nope"], scalar(x=1))


def test_gradient_examples():
    assert gradients(lambda p, _: p["x"] * p["x"], scalar(x=3)).gradient[0] == pytest.approx(6.0)
    assert gradients(lambda p, _: dc.relu(p["u"]), scalar(u=-2)).gradient[0] == 0.0
    assert gradients(lambda p, _: dc.exp(p["u"] - 1.0), scalar(u=1)).gradient[0] == pytest.approx(1.0)


def test_relu_subgradient_at_zero_is_zero():
    assert gradients(lambda p, _: dc.relu(p["u"]), scalar(u=0)).gradient[0] == 0.0


def test_non_finite_gradient_names_segment():
    # finite value, but d/da log(0*a + tiny) = 0 * 1/tiny overflows to inf * 0 = nan
    with pytest.raises(NumericError) as info:
        gradients(lambda p, _: dc.log(p["a"] * 0.0 + 1e-320) + p["b"], scalar(a=1.0, b=1.0))
    assert "'a'" in str(info.value)


def test_finite_diff_quadratic():
    assert finite_diff_check(lambda p, _: (p["x"] * p["x"]) * 2.5 + p["x"], scalar(x=0.7)) < 1e-8


def test_finite_diff_two_layer_tanh_mlp(rng):
    net = init_mlp(rng, [3, 8, 8, 1], ("tanh", "tanh"))
    x = rng.normal(size=(5, 3))
    f = lambda p, xx: mlp_graph(p, xx, net.activations).sum()  # noqa: E731
    assert finite_diff_check(f, net.vector, x) < 1e-4


def test_finite_diff_eps_range():
    with pytest.raises(ConfigurationError):
        finite_diff_check(lambda p, _: p["x"], scalar(x=1), eps=1e-2)


def test_adam_first_step():
    p = scalar(w=0.0)
    new, state = adam_step(p, np.array([1.0]), AdamState.zeros(1, learning_rate=1e-3))
    assert new.values[0] == pytest.approx(-1e-3, rel=1e-6)
    assert state.step_count == 1


def test_adam_zero_gradient():
    p = scalar(w=0.5)
    new, state = adam_step(p, np.zeros(1), AdamState.zeros(1))
    assert new.values[0] == 0.5
    assert np.all(state.first_moment == 0) and np.all(state.second_moment == 0)
    assert state.step_count == 1


@given(st.floats(-10, 10).filter(lambda g: abs(g) > 1e-6))
def test_adam_ascend_equals_descend_negated(g):
    p = scalar(w=0.2)
    a, _ = adam_step(p, np.array([g]), AdamState.zeros(1), "ascend")
    d, _ = adam_step(p, np.array([-g]), AdamState.zeros(1), "descend")
    assert a.values[0] == d.values[0]


def test_adam_ascend_increases_linear_objective():
    p = scalar(w=0.0)
    state = AdamState.zeros(1, learning_rate=1e-3)
    c = 2.0
    for _ in range(5):
        before = c * p.values[0]
        p, state = adam_step(p, np.array([c]), state, "ascend")
        assert c * p.values[0] > before


def test_adam_zero_learning_rate():
    with pytest.raises(ConfigurationError):
        adam_step(scalar(w=0), np.ones(1), AdamState.zeros(1, learning_rate=0.0))


def test_param_vector_layout_covers_vector():
    pv = ParamVector.from_arrays({"a": np.zeros((2, 3)), "b": np.ones(4)})
    assert len(pv) == 10
    assert pv.segment_of(0) == "a" and pv.segment_of(9) == "b"
    assert np.array_equal(pv["a"], np.zeros((2, 3)))


def test_param_vector_rejects_non_finite():
    with pytest.raises((NumericError, ConfigurationError)):
        ParamVector.from_arrays({"a": np.array([1.0, math.nan])})


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_elementwise_gradients_match_finite_differences(a, b):
    f = lambda p, _: dc.softplus(p["a"]) * dc.sigmoid(p["b"]) + dc.tanh(p["a"] * p["b"])  # noqa: E731
    assert finite_diff_check(f, scalar(a=a, b=b)) < 1e-4
