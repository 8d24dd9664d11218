import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssmcast import diffmath as dm

floats = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def vec(n):
    return arrays(np.float64, (n,), elements=floats)


# --- hand-checked values -------------------------------------------------


def test_sum_of_squares():
    v, g = dm.value_and_gradient(lambda p: dm.sum_(dm.mul(p["w"], p["w"])), dm.ParameterSet({"w": [1.0, 2.0]}))
    assert v == 5.0
    assert g["w"].tolist() == [2.0, 4.0]


def test_tanh_at_zero():
    v, g = dm.value_and_gradient(lambda p: dm.sum_(dm.tanh(p["w"])), dm.ParameterSet({"w": [0.0]}))
    assert v == 0.0
    assert g["w"].tolist() == [1.0]


def test_gaussian_logpdf_values():
    assert dm.gaussian_diag_logpdf(np.zeros(1), np.zeros(1), np.ones(1)) == pytest.approx(-0.9189385, abs=1e-7)
    assert dm.gaussian_diag_logpdf(np.ones(1), np.zeros(1), np.ones(1)) == pytest.approx(-1.4189385, abs=1e-7)
    both = dm.gaussian_diag_logpdf(np.array([1.0, 2.0]), np.zeros(2), np.array([1.0, 4.0]))
    one = dm.gaussian_diag_logpdf(np.array([1.0]), np.zeros(1), np.array([1.0]))
    two = dm.gaussian_diag_logpdf(np.array([2.0]), np.zeros(1), np.array([4.0]))
    assert both == pytest.approx(one + two, abs=1e-14)
    # closed form by hand for the second coordinate
    assert two == pytest.approx(-0.5 * (math.log(2 * math.pi * 4.0) + 1.0), abs=1e-14)


def test_kl_values():
    m, v = np.array([0.3, -1.0]), np.array([0.5, 2.0])
    assert dm.kl_diag_gaussian(m, v, m, v) == pytest.approx(0.0, abs=1e-15)
    assert dm.kl_diag_gaussian(np.ones(1), np.ones(1), np.zeros(1), np.ones(1)) == pytest.approx(0.5)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(3)
    m1, m2 = rng.normal(size=8), rng.normal(size=8)
    v1, v2 = np.exp(rng.normal(size=8) * 0.5), np.exp(rng.normal(size=8) * 0.5)
    n = 10**6
    z = m1 + np.sqrt(v1) * rng.standard_normal((n, 8))
    logq = dm.gaussian_diag_logpdf(z, m1, v1)
    logp = dm.gaussian_diag_logpdf(z, m2, v2)
    d = logq - logp
    se = d.std(ddof=1) / math.sqrt(n)
    assert abs(d.mean() - dm.kl_diag_gaussian(m1, v1, m2, v2)) < 3 * se


def test_reparam_sample():
    mean, var = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    np.testing.assert_array_equal(dm.reparam_sample(mean, var, np.zeros(2)), mean)
    np.testing.assert_array_equal(dm.reparam_sample(mean, np.zeros(2), np.array([5.0, -7.0])), mean)
    noise = np.random.default_rng(0).standard_normal((200_000, 2))
    s = dm.reparam_sample(mean, var, noise)
    np.testing.assert_allclose(s.mean(0), mean, atol=0.02)
    np.testing.assert_allclose(s.var(0), var, rtol=0.02)


def test_domain_errors():
    with pytest.raises(dm.DomainError):
        dm.gaussian_diag_logpdf(np.zeros(1), np.zeros(1), np.zeros(1))
    with pytest.raises(dm.DomainError):
        dm.kl_diag_gaussian(np.zeros(1), -np.ones(1), np.zeros(1), np.ones(1))
    with pytest.raises(dm.DomainError):
        dm.reparam_sample(np.zeros(1), -np.ones(1), np.zeros(1))


def test_nonfinite_names_primitive():
    with pytest.raises(dm.NonFiniteError) as e:
        dm.value_and_gradient(lambda p: dm.sum_(dm.log(p["w"])), dm.ParameterSet({"w": [-1.0]}))
    assert e.value.primitive == "log"
    assert "'log'" in str(e.value)


def test_unsupported_primitive():
    trace = dm.DiffTrace()
    with pytest.raises(dm.UnsupportedPrimitiveError):
        trace.apply("erf", (trace.leaf([1.0]),))


def test_mixed_traces_rejected():
    a, b = dm.DiffTrace().leaf([1.0]), dm.DiffTrace().leaf([1.0])
    with pytest.raises(ValueError):
        a + b


# --- finite-difference checker -------------------------------------------


def test_fd_linear_exact():
    w = np.array([[1.0, -2.0], [0.5, 3.0]])
    rep = dm.finite_difference_check(lambda p: dm.sum_(dm.matmul(p["a"], w)), dm.ParameterSet({"a": np.ones((3, 2))}))
    assert rep.passed and rep.worst < 1e-9


def test_fd_exp_passes():
    rep = dm.finite_difference_check(lambda p: dm.sum_(dm.exp(p["w"])), dm.ParameterSet({"w": [0.1, -0.4, 1.2]}),
                                     tolerance=1e-5)
    assert rep.passed


def test_fd_flags_corrupted_gradient():
    f = lambda p: dm.sum_(dm.mul(p["a"], p["b"]))  # noqa: E731
    params = dm.ParameterSet({"a": [1.0, 2.0], "b": [3.0, 4.0]})
    _, g = dm.value_and_gradient(f, params)
    bad = g.updated({"b": g["b"] + np.array([0.0, 0.5])})
    rep = dm.finite_difference_check(f, params, gradient=bad)
    assert not rep.passed
    assert rep.flagged_names() == ["b"]


def _all_primitives(p):
    a, b, M = p["a"], p["b"], p["M"]
    S = dm.add(dm.matmul(M, dm.transpose(M)), 2.0 * np.eye(3))
    parts = [
        dm.sum_(dm.div(a, dm.add(dm.exp(b), 1.0))),
        dm.sum_(dm.sigmoid(a) * dm.softplus(b)),
        dm.sum_(dm.sqrt(dm.add(dm.mul(a, a), 1.0))),
        dm.sum_(dm.clamp_min(b, -0.3)),
        dm.sum_(dm.neg(dm.log(dm.add(dm.mul(b, b), 0.5)))),
        dm.sum_(dm.slice_(dm.concat([a, b], axis=0), slice(1, 4))),
        dm.sum_(dm.mul(dm.broadcast(dm.reshape(a, (1, 3)), (2, 3)), 0.7)),
        dm.logdet(S),
        dm.sum_(dm.solve(S, dm.reshape(b, (3, 1)))),
        dm.sum_(dm.tanh(dm.sub(a, b)), axis=0, keepdims=True),
    ]
    out = parts[0]
    for q in parts[1:]:
        out = dm.add(out, dm.sum_(q))
    return out


def test_every_primitive_gradient():
    rng = np.random.default_rng(1)
    params = dm.ParameterSet({"a": rng.normal(size=3), "b": rng.normal(size=3), "M": rng.normal(size=(3, 3))})
    rep = dm.finite_difference_check(_all_primitives, params, tolerance=1e-6)
    assert rep.passed, rep.flagged


# --- properties ----------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(vec(4), vec(4))
def test_product_rule(a, b):
    _, g = dm.value_and_gradient(lambda p: dm.sum_(dm.mul(dm.tanh(p["a"]), p["b"])),
                                 dm.ParameterSet({"a": a, "b": b}))
    np.testing.assert_allclose(g["a"], (1 - np.tanh(a) ** 2) * b, atol=1e-12)
    np.testing.assert_allclose(g["b"], np.tanh(a), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(vec(3))
def test_eager_equals_traced(w):
    f = lambda p: dm.sum_(dm.softplus(dm.mul(p["w"], 1.5)) - dm.sigmoid(p["w"]))  # noqa: E731
    v, _ = dm.value_and_gradient(f, dm.ParameterSet({"w": w}))
    assert v == dm.evaluate(f, {"w": w})


@settings(max_examples=25, deadline=None)
@given(vec(3))
def test_gradient_is_linear_in_output(a):
    f = lambda p: dm.sum_(dm.mul(dm.tanh(p["a"]), p["a"]))  # noqa: E731
    g1 = dm.value_and_gradient(f, dm.ParameterSet({"a": a}))[1]["a"]
    g3 = dm.value_and_gradient(lambda p: dm.mul(3.0, f(p)), dm.ParameterSet({"a": a}))[1]["a"]
    np.testing.assert_allclose(g3, 3.0 * g1, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(vec(5))
def test_replay_bit_identical(w):
    trace = dm.DiffTrace()
    leaf = trace.leaf(w)
    out = dm.sum_(dm.mul(dm.tanh(leaf), dm.exp(dm.mul(leaf, 0.3))))
    replayed = trace.replay()
    for a, b in zip(trace.values, replayed):
        assert np.array_equal(a, b)
    assert replayed[out.index].tobytes() == out.value.tobytes()


def test_unused_parameter_gets_zero_gradient():
    _, g = dm.value_and_gradient(lambda p: dm.sum_(p["a"]), dm.ParameterSet({"a": [1.0], "b": [[1.0, 2.0]]}))
    np.testing.assert_array_equal(g["b"], np.zeros((1, 2)))


def test_parameter_set_is_immutable():
    ps = dm.ParameterSet({"a": [1.0]})
    with pytest.raises(ValueError):
        ps["a"][0] = 2.0
    assert ps.updated({"a": [2.0]})["a"][0] == 2.0 and ps["a"][0] == 1.0
