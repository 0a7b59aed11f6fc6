import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revode.errors import ConfigurationError, DivergenceError
from revode.field_core import linear_field, mlp_field, zero_mlp_field
from revode.rk_solvers import (
    ButcherTableau,
    check_order_conditions,
    local_lipschitz_estimate,
    make_tableau,
    pullback,
    step,
    step_vjp,
    tableau_json,
    transfer_function,
)
from revode.analysis import fit_slope
from tests.conftest import ALL_TABLEAUX

RK4_R_MINUS_TENTH = -0.1 + 0.01 / 2 - 0.001 / 6 + 0.0001 / 24


def test_euler_tableau():
    tab = make_tableau("euler")
    assert tab.stages == 1
    assert tab.order == 1
    assert tab.a.tolist() == [[0.0]]
    assert tab.b.tolist() == [1.0]
    assert tab.c.tolist() == [0.0]
    assert not tab.adaptive


def test_rk4_tableau():
    tab = make_tableau("rk4")
    assert tab.stages == 4
    np.testing.assert_allclose(tab.b, [1 / 6, 1 / 3, 1 / 3, 1 / 6], rtol=0, atol=1e-16)
    np.testing.assert_allclose(tab.c, [0, 0.5, 0.5, 1])


def test_bosh3_is_embedded():
    tab = make_tableau("bosh3")
    assert (tab.stages, tab.order, tab.embedded_order) == (4, 3, 2)
    assert tab.adaptive


def test_unknown_tableau():
    with pytest.raises(ConfigurationError):
        make_tableau("dopri5")


def test_tableau_rejects_implicit_coefficients():
    with pytest.raises(ConfigurationError):
        ButcherTableau("bad", a=[[0.5]], b=[1.0], c=[0.5], order=1)


@pytest.mark.parametrize("name", ALL_TABLEAUX)
def test_tableau_invariants(name):
    tab = make_tableau(name)
    assert np.all(np.triu(tab.a) == 0.0)
    assert np.max(np.abs(tab.a.sum(axis=1) - tab.c)) <= 1e-14
    assert abs(tab.b.sum() - 1.0) <= 1e-14


@pytest.mark.parametrize("name", ALL_TABLEAUX)
def test_order_conditions_match_advertised_order(name):
    tab = make_tableau(name)
    assert check_order_conditions(tab) == tab.order
    if tab.adaptive:
        assert check_order_conditions(tab, embedded=True) == tab.embedded_order


def test_euler_step_on_linear_field():
    out = step(linear_field(-1.0), make_tableau("euler"), 0.0, np.array([1.0]), 0.1)
    assert out.increment == pytest.approx([-0.1])


def test_rk4_step_on_linear_field():
    out = step(linear_field(-1.0), make_tableau("rk4"), 0.0, np.array([1.0]), 0.1)
    assert out.increment[0] == pytest.approx(-0.09516250, abs=1e-8)
    assert out.increment[0] == pytest.approx(RK4_R_MINUS_TENTH, abs=1e-15)


@pytest.mark.parametrize("name", ALL_TABLEAUX)
@pytest.mark.parametrize("h", [0.1, -0.1])
def test_zero_field_gives_zero_increment(name, h):
    out = step(zero_mlp_field(2), make_tableau(name), 0.0, np.array([1.0, -2.0]), h)
    assert not out.increment.any()


def test_error_estimate_only_for_embedded_tableaux(small_mlp):
    y = np.array([0.2, 0.1])
    assert step(small_mlp, make_tableau("rk4"), 0.0, y, 0.1).error is None
    assert step(small_mlp, make_tableau("bosh3"), 0.0, y, 0.1).error.shape == (2,)


def test_transfer_function_basics():
    assert transfer_function(make_tableau("euler"), -0.37) == pytest.approx(-0.37)
    for name in ALL_TABLEAUX:
        assert transfer_function(make_tableau(name), 0.0) == 0.0
    assert transfer_function(make_tableau("rk4"), -0.1) == pytest.approx(-0.09516250, abs=1e-8)
    values = transfer_function(make_tableau("euler"), np.array([-1.0, -2.0]))
    np.testing.assert_array_equal(values, [-1.0, -2.0])


@pytest.mark.parametrize("name", ALL_TABLEAUX)
def test_step_on_linear_field_equals_transfer_function(name):
    tab = make_tableau(name)
    rng = np.random.default_rng(11)
    for _ in range(50):
        h, alpha, y = rng.uniform(-0.5, 0.5), rng.uniform(-3, 1), rng.normal(size=1)
        out = step(linear_field(alpha), tab, 0.0, y, h)
        expected = transfer_function(tab, h * alpha) * y
        np.testing.assert_allclose(out.increment, expected, rtol=1e-13, atol=1e-300)


@pytest.mark.parametrize("name", ALL_TABLEAUX)
def test_local_error_order(name):
    tab = make_tableau(name)
    field = linear_field(-1.0)
    hs = [2.0 ** -k for k in range(4, 11)]
    errors = [abs(1.0 + step(field, tab, 0.0, np.array([1.0]), h).increment[0] - np.exp(-h)) for h in hs]
    assert fit_slope(hs, errors) == pytest.approx(tab.order + 1, abs=0.25)


def test_step_vjp_zero_cotangent(small_mlp):
    g_y, g_theta = step_vjp(small_mlp, make_tableau("rk4"), 0.0, np.array([0.1, 0.2]), 0.1, np.zeros(2))
    assert not g_y.any()
    assert not g_theta.any()


def test_euler_step_vjp_is_scaled_field_vjp(small_mlp):
    from revode.field_core import vjp

    y, v, h = np.array([0.3, -0.4]), np.array([1.0, 2.0]), 0.05
    g_y, g_theta = step_vjp(small_mlp, make_tableau("euler"), 0.2, y, h, v)
    f_y, f_theta = vjp(small_mlp, 0.2, y, v)
    np.testing.assert_allclose(g_y, h * f_y, rtol=1e-14)
    np.testing.assert_allclose(g_theta, h * f_theta, rtol=1e-14)


@pytest.mark.parametrize("name", ALL_TABLEAUX)
@pytest.mark.parametrize("h", [0.1, -0.1])
def test_step_vjp_matches_finite_differences(name, h):
    tab = make_tableau(name)
    rng = np.random.default_rng(5)
    field = mlp_field(2, 8, 3)
    t, y, v = rng.normal(), rng.normal(size=2), rng.normal(size=2)
    g_y, g_theta = step_vjp(field, tab, t, y, h, v)
    eps = 1e-6

    def phi(f, yy):
        return v @ step(f, tab, t, yy, h).increment

    fd_y = np.array([(phi(field, y + eps * e) - phi(field, y - eps * e)) / (2 * eps) for e in np.eye(2)])
    theta = field.params.values
    fd_theta = np.array([
        (phi(field.with_params(field.params.with_values(theta + eps * e)), y)
         - phi(field.with_params(field.params.with_values(theta - eps * e)), y)) / (2 * eps)
        for e in np.eye(theta.size)
    ])
    assert np.max(np.abs(g_y - fd_y)) / np.max(np.abs(fd_y)) < 1e-5
    assert np.max(np.abs(g_theta - fd_theta)) / np.max(np.abs(fd_theta)) < 1e-5


def test_pullback_reuses_one_sweep(small_mlp):
    tab = make_tableau("rk4")
    y = np.array([0.1, 0.2])
    out, apply = pullback(small_mlp, tab, 0.0, y, 0.1)
    assert np.array_equal(out.increment, step(small_mlp, tab, 0.0, y, 0.1).increment)
    assert len(out.stages) == tab.stages
    v = np.array([1.0, -1.0])
    for got, want in zip(apply(v), step_vjp(small_mlp, tab, 0.0, y, 0.1, v)):
        assert np.array_equal(got, want)


def test_divergence_reports_stage():
    field = linear_field(1e308)
    with pytest.raises(DivergenceError) as info:
        step(field, make_tableau("rk4"), 0.0, np.array([10.0]), 1.0)
    assert info.value.stage is not None


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), h=st.floats(1e-3, 0.2))
def test_lipschitz_constant_is_finite(seed, h):
    rng = np.random.default_rng(seed)
    field = mlp_field(2, 10, seed)
    pairs = [(rng.normal(size=2), rng.normal(size=2)) for _ in range(10)]
    c = local_lipschitz_estimate(field, make_tableau("rk4"), 0.0, h, pairs)
    assert np.isfinite(c)
    assert c < 50.0


def test_tableau_json_is_serializable():
    data = tableau_json(make_tableau("bosh3"))
    assert json.loads(json.dumps(data))["embedded_order"] == 2
