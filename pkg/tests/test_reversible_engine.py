import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revode.analysis import fit_slope
from revode.baseline_backprop import full_tape_backprop
from revode.errors import ConfigurationError, ReversibilityBreakdownError
from revode.field_core import linear_field, lorenz_field, mlp_field, zero_mlp_field
from revode.instrumentation import Counters, MemoryLedger
from revode.losses import LinearLoss, TrajectoryLoss, terminal_loss
from revode.reversible_engine import (
    AdjointState,
    Coupling,
    ReversibleState,
    backward_step,
    forward_step,
    reversible_backprop,
    reversible_gradient,
    solve_forward,
)
from revode.rk_solvers import make_tableau, step
from revode.step_control import AdaptiveSchedule, ControllerConfig, FixedSchedule
from tests.conftest import ALL_TABLEAUX, COUPLINGS, observation_problem


def relative(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


@pytest.mark.parametrize("lam", [0.0, -0.5, 1.5])
def test_coupling_bounds(lam):
    with pytest.raises(ConfigurationError):
        Coupling(lam)


def test_coupling_marks_lambda_one_marginal():
    assert Coupling(1.0).marginal
    assert not Coupling(0.99).marginal


def test_initial_state_duplicates_y0():
    s = ReversibleState.initial(0.0, [1.0, 2.0])
    assert np.array_equal(s.y, s.z)
    assert s.y is not s.z
    assert s.n == 0


def test_forward_step_hand_example():
    s = ReversibleState.initial(0.0, [1.0])
    nxt = forward_step(s, linear_field(-1.0), make_tableau("euler"), 0.1, 0.99)
    assert nxt.y[0] == pytest.approx(0.9, abs=1e-15)
    assert nxt.z[0] == pytest.approx(0.91, abs=1e-15)
    assert nxt.t == pytest.approx(0.1)
    assert nxt.n == 1


def test_backward_step_inverts_hand_example():
    s = ReversibleState(0.1, np.array([0.9]), np.array([0.91]), 1)
    prev = backward_step(s, linear_field(-1.0), make_tableau("euler"), 0.1, 0.99)
    assert prev.y[0] == pytest.approx(1.0, abs=1e-12)
    assert prev.z[0] == pytest.approx(1.0, abs=1e-12)
    assert prev.n == 0


@pytest.mark.parametrize("lam", [0.5, 0.99, 1.0])
def test_zero_field_is_a_fixed_point(lam):
    s = ReversibleState.initial(0.0, [1.0, -1.0])
    field = zero_mlp_field(2)
    for _ in range(5):
        s = forward_step(s, field, make_tableau("rk4"), 0.1, lam)
    np.testing.assert_array_equal(s.y, [1.0, -1.0])
    np.testing.assert_array_equal(s.z, [1.0, -1.0])


def test_forward_step_requires_positive_h():
    s = ReversibleState.initial(0.0, [1.0])
    with pytest.raises(ConfigurationError):
        forward_step(s, linear_field(-1.0), make_tableau("euler"), -0.1)


@settings(max_examples=60, deadline=None)
@given(
    name=st.sampled_from(ALL_TABLEAUX),
    lam=st.sampled_from(COUPLINGS),
    h=st.floats(1e-3, 1e-1),
    seed=st.integers(0, 2**16),
)
def test_single_step_round_trip(name, lam, h, seed):
    rng = np.random.default_rng(seed)
    field = mlp_field(3, 10, seed)
    tab = make_tableau(name)
    s = ReversibleState(0.2, rng.normal(size=3), rng.normal(size=3), 4)
    back = backward_step(forward_step(s, field, tab, h, lam), field, tab, h, lam, t_prev=s.t)
    assert relative(back.stacked(), s.stacked()) <= 1e-12


@pytest.mark.parametrize("lam", COUPLINGS)
def test_long_run_reconstruction_drift(lam):
    field = mlp_field(2, 10, 0)
    tab = make_tableau("rk4")
    record = FixedSchedule(0.0, 1.0, 1000).record()
    s0 = ReversibleState.initial(0.0, [0.5, -0.3])
    s = s0
    for n in range(1000):
        s = forward_step(s, field, tab, float(record.steps[n]), lam)
    for n in range(999, -1, -1):
        s = backward_step(s, field, tab, float(record.steps[n]), lam, t_prev=float(record.times[n]))
    assert np.linalg.norm(s.stacked() - s0.stacked()) / np.linalg.norm(s0.stacked()) <= 1e-10


def test_solve_forward_single_step_equals_forward_step(small_mlp):
    tab = make_tableau("rk4")
    sol = solve_forward([0.1, 0.2], small_mlp, tab, FixedSchedule(0.0, 0.1, 1), 0.99)
    direct = forward_step(ReversibleState.initial(0.0, [0.1, 0.2]), small_mlp, tab, 0.1, 0.99)
    assert np.array_equal(sol.terminal.y, direct.y)
    assert np.array_equal(sol.terminal.z, direct.z)


def test_terminal_observation_sees_y_n(small_mlp):
    schedule = FixedSchedule(0.0, 1.0, 20)
    sol = solve_forward([0.1, 0.2], small_mlp, make_tableau("rk4"), schedule, 0.99, terminal_loss(1.0, 2), keep_snapshots=True)
    assert sol.loss_value == pytest.approx(np.sum(sol.terminal.y), rel=1e-15)
    assert len(sol.snapshots) == 1
    np.testing.assert_array_equal(sol.snapshots[0][1], sol.terminal.y)


def test_solve_forward_counts_and_memory(small_mlp):
    counters = Counters()
    sol = solve_forward([0.1, 0.2], small_mlp, make_tableau("rk4"), FixedSchedule(0.0, 1.0, 30), 0.99, counters=counters)
    assert sol.counters.step_evals_forward == 60
    assert sol.counters.n_steps == 30
    assert sol.counters.stored_state_peak == 2


def test_observations_outside_interval_are_rejected(small_mlp):
    loss = LinearLoss([2.0], np.ones(2))
    with pytest.raises(ConfigurationError):
        solve_forward([0.0, 0.0], small_mlp, make_tableau("rk4"), FixedSchedule(0.0, 1.0, 10), 0.99, loss)


def test_fixed_grid_inherits_base_order():
    field = linear_field(-1.0)
    hs = [2.0 ** -k for k in range(3, 7)]
    errors = []
    for h in hs:
        sol = solve_forward([1.0], field, make_tableau("rk4"), FixedSchedule.from_step_size(0.0, 1.0, h), 0.999)
        errors.append(abs(sol.terminal.y[0] - np.exp(-1.0)))
    assert fit_slope(hs, errors) == pytest.approx(4.0, abs=0.3)


def test_zero_seed_gives_zero_adjoint(small_mlp):
    tab = make_tableau("rk4")
    record = FixedSchedule(0.0, 1.0, 10).record()
    sol = solve_forward([0.1, 0.2], small_mlp, tab, FixedSchedule(0.0, 1.0, 10), 0.99)
    adj, initial = reversible_backprop(sol.terminal, None, small_mlp, tab, record, 0.99)
    assert not adj.theta_bar.any()
    assert not adj.y_bar.any()
    assert not adj.z_bar.any()
    np.testing.assert_allclose(initial.y, [0.1, 0.2], atol=1e-13)


def test_adjoint_state_initial_gradient():
    adj = AdjointState(np.array([1.0]), np.array([2.0]), np.zeros(0))
    assert adj.initial_gradient.tolist() == [3.0]


def test_one_step_euler_linear_matches_full_tape():
    field = linear_field(-1.0)
    tab = make_tableau("euler")
    schedule = FixedSchedule(0.0, 0.1, 1)
    loss = LinearLoss([0.1], np.ones(1))
    rev = reversible_gradient([1.0], field, tab, schedule, 0.99, loss)
    tape = full_tape_backprop([1.0], field, tab, schedule, loss, 0.99)
    np.testing.assert_allclose(rev.y0_bar, tape.y0_bar, rtol=1e-12)
    np.testing.assert_allclose(rev.theta_bar, tape.theta_bar, rtol=1e-12)
    # y1 = y0 + hα·y0 regardless of λ, so dL/dy0 = 1 + hα
    assert rev.y0_bar[0] == pytest.approx(0.9, abs=1e-14)


@pytest.mark.parametrize("name", ALL_TABLEAUX)
def test_reversible_gradient_matches_full_tape(name):
    field, y0, schedule, loss = observation_problem(n_steps=40, n_obs=4, seed=3)
    tab = make_tableau(name)
    rev = reversible_gradient(y0, field, tab, schedule, 0.99, loss)
    tape = full_tape_backprop(y0, field, tab, schedule, loss, 0.99)
    assert rev.loss == pytest.approx(tape.loss, rel=1e-12)
    assert relative(rev.theta_bar, tape.theta_bar) <= 1e-8
    assert relative(rev.y0_bar, tape.y0_bar) <= 1e-8


def test_reversible_gradient_matches_finite_differences():
    field, y0, schedule, loss = observation_problem(n_steps=100, n_obs=10, seed=1)
    tab = make_tableau("rk4")
    rev = reversible_gradient(y0, field, tab, schedule, 0.99, loss)
    theta = field.params.values
    eps = 1e-6
    fd = np.zeros(12)
    for i in range(12):
        e = np.zeros_like(theta)
        e[i] = eps
        plus = solve_forward(y0, field.with_params(field.params.with_values(theta + e)), tab, schedule, 0.99, loss)
        minus = solve_forward(y0, field.with_params(field.params.with_values(theta - e)), tab, schedule, 0.99, loss)
        fd[i] = (plus.loss_value - minus.loss_value) / (2 * eps)
    assert relative(rev.theta_bar[:12], fd) <= 1e-4


@pytest.mark.parametrize("n_steps", [100, 1000, 10_000])
def test_backprop_work_and_memory_counters(n_steps):
    field, y0, schedule, loss = observation_problem(n_steps=n_steps, n_obs=5)
    result = reversible_gradient(y0, field, make_tableau("rk4"), schedule, 0.99, loss)
    c = result.counters
    assert c.step_evals_forward == 2 * n_steps
    assert c.step_evals_backward == 2 * n_steps
    assert c.vjp_evals == 2 * n_steps
    assert c.stored_state_peak == 2
    assert c.state_vector_peak == 4


def test_forward_solve_holds_one_state_pair():
    field, y0, schedule, loss = observation_problem(n_steps=200)
    sol = solve_forward(y0, field, make_tableau("midpoint"), schedule, 0.99, loss)
    assert sol.counters.stored_state_peak == 2
    assert sol.counters.state_vector_peak == 2


def test_memory_ledger_sums_live_entries():
    counters = Counters()
    ledger = MemoryLedger(counters)
    ledger.hold("state", 2, 2)
    ledger.hold("adjoint", 0, 2)
    ledger.hold("tape", 5, 10)
    assert (counters.stored_state_peak, counters.state_vector_peak) == (7, 14)
    ledger.release("tape")
    ledger.replace("state", 2, 2)
    assert (ledger.checkpoints, ledger.vectors) == (2, 4)
    assert (counters.stored_state_peak, counters.state_vector_peak) == (7, 14)
    with pytest.raises(KeyError):
        ledger.hold("state", 2, 2)
    with pytest.raises(KeyError):
        ledger.release("tape")


def test_adaptive_reversible_gradient_matches_full_tape():
    rng = np.random.default_rng(0)
    field = mlp_field(3, 10, 2)
    tab = make_tableau("bosh3")
    schedule = AdaptiveSchedule(0.0, 1.0, ControllerConfig(atol=1e-6, rtol=1e-6))
    loss = TrajectoryLoss([0.5, 1.0], rng.normal(size=(2, 3)))
    y0 = rng.normal(size=3)
    rev = reversible_gradient(y0, field, tab, schedule, 0.99, loss)
    tape = full_tape_backprop(y0, field, tab, schedule, loss, 0.99)
    assert np.array_equal(rev.record.times, tape.record.times)
    assert relative(rev.theta_bar, tape.theta_bar) <= 1e-8


def test_adaptive_reconstruction_on_chaotic_field():
    tab = make_tableau("bosh3")
    field = lorenz_field()
    y0 = np.array([-8.0, 7.0, 27.0])
    schedule = AdaptiveSchedule(0.0, 0.5, ControllerConfig(atol=1e-6, rtol=1e-6))
    sol = solve_forward(y0, field, tab, schedule, 0.99)
    s = sol.terminal
    record = sol.record
    for n in range(record.n_steps - 1, -1, -1):
        s = backward_step(s, field, tab, float(record.steps[n]), 0.99, t_prev=float(record.times[n]))
    assert np.linalg.norm(s.stacked() - np.concatenate([y0, y0])) / np.linalg.norm(np.concatenate([y0, y0])) <= 1e-10


def test_verification_records_small_mismatch(problem):
    field, y0, schedule, loss = problem
    tab = make_tableau("rk4")
    sol = solve_forward(y0, field, tab, schedule, 0.99, loss)
    counters = Counters()
    reversible_backprop(sol.terminal, loss, field, tab, sol.record, 0.99, verify=True, counters=counters)
    assert counters.max_local_mismatch <= 1e-10


def test_wrong_backward_coupling_breaks_gradient(problem):
    field, y0, schedule, loss = problem
    tab = make_tableau("rk4")
    good = reversible_gradient(y0, field, tab, schedule, 0.99, loss)
    bad = reversible_gradient(y0, field, tab, schedule, 0.99, loss, backward_coupling=0.9)
    assert relative(bad.theta_bar, good.theta_bar) > 1e-4


def test_wrong_backward_coupling_fails_verification(problem):
    field, y0, schedule, loss = problem
    with pytest.raises(ReversibilityBreakdownError) as info:
        reversible_gradient(y0, field, make_tableau("rk4"), schedule, 0.99, loss, verify=True, backward_coupling=0.5)
    assert info.value.step is not None


def test_terminal_step_mismatch_is_rejected(small_mlp):
    tab = make_tableau("rk4")
    sol = solve_forward([0.1, 0.2], small_mlp, tab, FixedSchedule(0.0, 1.0, 10), 0.99)
    with pytest.raises(ConfigurationError):
        reversible_backprop(sol.terminal, None, small_mlp, tab, FixedSchedule(0.0, 1.0, 11).record(), 0.99)


def test_lambda_one_is_still_exactly_reversible(problem):
    field, y0, schedule, loss = problem
    tab = make_tableau("midpoint")
    rev = reversible_gradient(y0, field, tab, schedule, 1.0, loss)
    tape = full_tape_backprop(y0, field, tab, schedule, loss, 1.0)
    assert relative(rev.theta_bar, tape.theta_bar) <= 1e-8


def test_increment_helper_consistency(small_mlp):
    s = ReversibleState.initial(0.0, [0.3, 0.4])
    tab = make_tableau("ralston3")
    nxt = forward_step(s, small_mlp, tab, 0.05, 0.99)
    expected_y = 0.99 * s.y + (1.0 - 0.99) * s.z + step(small_mlp, tab, 0.0, s.z, 0.05).increment
    np.testing.assert_array_equal(nxt.y, expected_y)


@pytest.mark.parametrize("t_end", [0.5, 1.0])
def test_adaptive_step_counts_track_plain_solver_on_chaotic_field(t_end):
    tab = make_tableau("bosh3")
    field = lorenz_field()
    y0 = np.array([-8.0, 7.0, 27.0])
    cfg = ControllerConfig(atol=1e-6, rtol=1e-6)
    rev = solve_forward(y0, field, tab, AdaptiveSchedule(0.0, t_end, cfg), 0.99)
    plain = full_tape_backprop(y0, field, tab, AdaptiveSchedule(0.0, t_end, cfg), None)
    ratio = rev.record.n_steps / plain.record.n_steps
    assert 0.85 <= ratio <= 1.15
