"""
Reversible Runge-Kutta scheme and its constant-memory backpropagation.

The scheme evolves a pair (y, z) from y0 = z0:

    y_{n+1} = λ·y_n + (1 - λ)·z_n + Ψ_h(t_n, z_n)
    z_{n+1} = z_n - Ψ_{-h}(t_{n+1}, y_{n+1})

and is inverted in closed form, so the backward pass rebuilds every state
instead of storing it. Only the scalar step grid (a `StepRecord`) is kept
between the passes.
"""

import logging
import time
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DivergenceError, ReversibilityBreakdownError
from .field_core import VectorField
from .instrumentation import Counters, GradientResult, MemoryLedger
from .losses import GRID_MATCH_TOL, ObservationLoss, ObservationStream
from .rk_solvers import ButcherTableau, StepOutput, pullback, step
from .step_control import (
    AdaptiveSchedule,
    FixedSchedule,
    Schedule,
    StepController,
    StepRecord,
    error_norm,
)

logger = logging.getLogger(__name__)

DEFAULT_COUPLING = 0.99
VERIFY_WARN_TOL = 1e-10
VERIFY_BREAKDOWN_TOL = 1e-6


@dataclass(frozen=True)
class Coupling:
    """Coupling parameter λ ∈ (0, 1]; values in [0.99, 0.999] work well."""

    lam: float = DEFAULT_COUPLING

    def __post_init__(self):
        if not (0.0 < self.lam <= 1.0):
            raise ConfigurationError(f"coupling must lie in (0, 1], got {self.lam}")

    @property
    def marginal(self) -> bool:
        return self.lam == 1.0


@dataclass(frozen=True, eq=False)
class ReversibleState:
    t: float
    y: np.ndarray
    z: np.ndarray
    n: int = 0

    @classmethod
    def initial(cls, t0: float, y0) -> "ReversibleState":
        y0 = np.array(y0, dtype=np.float64).reshape(-1)
        return cls(float(t0), y0, y0.copy(), 0)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.y, self.z])

    @property
    def footprint(self) -> Tuple[int, int]:
        """(checkpoints, d-vectors) held; y and z both count as stored primal states."""
        return 2, 2


@dataclass
class AdjointState:
    y_bar: np.ndarray
    z_bar: np.ndarray
    theta_bar: np.ndarray

    @classmethod
    def zeros(cls, dim: int, n_params: int) -> "AdjointState":
        return cls(np.zeros(dim), np.zeros(dim), np.zeros(n_params))

    @property
    def footprint(self) -> Tuple[int, int]:
        return 0, 2

    @property
    def initial_gradient(self) -> np.ndarray:
        """dL/dy(0); y0 feeds both y_0 and z_0."""
        return self.y_bar + self.z_bar


def _as_coupling(coupling) -> Coupling:
    if isinstance(coupling, Coupling):
        return coupling
    return Coupling(float(coupling))


def _finish_step(
    s: ReversibleState,
    forward: StepOutput,
    field: VectorField,
    tab: ButcherTableau,
    h: float,
    lam: float,
) -> ReversibleState:
    t_next = s.t + h
    y_next = lam * s.y + (1.0 - lam) * s.z + forward.increment
    try:
        back = step(field, tab, t_next, y_next, -h)
    except DivergenceError as e:
        raise e.at_step(s.n, s) from e
    return ReversibleState(t_next, y_next, s.z - back.increment, s.n + 1)


def forward_step(
    s: ReversibleState,
    field: VectorField,
    tab: ButcherTableau,
    h: float,
    coupling=DEFAULT_COUPLING,
) -> ReversibleState:
    """
    Advance the coupled pair by one step of size h > 0.

    Raises:
        DivergenceError: If either increment is non-finite, annotated with
            the step index and the last good state
    """
    if not h > 0.0:
        raise ConfigurationError(f"forward steps need h > 0, got {h}")
    lam = _as_coupling(coupling).lam
    try:
        forward = step(field, tab, s.t, s.z, h)
    except DivergenceError as e:
        raise e.at_step(s.n, s) from e
    return _finish_step(s, forward, field, tab, h, lam)


def backward_step(
    s: ReversibleState,
    field: VectorField,
    tab: ButcherTableau,
    h: float,
    coupling=DEFAULT_COUPLING,
    t_prev: Optional[float] = None,
) -> ReversibleState:
    """
    Reconstruct the state one step earlier.

    Args:
        s: State at step n+1
        field: Dynamics used on the forward step
        tab: Tableau used on the forward step
        h: Size of the forward step
        coupling: λ used on the forward step
        t_prev: Exact start time of the forward step; defaults to s.t - h.
            Pass the recorded grid time to keep t bit-identical.
    """
    lam = _as_coupling(coupling).lam
    t_prev = s.t - h if t_prev is None else t_prev
    try:
        back = step(field, tab, s.t, s.y, -h)
        z_prev = s.z + back.increment
        forward = step(field, tab, t_prev, z_prev, h)
    except DivergenceError as e:
        raise e.at_step(s.n - 1, s) from e
    y_prev = (s.y - (1.0 - lam) * z_prev - forward.increment) / lam
    return ReversibleState(t_prev, y_prev, z_prev, s.n - 1)


@dataclass
class ForwardSolution:
    terminal: ReversibleState
    loss_value: float
    record: StepRecord
    counters: Counters
    snapshots: List[Tuple[float, np.ndarray]] = dataclass_field(default_factory=list)


def attempt_step(
    s: ReversibleState,
    field: VectorField,
    tab: ButcherTableau,
    h: float,
    lam: float,
    controller: StepController,
) -> Tuple[bool, Callable[[], ReversibleState]]:
    """
    Try an adaptive step; the error estimate comes from the forward Ψ_h only.

    Returns the controller verdict and a callable completing the step.
    """
    try:
        forward = step(field, tab, s.t, s.z, h)
    except DivergenceError as e:
        raise e.at_step(s.n, s) from e
    err = error_norm(forward.error, s.z, s.z + forward.increment, controller.cfg)
    accepted = controller.report(err)
    return accepted, lambda: _finish_step(s, forward, field, tab, h, lam)


def solve_forward(
    y0,
    field: VectorField,
    tab: ButcherTableau,
    schedule: Schedule,
    coupling=DEFAULT_COUPLING,
    loss: Optional[ObservationLoss] = None,
    counters: Optional[Counters] = None,
    keep_snapshots: bool = False,
) -> ForwardSolution:
    """
    Integrate the reversible scheme, streaming observations into the loss.

    No intermediate state is retained; the result holds the terminal pair
    and the accepted step grid.

    Raises:
        DivergenceError: With the step index and last good state
        StiffnessError: If the adaptive controller underflows h_min
        ConfigurationError: On observation times off the grid
    """
    lam = _as_coupling(coupling).lam
    counters = counters if counters is not None else Counters()
    s = ReversibleState.initial(schedule.t0, y0)
    if s.y.shape != (field.dim,):
        raise ConfigurationError(f"initial state has shape {s.y.shape}, field expects ({field.dim},)")
    slack = GRID_MATCH_TOL * max(1.0, abs(schedule.t_end))
    if loss is not None and (loss.obs_times[0] < schedule.t0 - slack or loss.obs_times[-1] > schedule.t_end + slack):
        raise ConfigurationError("observation times must lie within the integration interval")
    ledger = MemoryLedger(counters)
    ledger.hold("state", *s.footprint)
    stream = ObservationStream(loss, keep_snapshots)
    stream.visit(s.t, s.y)

    if isinstance(schedule, FixedSchedule):
        record = schedule.record()
        if loss is not None:
            loss.index_map(record.times)
        for h in record.steps:
            s = forward_step(s, field, tab, float(h), lam)
            ledger.replace("state", *s.footprint)
            counters.step_evals_forward += 2
            stream.visit(s.t, s.y)
    elif isinstance(schedule, AdaptiveSchedule):
        if not tab.adaptive:
            raise ConfigurationError(f"tableau {tab.name} has no embedded error estimate")
        stops = loss.obs_times if loss is not None else ()
        ctl = StepController(schedule.controller, tab.embedded_order, schedule.t0, schedule.t_end, stops)
        while not ctl.done:
            h = ctl.propose()
            accepted, commit = attempt_step(s, field, tab, h, lam, ctl)
            counters.step_evals_forward += 1
            if accepted:
                s = commit()
                ledger.replace("state", *s.footprint)
                counters.step_evals_forward += 1
                stream.visit(s.t, s.y)
        record = ctl.record()
        counters.rejected_steps += record.rejected
    else:
        raise ConfigurationError(f"unsupported schedule {type(schedule).__name__}")

    stream.check_complete()
    counters.n_steps = record.n_steps
    logger.debug("reversible solve: %d steps, %d rejected", record.n_steps, record.rejected)
    return ForwardSolution(s, stream.value, record, counters, stream.snapshots)


def reversible_backprop(
    terminal: ReversibleState,
    loss: Optional[ObservationLoss],
    field: VectorField,
    tab: ButcherTableau,
    record: StepRecord,
    coupling=DEFAULT_COUPLING,
    *,
    verify: bool = False,
    backward_coupling=None,
    counters: Optional[Counters] = None,
) -> Tuple[AdjointState, ReversibleState]:
    """
    Backpropagate through a completed reversible solve in constant memory.

    Each step rebuilds (y_n, z_n) from (y_{n+1}, z_{n+1}) and pulls the
    adjoint back through both increments, so the work per step is two
    step evaluations plus two step VJPs. Observation gradients are injected
    on the rebuilt states.

    Args:
        terminal: Final state returned by `solve_forward`
        loss: Loss whose per-observation gradients seed the sweep, or None
        field: Dynamics of the forward solve
        tab: Tableau of the forward solve
        record: Accepted step grid of the forward solve
        coupling: λ of the forward solve
        verify: Re-run each forward step from the rebuilt state and check
            the local mismatch
        backward_coupling: Use a different λ on the backward pass (only
            meaningful as a negative control)
        counters: Counters to accumulate into

    Returns:
        Tuple[AdjointState, ReversibleState]: Adjoint at step 0 and the
        rebuilt initial state

    Raises:
        ReversibilityBreakdownError: On a non-finite reconstruction or a
            verification mismatch above 1e-6
    """
    forward_lam = _as_coupling(coupling).lam
    lam = _as_coupling(backward_coupling).lam if backward_coupling is not None else forward_lam
    counters = counters if counters is not None else Counters()
    n_steps = record.n_steps
    if terminal.n != n_steps:
        raise ConfigurationError(f"terminal state is at step {terminal.n}, record has {n_steps} steps")

    obs_index = loss.index_map(record.times) if loss is not None else {}
    adj = AdjointState.zeros(field.dim, field.params.size)
    if n_steps in obs_index:
        adj.y_bar = adj.y_bar + loss.gradient(obs_index[n_steps], terminal.y)

    s = terminal
    ledger = MemoryLedger(counters)
    ledger.hold("state", *s.footprint)
    ledger.hold("adjoint", *adj.footprint)
    for n in range(n_steps - 1, -1, -1):
        h = float(record.steps[n])
        t_n = float(record.times[n])
        t_next = s.t
        try:
            back, back_vjp = pullback(field, tab, t_next, s.y, -h)
            z_n = s.z + back.increment
            fwd, fwd_vjp = pullback(field, tab, t_n, z_n, h)
        except DivergenceError as e:
            raise ReversibilityBreakdownError(f"reconstruction diverged at step {n}: {e}", step=n) from e
        y_n = (s.y - (1.0 - lam) * z_n - fwd.increment) / lam
        if not (np.all(np.isfinite(y_n)) and np.all(np.isfinite(z_n))):
            raise ReversibilityBreakdownError(f"non-finite reconstruction at step {n}", step=n)
        counters.step_evals_backward += 2

        g_y_back, g_theta_back = back_vjp(adj.z_bar)
        y_bar = adj.y_bar - g_y_back
        g_z_fwd, g_theta_fwd = fwd_vjp(y_bar)
        counters.vjp_evals += 2

        prev = ReversibleState(t_n, y_n, z_n, n)
        if verify:
            _verify_reconstruction(prev, s, field, tab, h, forward_lam, counters)

        adj = AdjointState(
            y_bar=lam * y_bar,
            z_bar=adj.z_bar + (1.0 - lam) * y_bar + g_z_fwd,
            theta_bar=adj.theta_bar - g_theta_back + g_theta_fwd,
        )
        if n in obs_index:
            adj.y_bar = adj.y_bar + loss.gradient(obs_index[n], y_n)
        s = prev
        ledger.replace("state", *s.footprint)
        ledger.replace("adjoint", *adj.footprint)

    return adj, s


def _verify_reconstruction(
    prev: ReversibleState,
    current: ReversibleState,
    field: VectorField,
    tab: ButcherTableau,
    h: float,
    lam: float,
    counters: Counters,
) -> None:
    redo = forward_step(prev, field, tab, h, lam)
    counters.step_evals_backward += 2
    ref = current.stacked()
    mismatch = float(np.max(np.abs(redo.stacked() - ref)) / max(np.max(np.abs(ref)), 1e-300))
    counters.max_local_mismatch = max(counters.max_local_mismatch, mismatch)
    if mismatch > VERIFY_BREAKDOWN_TOL:
        raise ReversibilityBreakdownError(
            f"local mismatch {mismatch:.3e} at step {prev.n}", step=prev.n, mismatch=mismatch
        )
    if mismatch > VERIFY_WARN_TOL:
        logger.warning("reconstruction mismatch %.3e at step %d", mismatch, prev.n)


def reversible_gradient(
    y0,
    field: VectorField,
    tab: ButcherTableau,
    schedule: Schedule,
    coupling=DEFAULT_COUPLING,
    loss: Optional[ObservationLoss] = None,
    *,
    verify: bool = False,
    backward_coupling=None,
) -> GradientResult:
    """Forward solve plus reversible backprop, timed and counted."""
    counters = Counters()
    start = time.perf_counter()
    solution = solve_forward(y0, field, tab, schedule, coupling, loss, counters)
    mid = time.perf_counter()
    adj, _ = reversible_backprop(
        solution.terminal,
        loss,
        field,
        tab,
        solution.record,
        coupling,
        verify=verify,
        backward_coupling=backward_coupling,
        counters=counters,
    )
    end = time.perf_counter()
    return GradientResult(
        loss=solution.loss_value,
        theta_bar=adj.theta_bar,
        y0_bar=adj.initial_gradient,
        counters=counters,
        record=solution.record,
        forward_ms=(mid - start) * 1e3,
        backward_ms=(end - mid) * 1e3,
    )
