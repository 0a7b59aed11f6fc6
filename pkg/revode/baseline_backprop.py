"""
Comparison gradient engines: full tape and recursive checkpointing.

Both engines are written against a `Scheme`, so the same executor
backpropagates the plain base solver (y + Ψ_h) or the reversible scheme
with its states stored instead of rebuilt. The checkpointing engine uses
binomial (revolve-style) placement for fixed grids and an online doubling
policy for adaptive grids whose length is unknown up front.
"""

import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DivergenceError, ResourceError
from .field_core import VectorField
from .instrumentation import Counters, GradientResult
from .losses import ObservationLoss, ObservationStream
from .reversible_engine import Coupling, ReversibleState, attempt_step, forward_step
from .rk_solvers import ButcherTableau, pullback, step
from .step_control import (
    AdaptiveSchedule,
    FixedSchedule,
    Schedule,
    StepController,
    StepRecord,
    error_norm,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_TAPE_VALUES = 50_000_000

BINOMIAL = "binomial"
ONLINE_DOUBLING = "online-doubling"


class Scheme(ABC):
    """One step map of a solver together with its pullback."""

    evals_per_step: int = 1
    vjps_per_step: int = 1
    vectors_per_state: int = 1

    @abstractmethod
    def initial(self, t0: float, y0: np.ndarray) -> Any:
        ...

    @abstractmethod
    def advance(self, state: Any, n: int, t: float, h: float) -> Any:
        ...

    @abstractmethod
    def attempt(self, state: Any, n: int, t: float, h: float, ctl: StepController) -> Tuple[bool, Callable[[], Any]]:
        ...

    @abstractmethod
    def primal(self, state: Any) -> np.ndarray:
        ...

    @abstractmethod
    def zero_adjoint(self) -> Any:
        ...

    @abstractmethod
    def pullback(self, state: Any, t: float, h: float, adjoint: Any) -> Tuple[Any, np.ndarray]:
        """Adjoint at step n from the adjoint at n+1, plus the θ contribution."""

    @abstractmethod
    def inject(self, adjoint: Any, g: np.ndarray) -> Any:
        ...

    @abstractmethod
    def initial_gradient(self, adjoint: Any) -> np.ndarray:
        ...


class PlainScheme(Scheme):
    """y_{n+1} = y_n + Ψ_h(t_n, y_n)."""

    def __init__(self, field: VectorField, tab: ButcherTableau):
        self.field = field
        self.tab = tab

    def initial(self, t0, y0):
        return np.array(y0, dtype=np.float64).reshape(-1)

    def advance(self, state, n, t, h):
        try:
            return state + step(self.field, self.tab, t, state, h).increment
        except DivergenceError as e:
            raise e.at_step(n, state) from e

    def attempt(self, state, n, t, h, ctl):
        try:
            out = step(self.field, self.tab, t, state, h)
        except DivergenceError as e:
            raise e.at_step(n, state) from e
        y_next = state + out.increment
        accepted = ctl.report(error_norm(out.error, state, y_next, ctl.cfg))
        return accepted, lambda: y_next

    def primal(self, state):
        return state

    def zero_adjoint(self):
        return np.zeros(self.field.dim)

    def pullback(self, state, t, h, adjoint):
        _, apply = pullback(self.field, self.tab, t, state, h)
        g_y, g_theta = apply(adjoint)
        return adjoint + g_y, g_theta

    def inject(self, adjoint, g):
        return adjoint + g

    def initial_gradient(self, adjoint):
        return adjoint


class ReversibleScheme(Scheme):
    """The coupled (y, z) step, backpropagated from stored states."""

    evals_per_step = 2
    vjps_per_step = 2
    vectors_per_state = 2

    def __init__(self, field: VectorField, tab: ButcherTableau, coupling: Coupling):
        self.field = field
        self.tab = tab
        self.lam = coupling.lam

    def initial(self, t0, y0):
        return ReversibleState.initial(t0, y0)

    def advance(self, state, n, t, h):
        return forward_step(state, self.field, self.tab, h, self.lam)

    def attempt(self, state, n, t, h, ctl):
        return attempt_step(state, self.field, self.tab, h, self.lam, ctl)

    def primal(self, state):
        return state.y

    def zero_adjoint(self):
        return np.zeros(self.field.dim), np.zeros(self.field.dim)

    def pullback(self, state, t, h, adjoint):
        y_bar_next, z_bar_next = adjoint
        lam = self.lam
        fwd, fwd_vjp = pullback(self.field, self.tab, state.t, state.z, h)
        y_next = lam * state.y + (1.0 - lam) * state.z + fwd.increment
        _, back_vjp = pullback(self.field, self.tab, state.t + h, y_next, -h)
        g_y_back, g_theta_back = back_vjp(z_bar_next)
        y_bar = y_bar_next - g_y_back
        g_z, g_theta_fwd = fwd_vjp(y_bar)
        return (lam * y_bar, z_bar_next + (1.0 - lam) * y_bar + g_z), g_theta_fwd - g_theta_back

    def inject(self, adjoint, g):
        return adjoint[0] + g, adjoint[1]

    def initial_gradient(self, adjoint):
        return adjoint[0] + adjoint[1]


class NullScheme(Scheme):
    """Counting-only scheme: states and adjoints carry no data."""

    def initial(self, t0, y0):
        return None

    def advance(self, state, n, t, h):
        return None

    def attempt(self, state, n, t, h, ctl):
        ctl.report(0.0)
        return True, lambda: None

    def primal(self, state):
        return None

    def zero_adjoint(self):
        return None

    def pullback(self, state, t, h, adjoint):
        return None, None

    def inject(self, adjoint, g):
        return adjoint

    def initial_gradient(self, adjoint):
        return None


def make_scheme(field: VectorField, tab: ButcherTableau, coupling=None) -> Scheme:
    """Plain base-solver scheme, or the reversible scheme when a coupling is given."""
    if coupling is None:
        return PlainScheme(field, tab)
    if not isinstance(coupling, Coupling):
        coupling = Coupling(float(coupling))
    return ReversibleScheme(field, tab, coupling)


@dataclass
class TapeEntry:
    t: float
    state: Any


class Tape:
    """Every state of a solve, in order; length N+1 once the solve is done."""

    def __init__(self, dim: int, vectors_per_state: int, max_values: int):
        self.entries: List[TapeEntry] = []
        self._values_per_entry = dim * vectors_per_state
        self.max_values = max_values

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, n: int) -> TapeEntry:
        return self.entries[n]

    def append(self, t: float, state: Any) -> None:
        if (len(self.entries) + 1) * self._values_per_entry > self.max_values:
            raise ResourceError(
                f"tape would exceed {self.max_values} stored values after {len(self.entries)} steps"
            )
        self.entries.append(TapeEntry(t, state))


def _march(
    scheme: Scheme,
    y0,
    schedule: Schedule,
    tab: ButcherTableau,
    loss: Optional[ObservationLoss],
    counters: Counters,
    visit: Callable[[int, float, Any], None],
) -> Tuple[StepRecord, Any]:
    """Forward solve calling visit(n, t_n, state_n) for n = 0..N."""
    state = scheme.initial(schedule.t0, y0)
    visit(0, schedule.t0, state)
    if isinstance(schedule, FixedSchedule):
        record = schedule.record()
        if loss is not None:
            loss.index_map(record.times)
        for n, h in enumerate(record.steps):
            state = scheme.advance(state, n, float(record.times[n]), float(h))
            counters.step_evals_forward += scheme.evals_per_step
            visit(n + 1, float(record.times[n + 1]), state)
        return record, state

    if not isinstance(schedule, AdaptiveSchedule):
        raise ConfigurationError(f"unsupported schedule {type(schedule).__name__}")
    if not tab.adaptive:
        raise ConfigurationError(f"tableau {tab.name} has no embedded error estimate")
    stops = loss.obs_times if loss is not None else ()
    ctl = StepController(schedule.controller, tab.embedded_order, schedule.t0, schedule.t_end, stops)
    n = 0
    while not ctl.done:
        t = ctl.t
        h = ctl.propose()
        accepted, commit = scheme.attempt(state, n, t, h, ctl)
        counters.step_evals_forward += 1
        if accepted:
            state = commit()
            counters.step_evals_forward += scheme.evals_per_step - 1
            n += 1
            visit(n, ctl.t, state)
    record = ctl.record()
    counters.rejected_steps += record.rejected
    return record, state


class _NodeSweep:
    """
    Applies the reverse chain node by node, N first.

    Node N is the loss at the terminal state; node n < N is step n. Nodes
    must be applied in strictly decreasing order.
    """

    def __init__(self, scheme: Scheme, record: StepRecord, loss: Optional[ObservationLoss], n_params: int, counters: Counters):
        self.scheme = scheme
        self.record = record
        self.loss = loss
        self.obs_index = loss.index_map(record.times) if loss is not None else {}
        self.counters = counters
        self.adjoint = scheme.zero_adjoint()
        self.theta_bar = np.zeros(n_params)
        self.loss_value = 0.0
        self._expected = record.n_steps

    def apply(self, n: int, state: Any) -> None:
        if n != self._expected:
            raise RuntimeError(f"reverse sweep reached node {n}, expected {self._expected}")
        if n < self.record.n_steps:
            self.adjoint, g_theta = self.scheme.pullback(
                state, float(self.record.times[n]), float(self.record.steps[n]), self.adjoint
            )
            self.counters.vjp_evals += self.scheme.vjps_per_step
            if g_theta is not None:
                self.theta_bar += g_theta
        if n in self.obs_index:
            y = self.scheme.primal(state)
            m = self.obs_index[n]
            self.loss_value += self.loss.value(m, y)
            self.adjoint = self.scheme.inject(self.adjoint, self.loss.gradient(m, y))
        self._expected -= 1


def full_tape_backprop(
    y0,
    field: VectorField,
    tab: ButcherTableau,
    schedule: Schedule,
    loss: Optional[ObservationLoss],
    coupling=None,
    max_tape_values: int = DEFAULT_MAX_TAPE_VALUES,
) -> GradientResult:
    """
    Store every state on the forward pass, then sweep the chain rule back.

    Args:
        y0: Initial state
        field: Dynamics
        tab: Tableau
        schedule: Fixed or adaptive schedule
        loss: Observation loss, or None for a zero seed
        coupling: Backpropagate the reversible scheme with this λ; None
            selects the plain base solver
        max_tape_values: Bound on stored floats

    Raises:
        ResourceError: If the tape would exceed max_tape_values
    """
    scheme = make_scheme(field, tab, coupling)
    counters = Counters()
    tape = Tape(field.dim, scheme.vectors_per_state, max_tape_values)
    stream = ObservationStream(loss)

    def visit(n, t, state):
        tape.append(t, state)
        stream.visit(t, scheme.primal(state))

    start = time.perf_counter()
    record, _ = _march(scheme, y0, schedule, tab, loss, counters, visit)
    stream.check_complete()
    mid = time.perf_counter()

    sweep = _NodeSweep(scheme, record, loss, field.params.size, counters)
    for n in range(record.n_steps, -1, -1):
        sweep.apply(n, tape[n].state)
    end = time.perf_counter()

    counters.n_steps = record.n_steps
    counters.note_stored(len(tape), (len(tape) + 1) * scheme.vectors_per_state)
    return GradientResult(
        loss=stream.value,
        theta_bar=sweep.theta_bar,
        y0_bar=scheme.initial_gradient(sweep.adjoint),
        counters=counters,
        record=record,
        forward_ms=(mid - start) * 1e3,
        backward_ms=(end - mid) * 1e3,
    )


@dataclass
class ObservedSolve:
    loss: float
    record: StepRecord
    counters: Counters
    snapshots: List[Tuple[float, np.ndarray]]


def observe_trajectory(
    y0,
    field: VectorField,
    tab: ButcherTableau,
    schedule: Schedule,
    loss: ObservationLoss,
    coupling=None,
) -> ObservedSolve:
    """Forward solve of either scheme keeping the states at the observation times."""
    scheme = make_scheme(field, tab, coupling)
    counters = Counters()
    stream = ObservationStream(loss, keep_snapshots=True)

    def visit(n, t, state):
        stream.visit(t, scheme.primal(state))

    record, _ = _march(scheme, y0, schedule, tab, loss, counters, visit)
    stream.check_complete()
    counters.n_steps = record.n_steps
    return ObservedSolve(stream.value, record, counters, stream.snapshots)


def _binomial_depth(n_nodes: int, slots: int) -> int:
    """Smallest t with C(slots + t, slots) >= n_nodes."""
    t = 0
    while comb(slots + t, slots) < n_nodes:
        t += 1
    return t


@lru_cache(maxsize=None)
def _chain_cost(n_nodes: int, slots: int) -> int:
    if n_nodes <= 1:
        return 0
    if slots == 1:
        return n_nodes * (n_nodes - 1) // 2
    t = _binomial_depth(n_nodes, slots)
    return t * n_nodes - comb(slots + t, slots + 1)


def revolve_cost(n_steps: int, budget: int) -> int:
    """
    Forward step evaluations of the binomial schedule, initial sweep included.

    With the initial state held in one of `budget` slots, reversing N steps
    and the terminal loss costs N evaluations when budget >= N and grows
    like N·log N for a fixed budget.
    """
    if budget < 1:
        raise ConfigurationError(f"checkpoint budget must be >= 1, got {budget}")
    return _chain_cost(n_steps + 1, budget)


@lru_cache(maxsize=None)
def binomial_split(n_nodes: int, slots: int) -> int:
    """Optimal number of steps to advance before placing the next checkpoint."""
    if n_nodes < 2 or slots < 2:
        raise ConfigurationError("a split needs at least two nodes and two slots")
    t = _binomial_depth(n_nodes, slots)
    m = min(max(1, n_nodes - comb(slots - 1 + t, slots - 1)), n_nodes - 1)
    target = _chain_cost(n_nodes, slots)
    if m + _chain_cost(n_nodes - m, slots - 1) + _chain_cost(m, slots) == target:
        return m
    return min(
        range(1, n_nodes),
        key=lambda k: k + _chain_cost(n_nodes - k, slots - 1) + _chain_cost(k, slots),
    )


@dataclass(frozen=True)
class CheckpointSchedule:
    """Checkpoint budget and the placement policy used for a schedule."""

    budget: int
    policy: str = BINOMIAL

    def __post_init__(self):
        if self.budget < 2:
            raise ConfigurationError(f"checkpoint budget must be >= 2, got {self.budget}")
        if self.policy not in (BINOMIAL, ONLINE_DOUBLING):
            raise ConfigurationError(f"unknown checkpoint policy {self.policy!r}")

    @classmethod
    def for_schedule(cls, budget: int, schedule: Schedule) -> "CheckpointSchedule":
        policy = ONLINE_DOUBLING if isinstance(schedule, AdaptiveSchedule) else BINOMIAL
        return cls(budget, policy)


class _Revolver:
    """Executes binomial reversal of node ranges with an explicit task stack."""

    def __init__(self, scheme: Scheme, record: StepRecord, sweep: Callable[[int, Any], None], budget: int, counters: Counters):
        self.scheme = scheme
        self.record = record
        self.sweep = sweep
        self.budget = budget
        self.counters = counters
        self.stored = 0

    def hold(self, count: int = 1) -> None:
        self.stored += count
        if self.stored > self.budget:
            raise ResourceError(f"{self.stored} checkpoints exceed the budget of {self.budget}")
        vps = self.scheme.vectors_per_state
        self.counters.note_stored(self.stored, (self.stored + 2) * vps)

    def release(self, count: int = 1) -> None:
        self.stored -= count

    def _advance(self, n: int, state: Any) -> Any:
        self.counters.step_evals_forward += self.scheme.evals_per_step
        return self.scheme.advance(state, n, float(self.record.times[n]), float(self.record.steps[n]))

    def reverse(self, start: int, n_nodes: int, slots: int, state: Any) -> None:
        """Reverse nodes start..start+n_nodes-1 given the held state at `start`."""
        tasks: List[Optional[Tuple[int, int, int, Any]]] = [(start, n_nodes, slots, state)]
        while tasks:
            task = tasks.pop()
            if task is None:
                self.release()
                continue
            i, n, c, s0 = task
            if n == 1:
                self.sweep(i, s0)
                continue
            if c == 1:
                for k in range(n - 1, -1, -1):
                    s = s0
                    for j in range(k):
                        s = self._advance(i + j, s)
                    self.sweep(i + k, s)
                continue
            m = binomial_split(n, c)
            s = s0
            for j in range(m):
                s = self._advance(i + j, s)
            self.hold()
            tasks.append((i, m, c, s0))
            tasks.append(None)
            tasks.append((i + m, n - m, c - 1, s))


class _DoublingCheckpoints:
    """Keeps at most `budget` states at multiples of a doubling stride."""

    def __init__(self, budget: int, counters: Counters, vectors_per_state: int):
        self.budget = budget
        self.counters = counters
        self.vectors_per_state = vectors_per_state
        self.stride = 1
        self.states: Dict[int, Any] = {}

    def visit(self, n: int, state: Any) -> None:
        if n % self.stride:
            return
        if len(self.states) == self.budget:
            self.stride *= 2
            self.states = {k: v for k, v in self.states.items() if k % self.stride == 0}
            if n % self.stride:
                return
        self.states[n] = state
        self.counters.note_stored(len(self.states), (len(self.states) + 1) * self.vectors_per_state)


def checkpointed_backprop(
    y0,
    field: VectorField,
    tab: ButcherTableau,
    schedule: Schedule,
    loss: Optional[ObservationLoss],
    budget: int,
    coupling=None,
) -> GradientResult:
    """
    Backpropagate holding at most `budget` states, recomputing the rest.

    Fixed grids use binomial placement; adaptive grids record checkpoints
    online with a doubling stride and reverse each segment binomially with
    the slots left over.

    Raises:
        ConfigurationError: If budget < 2
    """
    plan = CheckpointSchedule.for_schedule(budget, schedule)
    scheme = make_scheme(field, tab, coupling)
    counters = Counters()
    start = time.perf_counter()

    if plan.policy == BINOMIAL:
        record = schedule.record()
        sweep = _NodeSweep(scheme, record, loss, field.params.size, counters)
        revolver = _Revolver(scheme, record, sweep.apply, budget, counters)
        revolver.hold()
        revolver.reverse(0, record.n_steps + 1, budget, scheme.initial(schedule.t0, y0))
        # forward and reverse sweeps interleave; all of it is reported as backward time
        mid = start
    else:
        online = _DoublingCheckpoints(budget, counters, scheme.vectors_per_state)
        record, _ = _march(scheme, y0, schedule, tab, loss, counters, lambda n, t, s: online.visit(n, s))
        mid = time.perf_counter()
        sweep = _NodeSweep(scheme, record, loss, field.params.size, counters)
        revolver = _Revolver(scheme, record, sweep.apply, budget, counters)
        starts = sorted(online.states)
        revolver.hold(len(starts))
        for k in range(len(starts) - 1, -1, -1):
            begin = starts[k]
            end = starts[k + 1] if k + 1 < len(starts) else record.n_steps + 1
            revolver.reverse(begin, end - begin, budget - k, online.states[begin])
            revolver.release()
        logger.debug("online checkpoints: stride %d, %d segments", online.stride, len(starts))
    end = time.perf_counter()

    counters.n_steps = record.n_steps
    return GradientResult(
        loss=sweep.loss_value,
        theta_bar=sweep.theta_bar,
        y0_bar=scheme.initial_gradient(sweep.adjoint),
        counters=counters,
        record=record,
        forward_ms=(mid - start) * 1e3,
        backward_ms=(end - mid) * 1e3,
    )


def simulate_schedule(n_steps: int, budget: int) -> Counters:
    """Run the binomial executor on a data-free scheme and return its counters."""
    if budget < 1:
        raise ConfigurationError(f"checkpoint budget must be >= 1, got {budget}")
    counters = Counters()
    record = StepRecord.from_steps(0.0, np.ones(n_steps))
    scheme = NullScheme()
    sweep = _NodeSweep(scheme, record, None, 0, counters)
    revolver = _Revolver(scheme, record, sweep.apply, budget, counters)
    revolver.hold()
    revolver.reverse(0, n_steps + 1, budget, None)
    counters.n_steps = n_steps
    return counters
