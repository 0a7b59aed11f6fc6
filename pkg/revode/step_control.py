"""
Step schedules, the PI step-size controller and the accepted-step log.

Adaptive solves keep a `StepRecord` of the accepted grid so every
backward pass replays exactly the steps the forward pass took. Only
accepted steps are logged; a rejected attempt never advances the state.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import ConfigurationError, StiffnessError

logger = logging.getLogger(__name__)

ERR_FLOOR = 1e-10
# relative slack for deciding that a proposed step reaches the next stop
LANDING_TOL = 1e-10


class ControllerConfig(BaseModel):
    """PI controller settings; gains default to (0.4, 0.3)/(k_emb + 1)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    atol: float = 1e-6
    rtol: float = 1e-6
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0
    pcoeff: Optional[float] = None
    icoeff: Optional[float] = None
    h_init: float = 1e-2
    h_min: float = 1e-10
    h_max: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if not (0.0 < self.h_min <= self.h_init <= self.h_max):
            raise ConfigurationError(
                f"controller needs 0 < h_min <= h_init <= h_max, got "
                f"{self.h_min}, {self.h_init}, {self.h_max}"
            )
        if self.atol <= 0.0 or self.rtol <= 0.0:
            raise ConfigurationError("controller tolerances must be positive")
        if not (0.0 < self.min_factor <= 1.0 <= self.max_factor):
            raise ConfigurationError("growth clamp must satisfy min_factor <= 1 <= max_factor")
        return self

    def gains(self, embedded_order: int) -> Tuple[float, float]:
        """(k_P, k_I) for an embedded method of the given order."""
        scale = 1.0 / (embedded_order + 1)
        k_p = self.pcoeff if self.pcoeff is not None else 0.4 * scale
        k_i = self.icoeff if self.icoeff is not None else 0.3 * scale
        return k_p, k_i

    def tightened(self, factor: float = 0.5) -> "ControllerConfig":
        return self.model_copy(update={"atol": self.atol * factor, "rtol": self.rtol * factor})


def error_norm(estimate: np.ndarray, y_prev: np.ndarray, y_next: np.ndarray, cfg: ControllerConfig) -> float:
    """Mixed absolute/relative RMS norm of an embedded error estimate."""
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y_prev), np.abs(y_next))
    ratio = np.asarray(estimate) / scale
    return float(np.sqrt(np.mean(ratio * ratio)))


@dataclass(frozen=True)
class Proposal:
    accept: bool
    h_next: float


def _growth(err: float, err_prev: float, cfg: ControllerConfig, embedded_order: int) -> float:
    k_p, k_i = cfg.gains(embedded_order)
    err = max(err, ERR_FLOOR)
    err_prev = max(err_prev, ERR_FLOOR)
    factor = cfg.safety * err ** (-k_i) * (err_prev / err) ** k_p
    return min(max(factor, cfg.min_factor), cfg.max_factor)


def propose(err: float, err_prev: float, h: float, cfg: ControllerConfig, embedded_order: int = 2) -> Proposal:
    """
    Accept/reject a step and propose the next step size.

    Args:
        err: Error norm of the attempted step
        err_prev: Error norm of the last accepted step
        h: Attempted step size
        cfg: Controller settings
        embedded_order: Order of the embedded error estimator

    Raises:
        StiffnessError: If the proposed step falls below h_min
    """
    if err < 0.0 or not np.isfinite(err):
        raise ConfigurationError(f"error norm must be finite and non-negative, got {err}")
    h_next = min(h * _growth(err, err_prev, cfg, embedded_order), cfg.h_max)
    if h_next < cfg.h_min:
        raise StiffnessError(f"step size {h_next:.3e} fell below h_min={cfg.h_min:.3e}", h=h_next)
    return Proposal(accept=err <= 1.0, h_next=h_next)


@dataclass(frozen=True, eq=False)
class StepRecord:
    """
    Accepted time grid of a solve.

    `times[n + 1] == times[n] + steps[n]` holds bit-exactly, so forward and
    backward passes that read t and h from the record agree exactly.
    """

    times: np.ndarray
    steps: np.ndarray
    rejected: int = 0
    errors: Tuple[float, ...] = ()
    h_next: float = float("nan")
    err_prev: float = float("nan")

    @classmethod
    def from_steps(cls, t0: float, steps: Sequence[float], **kwargs) -> "StepRecord":
        steps = np.asarray(steps, dtype=np.float64)
        times = np.empty(steps.size + 1)
        times[0] = t0
        t = float(t0)
        for n, h in enumerate(steps):
            t = t + float(h)
            times[n + 1] = t
        return cls(times=times, steps=steps, **kwargs)

    @property
    def n_steps(self) -> int:
        return self.steps.size

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def rows(self) -> List[dict]:
        return [
            {"n": n, "t": repr(float(self.times[n])), "h": repr(float(self.steps[n]))}
            for n in range(self.n_steps)
        ]


@dataclass(frozen=True)
class FixedSchedule:
    t0: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigurationError(f"fixed schedule needs n_steps >= 1, got {self.n_steps}")
        if not self.t_end > self.t0:
            raise ConfigurationError("fixed schedule needs t_end > t0")

    @classmethod
    def from_step_size(cls, t0: float, t_end: float, h: float) -> "FixedSchedule":
        n = int(round((t_end - t0) / h))
        if n < 1 or abs(n * h - (t_end - t0)) > 1e-9 * max(1.0, abs(t_end - t0)):
            raise ConfigurationError(f"step size {h} does not divide [{t0}, {t_end}]")
        return cls(t0, t_end, n)

    @property
    def h(self) -> float:
        return (self.t_end - self.t0) / self.n_steps

    def record(self) -> StepRecord:
        return StepRecord.from_steps(self.t0, np.full(self.n_steps, self.h))

    def refined(self) -> "FixedSchedule":
        return replace(self, n_steps=2 * self.n_steps)


@dataclass(frozen=True)
class AdaptiveSchedule:
    t0: float
    t_end: float
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self):
        if not self.t_end > self.t0:
            raise ConfigurationError("adaptive schedule needs t_end > t0")

    def refined(self) -> "AdaptiveSchedule":
        return replace(self, controller=self.controller.tightened())


Schedule = Union[FixedSchedule, AdaptiveSchedule]


class StepController:
    """
    Drives an adaptive solve one attempt at a time.

    Usage: while not done, `h = propose()`, attempt the step, then
    `report(err)`; a True return means the step was accepted and the caller
    must commit it. Steps are clipped so every stop (observation times and
    t_end) is landed on.
    """

    def __init__(
        self,
        cfg: ControllerConfig,
        embedded_order: int,
        t0: float,
        t_end: float,
        stops: Sequence[float] = (),
    ):
        self.cfg = cfg
        self.embedded_order = embedded_order
        self.t = float(t0)
        self._t0 = float(t0)
        self._stops = sorted({float(s) for s in stops if t0 < s < t_end} | {float(t_end)})
        self._stop_idx = 0
        self._h = cfg.h_init
        self._err_prev = 1.0
        self._steps: List[float] = []
        self._errors: List[float] = []
        self._rejected = 0
        self._pending: Optional[Tuple[float, bool]] = None

    @property
    def done(self) -> bool:
        return self._stop_idx >= len(self._stops)

    def propose(self) -> float:
        target = self._stops[self._stop_idx]
        h = self._h
        landing = self.t + h >= target - LANDING_TOL * max(1.0, abs(target))
        if landing:
            h = target - self.t
        self._pending = (h, landing)
        return h

    def report(self, err: float) -> bool:
        if self._pending is None:
            raise RuntimeError("report() called without a pending proposal")
        h, landing = self._pending
        self._pending = None
        self._errors.append(err)
        if err < 0.0 or not np.isfinite(err):
            raise ConfigurationError(f"error norm must be finite and non-negative, got {err}")
        accept = err <= 1.0
        h_next = min(h * _growth(err, self._err_prev, self.cfg, self.embedded_order), self.cfg.h_max)
        if accept and landing:
            # a clipped landing step must not shrink the running step size
            h_next = max(h_next, min(self._h, self.cfg.h_max))
        if h_next < self.cfg.h_min:
            raise StiffnessError(
                f"step size {h_next:.3e} fell below h_min={self.cfg.h_min:.3e} at t={self.t:.6g}",
                t=self.t,
                h=h_next,
            )
        if accept:
            self.t = self.t + h
            self._steps.append(h)
            self._err_prev = max(err, ERR_FLOOR)
            if landing:
                self._stop_idx += 1
        else:
            self._rejected += 1
            logger.debug("rejected step h=%.3e at t=%.6g (err=%.3g)", h, self.t, err)
        self._h = h_next
        return accept

    def record(self) -> StepRecord:
        return StepRecord.from_steps(
            self._t0,
            self._steps,
            rejected=self._rejected,
            errors=tuple(self._errors),
            h_next=self._h,
            err_prev=self._err_prev,
        )


def replay_controller(
    record: StepRecord,
    cfg: ControllerConfig,
    embedded_order: int,
    stops: Sequence[float] = (),
) -> StepRecord:
    """Re-drive a controller with the logged error norms and return its grid."""
    ctl = StepController(cfg, embedded_order, record.t0, record.t_end, stops)
    for err in record.errors:
        if ctl.done:
            break
        ctl.propose()
        ctl.report(err)
    return ctl.record()
