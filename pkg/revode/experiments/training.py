"""
Neural-ODE training loop.

One iteration solves the MLP dynamics from the first data sample, takes
the gradient with the configured engine and applies AdamW. A numerical
failure refines the step schedule once and retries; a second failure
skips the iteration.
"""

import logging
import time
from dataclasses import dataclass, field as dataclass_field
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from ..baseline_backprop import ObservedSolve, checkpointed_backprop, full_tape_backprop, observe_trajectory
from ..errors import (
    ConfigurationError,
    DivergenceError,
    DomainError,
    ReversibilityBreakdownError,
    StiffnessError,
)
from ..field_core import Params, VectorField, mlp_field
from ..instrumentation import GradientResult
from ..losses import ObservationLoss, TrajectoryLoss
from ..reversible_engine import Coupling, reversible_gradient
from ..rk_solvers import make_tableau
from ..step_control import AdaptiveSchedule, ControllerConfig, FixedSchedule, Schedule
from .datasets import (
    Trajectory,
    generate_coupled_oscillator,
    generate_lorenz,
    generate_white_dwarf,
    ingest_csv,
    normalize,
)
from .optim import OptimizerConfig, OptimizerState, adamw_update

logger = logging.getLogger(__name__)

ENGINES = ("reversible", "full_tape", "checkpointed")
NUMERICAL_FAILURES = (DivergenceError, StiffnessError, ReversibilityBreakdownError, DomainError)


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["white_dwarf", "coupled_oscillator", "lorenz", "csv"] = "white_dwarf"
    path: Optional[str] = None
    n_points: int = 1000
    t_range: Optional[Tuple[float, float]] = None
    normalize: bool = False
    C: float = 0.001

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "csv" and not self.path:
            raise ConfigurationError("csv datasets need a path")
        if self.n_points < 2:
            raise ConfigurationError("datasets need n_points >= 2")
        return self


class TrainConfig(BaseModel):
    """Everything one training run depends on; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    solver: str = "rk4"
    engine: Literal["reversible", "full_tape", "checkpointed"] = "reversible"
    scheme: Literal["reversible", "plain"] = "reversible"
    budget: int = 2
    coupling: float = 0.99
    observation_substeps: int = 1
    controller: Optional[ControllerConfig] = None
    hidden: int = 10
    time_dependent: bool = True
    optimizer: OptimizerConfig = OptimizerConfig()
    iterations: int = 1000
    seed: int = 0
    loss: Literal["trajectory", "terminal"] = "trajectory"
    repeats: int = 1
    log_every: int = 50
    dataset: DatasetConfig = DatasetConfig()

    @model_validator(mode="after")
    def _check(self):
        make_tableau(self.solver)
        Coupling(self.coupling)
        if self.iterations < 0 or self.repeats < 1 or self.observation_substeps < 1:
            raise ConfigurationError("iterations must be >= 0, repeats and observation_substeps >= 1")
        if self.engine == "checkpointed" and self.budget < 2:
            raise ConfigurationError(f"checkpoint budget must be >= 2, got {self.budget}")
        if self.engine == "reversible" and self.scheme == "plain":
            raise ConfigurationError("the reversible engine only backpropagates the reversible scheme")
        if self.controller is not None and not make_tableau(self.solver).adaptive:
            raise ConfigurationError(f"adaptive stepping needs an embedded tableau, {self.solver} has none")
        return self


@dataclass
class TrainingResult:
    params: Params
    log: List[dict] = dataclass_field(default_factory=list)
    seed: int = 0

    @property
    def final_loss(self) -> float:
        losses = [r["loss"] for r in self.log if not r.get("skipped")]
        return losses[-1] if losses else float("nan")


def load_dataset(cfg: DatasetConfig) -> Trajectory:
    if cfg.kind == "white_dwarf":
        traj = generate_white_dwarf(C=cfg.C, r_range=cfg.t_range or (0.0, 5.0), n_points=cfg.n_points)
    elif cfg.kind == "coupled_oscillator":
        traj = generate_coupled_oscillator(n_points=cfg.n_points, t_end=(cfg.t_range or (0.0, 3.0))[1])
    elif cfg.kind == "lorenz":
        traj = generate_lorenz(n_points=cfg.n_points, t_end=(cfg.t_range or (0.0, 2.0))[1])
    else:
        traj, _ = ingest_csv(cfg.path, cfg.t_range, cfg.n_points, normalize_values=cfg.normalize)
        return traj
    if cfg.normalize:
        traj, _ = normalize(traj)
    return traj


def build_loss(cfg: TrainConfig, data: Trajectory) -> ObservationLoss:
    if cfg.loss == "terminal":
        return TrajectoryLoss(data.times[-1:], data.values[-1:])
    return TrajectoryLoss(data.times, data.values)


def build_schedule(cfg: TrainConfig, data: Trajectory) -> Schedule:
    t0, t_end = float(data.times[0]), float(data.times[-1])
    if cfg.controller is not None:
        return AdaptiveSchedule(t0, t_end, cfg.controller)
    return FixedSchedule(t0, t_end, (data.n_points - 1) * cfg.observation_substeps)


def compute_gradient(
    cfg: TrainConfig, field: VectorField, y0: np.ndarray, schedule: Schedule, loss: ObservationLoss
) -> GradientResult:
    """Loss and gradient with the engine named in the config."""
    tab = make_tableau(cfg.solver)
    if cfg.engine == "reversible":
        return reversible_gradient(y0, field, tab, schedule, cfg.coupling, loss)
    coupling = cfg.coupling if cfg.scheme == "reversible" else None
    if cfg.engine == "full_tape":
        return full_tape_backprop(y0, field, tab, schedule, loss, coupling)
    return checkpointed_backprop(y0, field, tab, schedule, loss, cfg.budget, coupling)


def _gradient_with_retry(cfg, field, y0, schedule, loss, iteration) -> Tuple[Optional[GradientResult], Schedule]:
    for attempt in range(2):
        try:
            result = compute_gradient(cfg, field, y0, schedule, loss)
            if np.isfinite(result.loss) and np.all(np.isfinite(result.theta_bar)):
                return result, schedule
            failure = "non-finite loss or gradient"
        except NUMERICAL_FAILURES as e:
            failure = str(e)
        if attempt == 0:
            schedule = schedule.refined()
            logger.warning("Iteration %d: %s; retrying with a refined schedule", iteration, failure)
        else:
            logger.warning("Iteration %d: %s again; skipping the update", iteration, failure)
    return None, schedule


def train(config: TrainConfig, data: Trajectory, seed: Optional[int] = None) -> TrainingResult:
    """
    Fit an MLP vector field to one trajectory.

    Args:
        config: Training configuration
        data: Target trajectory; its first sample is the initial state
        seed: Overrides config.seed for the parameter initialization

    Returns:
        TrainingResult: Final parameters and the per-iteration log
    """
    seed = config.seed if seed is None else seed
    field = mlp_field(data.dim, config.hidden, seed, config.time_dependent)
    y0 = data.values[0].copy()
    loss = build_loss(config, data)
    schedule = build_schedule(config, data)
    opt_state = OptimizerState.zeros(field.params.size)
    log: List[dict] = []

    logger.info(
        "Training %s/%s on %s: %d iterations, %d parameters",
        config.solver, config.engine, data.label or "data", config.iterations, field.params.size,
    )
    for it in range(config.iterations):
        start = time.perf_counter()
        result, schedule = _gradient_with_retry(config, field, y0, schedule, loss, it)
        if result is None:
            log.append({"iter": it, "skipped": True, "wall_ms": (time.perf_counter() - start) * 1e3})
            continue
        values, opt_state = adamw_update(field.params.values, result.theta_bar, opt_state, config.optimizer)
        field = field.with_params(field.params.with_values(values))
        counters = result.counters
        log.append(
            {
                "iter": it,
                "loss": result.loss,
                "grad_norm": float(np.linalg.norm(result.theta_bar)),
                "wall_ms": (time.perf_counter() - start) * 1e3,
                "stored_state_peak": counters.stored_state_peak,
                "step_evals": counters.step_evals,
                "vjp_evals": counters.vjp_evals,
                "n_steps_solver": counters.n_steps,
            }
        )
        if config.log_every and it % config.log_every == 0:
            logger.info("iter %5d  loss %.6e  |g| %.3e", it, result.loss, log[-1]["grad_norm"])

    loss_trend_ok(log)
    return TrainingResult(params=field.params, log=log, seed=seed)


def train_repeats(config: TrainConfig, data: Trajectory) -> List[TrainingResult]:
    """Independent runs with seeds seed, seed+1, ..., seed+repeats-1."""
    return [train(config, data, seed=config.seed + k) for k in range(config.repeats)]


def loss_trend_ok(log: List[dict], window: int = 100) -> bool:
    """
    Soft check that the moving-average loss went down over the run.

    Logs a warning instead of failing.
    """
    losses = np.array([r["loss"] for r in log if not r.get("skipped")])
    width = min(window, losses.size // 2)
    if width < 1:
        return True
    averaged = np.convolve(losses, np.ones(width) / width, mode="valid")
    ok = bool(averaged[-1] < averaged[0])
    if not ok:
        logger.warning(
            "Loss moving average did not decrease (%.3e -> %.3e, window %d)", averaged[0], averaged[-1], width
        )
    return ok


def predict(config: TrainConfig, data: Trajectory, result: TrainingResult) -> ObservedSolve:
    """Solve the trained field over the data interval, keeping the observed states."""
    field = mlp_field(data.dim, config.hidden, result.seed, config.time_dependent).with_params(result.params)
    coupling = config.coupling if config.scheme == "reversible" else None
    return observe_trajectory(
        data.values[0].copy(),
        field,
        make_tableau(config.solver),
        build_schedule(config, data),
        build_loss(config, data),
        coupling,
    )
