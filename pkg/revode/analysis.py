"""
Studies behind the CLI subcommands and the statistics used to summarize them.

Deviation summaries follow the same shape throughout: rows are grouped
by a key, each numeric metric gets mean/min/max/range and an average
percentage deviation from the mean, and the groups are rolled up into
overall figures.
"""

import logging
import time
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .baseline_backprop import checkpointed_backprop, full_tape_backprop, simulate_schedule
from .errors import ConfigurationError
from .field_core import VectorField, linear_field, linear_system_field, mlp_field, zero_mlp_field
from .losses import TrajectoryLoss
from .reversible_engine import Coupling, reversible_gradient, solve_forward
from .rk_solvers import make_tableau, step
from .stability_lab import region_scan, verdict_grid
from .step_control import AdaptiveSchedule, ControllerConfig, FixedSchedule

logger = logging.getLogger(__name__)

SLOPE_ERROR_FLOOR = 1e-12


def relative_linf(a, b) -> float:
    """‖a - b‖∞ / max(‖b‖∞, 1e-300); two all-zero vectors deviate by 0."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    diff = float(np.max(np.abs(a - b)))
    if diff == 0.0:
        return 0.0
    return diff / max(float(np.max(np.abs(b))), 1e-300)


def fit_slope(hs: Sequence[float], errors: Sequence[float], floor: float = SLOPE_ERROR_FLOOR) -> float:
    """
    Least-squares slope of log(error) against log(h).

    Errors at or below `floor` are dominated by roundoff and left out.
    Returns nan with fewer than two usable points.
    """
    hs, errors = np.asarray(hs, dtype=np.float64), np.asarray(errors, dtype=np.float64)
    keep = errors > floor
    if keep.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(hs[keep]), np.log(errors[keep]), 1)
    return float(slope)


def calculate_deviations(results: List[dict], group_key: str, metrics: Sequence[str]) -> dict:
    """Spread of numeric metrics across repeated rows, per group and overall."""
    groups: Dict[str, List[dict]] = {}
    for row in results:
        groups.setdefault(str(row[group_key]), []).append(row)

    deviations = {
        "per_group": {},
        "overall": {
            "metrics": {m: {"total_deviation": 0.0, "count": 0, "avg_deviation": 0.0} for m in metrics},
            "avg_total_deviation": 0.0,
        },
    }
    total = 0.0
    for name, rows in groups.items():
        entry = {"metrics": {}, "max_deviation": 0.0, "most_inconsistent_metric": None, "avg_total_deviation": 0.0}
        group_total = 0.0
        for metric in metrics:
            values = [float(r[metric]) for r in rows if r.get(metric) is not None]
            if not values:
                continue
            mean_value = float(np.mean(values))
            if mean_value != 0.0:
                avg_deviation = float(np.mean([abs(v - mean_value) / abs(mean_value) * 100 for v in values]))
            else:
                avg_deviation = 0.0
            entry["metrics"][metric] = {
                "mean": mean_value,
                "std": float(np.std(values)),
                "min": min(values),
                "max": max(values),
                "range": max(values) - min(values),
                "avg_deviation_percent": round(avg_deviation, 4),
                "values": values,
            }
            if avg_deviation > entry["max_deviation"]:
                entry["max_deviation"] = avg_deviation
                entry["most_inconsistent_metric"] = metric
            group_total += avg_deviation
            overall = deviations["overall"]["metrics"][metric]
            overall["total_deviation"] += avg_deviation
            overall["count"] += 1
        entry["avg_total_deviation"] = round(group_total / max(len(metrics), 1), 4)
        deviations["per_group"][name] = entry
        total += entry["avg_total_deviation"]

    if groups:
        deviations["overall"]["avg_total_deviation"] = round(total / len(groups), 4)
        for data in deviations["overall"]["metrics"].values():
            if data["count"]:
                data["avg_deviation"] = round(data["total_deviation"] / data["count"], 4)
    return deviations


def format_deviation_summary(deviations: dict) -> Tuple[str, str]:
    """
    Render a deviation analysis.

    Returns:
        Tuple[str, str]: (detailed summary for the run directory, console summary)
    """
    overall = "\n📈 Overall Statistics\n" + "=" * 50 + "\n"
    overall += f"\nAverage deviation across groups: {deviations['overall']['avg_total_deviation']}%\n"
    ranked = sorted(deviations["overall"]["metrics"].items(), key=lambda x: x[1]["avg_deviation"], reverse=True)
    overall += "\nDeviation by metric:\n"
    for metric, stats in ranked:
        if stats["count"] > 0:
            overall += f"  • {metric}: ±{stats['avg_deviation']}%\n"

    detailed = "\n📊 Run Summary\n" + "=" * 50 + "\n" + overall
    detailed += "\n📄 Per-Group Analysis\n" + "=" * 50 + "\n"
    for name, stats in deviations["per_group"].items():
        detailed += f"\n📁 {name}\n"
        for metric, m in stats["metrics"].items():
            detailed += f"    • {metric}: mean {m['mean']:.6g} ± {m['std']:.3g} (range {m['min']:.6g} to {m['max']:.6g})\n"
    return detailed, overall


# ---------------------------------------------------------------- convergence


class ConvergenceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    solvers: List[str] = ["euler", "midpoint", "ralston3", "rk4"]
    h_list: List[float] = [2.0 ** -k for k in range(4, 10)]
    t_end: float = 1.0
    field: Literal["linear", "linear_system"] = "linear"
    alpha: float = -1.0
    matrix: List[List[float]] = [[-0.5, 1.0], [-1.0, -0.5]]
    coupling: float = 0.999

    @model_validator(mode="after")
    def _check(self):
        if not self.h_list:
            raise ConfigurationError("convergence needs a non-empty h_list")
        if any(h <= 0.0 for h in self.h_list):
            raise ConfigurationError("step sizes must be positive")
        for name in self.solvers:
            make_tableau(name)
        Coupling(self.coupling)
        if self.field == "linear_system":
            _, vectors = np.linalg.eig(linear_system_field(self.matrix).matrix)
            if np.linalg.cond(vectors) > 1e8:
                raise ConfigurationError("the convergence matrix must be diagonalizable")
        return self


def _test_problem(cfg: ConvergenceConfig) -> Tuple[VectorField, np.ndarray, np.ndarray]:
    """Field, initial state and exact solution at t_end."""
    if cfg.field == "linear":
        return linear_field(cfg.alpha), np.array([1.0]), np.array([np.exp(cfg.alpha * cfg.t_end)])
    field = linear_system_field(cfg.matrix)
    y0 = np.ones(field.dim)
    values, vectors = np.linalg.eig(field.matrix)
    exact = vectors @ (np.exp(values * cfg.t_end) * np.linalg.solve(vectors, y0))
    return field, y0, exact.real


def convergence_study(cfg: ConvergenceConfig) -> Tuple[List[dict], Dict[str, dict]]:
    """
    Global error at t_end for base and reversible solvers.

    The test problem is dy/dt = αy from y(0) = 1, or dy/dt = A·y from a
    vector of ones; the error is the max-norm distance to the exact solution.

    Returns:
        Tuple[List[dict], Dict[str, dict]]: Rows (solver, reversible, h,
        n_steps, error) and fitted slopes keyed by solver
    """
    field, y0, exact = _test_problem(cfg)
    rows: List[dict] = []
    for name in cfg.solvers:
        tab = make_tableau(name)
        for h in cfg.h_list:
            schedule = FixedSchedule.from_step_size(0.0, cfg.t_end, h)
            record = schedule.record()
            y = y0.copy()
            for n in range(record.n_steps):
                y = y + step(field, tab, float(record.times[n]), y, float(record.steps[n])).increment
            rows.append({"solver": name, "reversible": False, "h": h, "n_steps": record.n_steps, "error": float(np.max(np.abs(y - exact)))})
            terminal = solve_forward(y0, field, tab, schedule, cfg.coupling).terminal
            rows.append({"solver": name, "reversible": True, "h": h, "n_steps": record.n_steps, "error": float(np.max(np.abs(terminal.y - exact)))})

    slopes: Dict[str, dict] = {}
    for name in cfg.solvers:
        entry = {"order": make_tableau(name).order}
        for reversible in (False, True):
            sel = [r for r in rows if r["solver"] == name and r["reversible"] == reversible]
            entry["reversible" if reversible else "base"] = fit_slope([r["h"] for r in sel], [r["error"] for r in sel])
        slopes[name] = entry
        logger.info("%s: base slope %.3f, reversible slope %.3f", name, entry["base"], entry["reversible"])
    return rows, slopes


# ------------------------------------------------------------------ gradcheck


class GradcheckConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    solver: str = "rk4"
    n_steps: int = 100
    t_end: float = 1.0
    dim: int = 2
    hidden: int = 10
    n_obs: int = 10
    seed: int = 0
    n_seeds: int = 20
    coupling: float = 0.99
    budget: int = 4
    fd_step: float = 1e-6
    fd_params: Optional[int] = None
    zero_params: bool = False
    corrupt_backward_lambda: Optional[float] = None
    tol_reversible_vs_tape: float = 1e-8
    tol_tape_vs_fd: float = 1e-4
    tol_checkpointed_vs_tape: float = 1e-12

    @model_validator(mode="after")
    def _check(self):
        make_tableau(self.solver)
        Coupling(self.coupling)
        if not 1 <= self.n_steps <= 200:
            raise ConfigurationError("gradcheck keeps the full tape, use 1 <= n_steps <= 200")
        if not 1 <= self.n_obs <= self.n_steps or self.n_seeds < 1:
            raise ConfigurationError("need 1 <= n_obs <= n_steps and n_seeds >= 1")
        if self.budget < 2:
            raise ConfigurationError(f"checkpoint budget must be >= 2, got {self.budget}")
        if self.corrupt_backward_lambda is not None:
            Coupling(self.corrupt_backward_lambda)
        return self


def gradient_problem(cfg: GradcheckConfig, seed: int):
    """Random MLP, initial state and observation targets for one seed."""
    rng = np.random.default_rng(seed)
    schedule = FixedSchedule(0.0, cfg.t_end, cfg.n_steps)
    times = schedule.record().times
    idx = np.linspace(cfg.n_steps / cfg.n_obs, cfg.n_steps, cfg.n_obs).round().astype(int)
    y0 = rng.normal(size=cfg.dim)
    if cfg.zero_params:
        field = zero_mlp_field(cfg.dim, cfg.hidden)
        targets = np.tile(y0, (cfg.n_obs, 1))
    else:
        field = mlp_field(cfg.dim, cfg.hidden, seed)
        targets = rng.normal(size=(cfg.n_obs, cfg.dim))
    return field, y0, schedule, TrajectoryLoss(times[idx], targets)


def finite_difference_gradient(loss_of, theta: np.ndarray, eps: float, indices: Iterable[int]) -> np.ndarray:
    """Central differences (L(θ + εe_i) - L(θ - εe_i)) / 2ε on the given indices."""
    grad = np.zeros_like(theta)
    for i in indices:
        bump = np.zeros_like(theta)
        bump[i] = eps
        grad[i] = (loss_of(theta + bump) - loss_of(theta - bump)) / (2.0 * eps)
    return grad


def gradient_check(cfg: GradcheckConfig) -> dict:
    """
    Compare reversible, full-tape, checkpointed and finite-difference gradients.

    Returns a report with per-seed deviations, their maxima, the tolerances
    and an overall `passed` flag.
    """
    tab = make_tableau(cfg.solver)
    per_seed = []
    for seed in range(cfg.seed, cfg.seed + cfg.n_seeds):
        field, y0, schedule, loss = gradient_problem(cfg, seed)
        rev = reversible_gradient(
            y0, field, tab, schedule, cfg.coupling, loss, backward_coupling=cfg.corrupt_backward_lambda
        )
        tape = full_tape_backprop(y0, field, tab, schedule, loss, cfg.coupling)
        ckpt = checkpointed_backprop(y0, field, tab, schedule, loss, cfg.budget, cfg.coupling)

        def loss_of(theta):
            perturbed = field.with_params(field.params.with_values(theta))
            return solve_forward(y0, perturbed, tab, schedule, cfg.coupling, loss).loss_value

        theta = field.params.values
        indices = range(theta.size if cfg.fd_params is None else min(cfg.fd_params, theta.size))
        fd = finite_difference_gradient(loss_of, theta, cfg.fd_step, indices)
        idx = list(indices)
        per_seed.append(
            {
                "seed": seed,
                "loss": tape.loss,
                "reversible_vs_tape": max(
                    relative_linf(rev.theta_bar, tape.theta_bar), relative_linf(rev.y0_bar, tape.y0_bar)
                ),
                "tape_vs_fd": relative_linf(tape.theta_bar[idx], fd[idx]),
                "checkpointed_vs_tape": max(
                    relative_linf(ckpt.theta_bar, tape.theta_bar), relative_linf(ckpt.y0_bar, tape.y0_bar)
                ),
                "reversible_stored_state_peak": rev.counters.stored_state_peak,
                "checkpointed_stored_state_peak": ckpt.counters.stored_state_peak,
            }
        )

    tolerances = {
        "reversible_vs_tape": cfg.tol_reversible_vs_tape,
        "tape_vs_fd": cfg.tol_tape_vs_fd,
        "checkpointed_vs_tape": cfg.tol_checkpointed_vs_tape,
    }
    maxima = {k: max(r[k] for r in per_seed) for k in tolerances}
    failures = [k for k, tol in tolerances.items() if not maxima[k] <= tol]
    return {
        "config": cfg.model_dump(),
        "per_seed": per_seed,
        "max_deviation": maxima,
        "tolerances": tolerances,
        "failed_checks": failures,
        "passed": not failures,
    }


# ---------------------------------------------------------------------- bench


class BenchCell(BaseModel):
    """One (engine, solver, size, budget) cell; `iterations > 0` trains instead of taking one gradient."""

    model_config = ConfigDict(extra="forbid")

    engine: Literal["reversible", "full_tape", "checkpointed", "simulate"] = "reversible"
    solver: str = "rk4"
    scheme: Literal["reversible", "plain"] = "reversible"
    n_steps: Optional[int] = 1000
    tolerance: Optional[float] = None
    t_end: float = 1.0
    budget: int = 2
    coupling: float = 0.99
    dim: int = 2
    hidden: int = 10
    seed: int = 0
    iterations: int = 0
    dataset: Literal["white_dwarf", "coupled_oscillator", "lorenz"] = "white_dwarf"
    timed: bool = False

    @model_validator(mode="after")
    def _check(self):
        tab = make_tableau(self.solver)
        Coupling(self.coupling)
        if self.tolerance is None and (self.n_steps is None or self.n_steps < 1):
            raise ConfigurationError("a bench cell needs n_steps >= 1 or a tolerance")
        if self.tolerance is not None and not tab.adaptive:
            raise ConfigurationError(f"tolerance-driven cells need an embedded tableau, {self.solver} has none")
        if self.engine == "reversible" and self.scheme == "plain":
            raise ConfigurationError("the reversible engine only runs the reversible scheme")
        if self.engine in ("checkpointed", "simulate") and self.budget < 2:
            raise ConfigurationError(f"checkpoint budget must be >= 2, got {self.budget}")
        if self.engine == "simulate" and (self.tolerance is not None or self.iterations):
            raise ConfigurationError("simulated cells need a fixed n_steps and no training")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        return self

    @property
    def label(self) -> str:
        size = f"tol={self.tolerance:g}" if self.tolerance is not None else f"N={self.n_steps}"
        extra = f",c={self.budget}" if self.engine in ("checkpointed", "simulate") else ""
        return f"{self.engine}/{self.scheme}/{self.solver}/{size}{extra}"


class BenchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cells: List[BenchCell]
    repeats: int = 1

    @model_validator(mode="after")
    def _check(self):
        if not self.cells:
            raise ConfigurationError("bench needs at least one cell")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        return self


def _bench_training(cell: BenchCell) -> dict:
    # deferred: training pulls in the dataset generators
    from .experiments.training import DatasetConfig, TrainConfig, load_dataset, train

    controller = ControllerConfig(atol=cell.tolerance, rtol=cell.tolerance) if cell.tolerance is not None else None
    cfg = TrainConfig(
        solver=cell.solver,
        engine=cell.engine,
        scheme=cell.scheme,
        budget=cell.budget,
        coupling=cell.coupling,
        controller=controller,
        hidden=cell.hidden,
        iterations=cell.iterations,
        seed=cell.seed,
        log_every=0,
        dataset=DatasetConfig(kind=cell.dataset, n_points=(cell.n_steps or 100) + 1, normalize=True),
    )
    result = train(cfg, load_dataset(cfg.dataset))
    done = [r for r in result.log if not r.get("skipped")]
    last = done[-1] if done else {}
    return {
        "loss": result.final_loss,
        "stored_state_peak": last.get("stored_state_peak"),
        "step_evals": sum(r["step_evals"] for r in done),
        "vjp_evals": sum(r["vjp_evals"] for r in done),
        "n_steps_solver": last.get("n_steps_solver"),
        "skipped_iterations": len(result.log) - len(done),
    }


def run_bench_cell(cell: BenchCell) -> dict:
    """Counters and wall times of one gradient computation, or of a short training run."""
    row = {"cell": cell.label, "engine": cell.engine, "solver": cell.solver, "scheme": cell.scheme,
           "n_steps": cell.n_steps, "tolerance": cell.tolerance, "budget": cell.budget}
    if cell.engine == "simulate":
        row.update(simulate_schedule(cell.n_steps, cell.budget).to_dict())
        row.update({"loss": None, "forward_ms": 0.0, "backward_ms": 0.0, "wall_ms": 0.0})
        return row

    if cell.iterations:
        start = time.perf_counter()
        row.update(_bench_training(cell))
        row["wall_ms"] = (time.perf_counter() - start) * 1e3
        return row

    tab = make_tableau(cell.solver)
    rng = np.random.default_rng(cell.seed)
    field = mlp_field(cell.dim, cell.hidden, cell.seed)
    y0 = rng.normal(size=cell.dim)
    if cell.tolerance is not None:
        schedule = AdaptiveSchedule(0.0, cell.t_end, ControllerConfig(atol=cell.tolerance, rtol=cell.tolerance))
    else:
        schedule = FixedSchedule(0.0, cell.t_end, cell.n_steps)
    loss = TrajectoryLoss([cell.t_end], rng.normal(size=(1, cell.dim)))
    coupling = cell.coupling if cell.scheme == "reversible" else None

    start = time.perf_counter()
    if cell.engine == "reversible":
        result = reversible_gradient(y0, field, tab, schedule, cell.coupling, loss)
    elif cell.engine == "full_tape":
        result = full_tape_backprop(y0, field, tab, schedule, loss, coupling)
    else:
        result = checkpointed_backprop(y0, field, tab, schedule, loss, cell.budget, coupling)
    wall = (time.perf_counter() - start) * 1e3
    row.update(result.counters.to_dict())
    row.update({"loss": result.loss, "forward_ms": result.forward_ms, "backward_ms": result.backward_ms, "wall_ms": wall})
    return row


# ------------------------------------------------------------------ stability


class StabilityConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tableaux: List[str] = ["euler", "midpoint", "ralston3", "rk4", "bosh3"]
    lambdas: List[float] = [0.5, 0.9, 0.99, 0.999, 1.0]
    h_alpha_min: float = -5.0
    h_alpha_max: float = -0.01
    n_grid: int = 100
    empirical_steps: int = 0
    include_legacy: bool = False
    write_grid: bool = True

    @model_validator(mode="after")
    def _check(self):
        for name in self.tableaux:
            make_tableau(name)
        for lam in self.lambdas:
            Coupling(lam)
        if not self.h_alpha_min < self.h_alpha_max < 0.0:
            raise ConfigurationError("need h_alpha_min < h_alpha_max < 0")
        if self.n_grid < 2 or self.empirical_steps < 0:
            raise ConfigurationError("n_grid must be >= 2 and empirical_steps >= 0")
        if not self.tableaux or not self.lambdas:
            raise ConfigurationError("stability needs at least one tableau and one coupling")
        return self

    @property
    def h_alphas(self) -> np.ndarray:
        return np.linspace(self.h_alpha_min, self.h_alpha_max, self.n_grid)


def stability_study(cfg: StabilityConfig) -> Tuple[List[dict], List[dict]]:
    """
    Boundary table and, optionally, the full verdict grid for every tableau.

    Returns:
        Tuple[List[dict], List[dict]]: Region rows and grid rows, each
        tagged with the tableau name
    """
    regions, grid = [], []
    for name in cfg.tableaux:
        tab = make_tableau(name)
        for row in region_scan(tab, cfg.lambdas, cfg.h_alphas):
            regions.append({"tableau": name, **row})
        if cfg.write_grid:
            rows = verdict_grid(tab, cfg.lambdas, cfg.h_alphas, cfg.empirical_steps, cfg.include_legacy)
            grid.extend({"tableau": name, **row} for row in rows)
        logger.info("%s: scanned %d couplings", name, len(cfg.lambdas))
    return regions, grid
