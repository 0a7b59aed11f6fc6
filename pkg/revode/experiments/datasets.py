"""
Training data: reference trajectories from known dynamics and CSV ingestion.

The white-dwarf trajectory follows the experiment setup; the coupled
oscillator and Lorenz trajectories are synthetic stand-ins and are
labelled as such.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..errors import ConfigurationError, DataError, ParseError
from ..field_core import (
    LorenzField,
    Params,
    TensorSpec,
    VectorField,
    WhiteDwarfField,
    linear_system_field,
    lorenz_field,
)
from ..rk_solvers import make_tableau, step

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
REFERENCE_SUBSTEPS = 20


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Samples y(t_m) on strictly increasing times; values has shape (M, d)."""

    times: np.ndarray
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != times.size:
            raise DataError(f"{times.size} times but {values.shape[0]} value rows")
        if times.size < 1:
            raise DataError("a trajectory needs at least one sample")
        if np.any(np.diff(times) <= 0.0):
            raise DataError("trajectory times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise DataError("trajectory contains non-finite values")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_points(self) -> int:
        return self.times.size

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Normalization:
    """Per-channel affine map to zero mean and unit variance."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalization":
        values = np.asarray(values, dtype=np.float64)
        return cls(values.mean(axis=0), np.sqrt(np.maximum(values.var(axis=0), VARIANCE_FLOOR)))

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def normalize(traj: Trajectory) -> Tuple[Trajectory, Normalization]:
    stats = Normalization.fit(traj.values)
    return Trajectory(traj.times, stats.apply(traj.values), traj.label), stats


def reference_solution(field: VectorField, y0, times: Sequence[float], substeps: int = REFERENCE_SUBSTEPS) -> np.ndarray:
    """
    RK4 solution sampled at `times`, with `substeps` equal steps per interval.

    Each interval restarts from its exact grid time so sampling does not
    accumulate time drift.
    """
    tab = make_tableau("rk4")
    times = np.asarray(times, dtype=np.float64)
    y = np.array(y0, dtype=np.float64)
    out = np.empty((times.size, y.size))
    out[0] = y
    for k in range(times.size - 1):
        h = (times[k + 1] - times[k]) / substeps
        for j in range(substeps):
            y = y + step(field, tab, times[k] + j * h, y, h).increment
        out[k + 1] = y
    return out


def white_dwarf_field(C: float) -> WhiteDwarfField:
    """Chandrasekhar white-dwarf dynamics for 0 < C < 1."""
    if not 0.0 < C < 1.0:
        raise ConfigurationError(f"white-dwarf constant must lie in (0, 1), got {C}")
    return WhiteDwarfField(Params([C], [TensorSpec("C", ())]))


def generate_white_dwarf(
    C: float = 0.001,
    r_range: Tuple[float, float] = (0.0, 5.0),
    n_points: int = 1000,
    substeps: int = REFERENCE_SUBSTEPS,
) -> Trajectory:
    """(φ, φ') on a uniform r grid from φ(0) = 1, φ'(0) = 0."""
    if n_points < 2:
        raise ConfigurationError("n_points must be at least 2")
    times = np.linspace(r_range[0], r_range[1], n_points)
    values = reference_solution(white_dwarf_field(C), [1.0, 0.0], times, substeps)
    return Trajectory(times, values, label=f"white-dwarf C={C}")


def coupled_oscillator_matrix(stiffness: float = 1.0, coupling: float = 0.5, damping: float = 0.1) -> np.ndarray:
    """State (x1, x2, v1, v2) of two damped springs joined by a third spring."""
    k, kappa, c = stiffness, coupling, damping
    return np.array(
        [
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [-(k + kappa), kappa, -c, 0.0],
            [kappa, -(k + kappa), 0.0, -c],
        ]
    )


def generate_coupled_oscillator(n_points: int = 200, t_end: float = 3.0, **matrix_kwargs) -> Trajectory:
    """Synthetic (non-experiment) data: two linearly coupled damped springs."""
    times = np.linspace(0.0, t_end, n_points)
    field = linear_system_field(coupled_oscillator_matrix(**matrix_kwargs))
    values = reference_solution(field, [1.0, 0.0, 0.0, 0.0], times)
    return Trajectory(times, values, label="synthetic coupled oscillator")


def generate_lorenz(
    n_points: int = 500,
    t_end: float = 2.0,
    y0: Sequence[float] = (-8.0, 7.0, 27.0),
    field: Optional[LorenzField] = None,
) -> Trajectory:
    """Synthetic chaotic data from the Lorenz system (un-normalized)."""
    times = np.linspace(0.0, t_end, n_points)
    values = reference_solution(field or lorenz_field(), y0, times)
    return Trajectory(times, values, label="synthetic lorenz")


def _parse_frame(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"could not read {path}: {e}") from e
    if raw.shape[1] < 2:
        raise DataError(f"{path} needs a time column and at least one value column")
    parsed = raw.apply(pd.to_numeric, errors="coerce")
    bad = parsed.isna().to_numpy()
    if bad.any():
        row, col = map(int, np.argwhere(bad)[0])
        column = str(raw.columns[col])
        # line numbers count the header as line 1
        raise ParseError(f"cannot parse {raw.iat[row, col]!r} as float64", row=row + 2, column=column)
    return parsed.astype(np.float64)


def read_trajectory_csv(path) -> Trajectory:
    """Read a `t,y0,...,y{d-1}` file without resampling."""
    frame = _parse_frame(Path(path))
    return Trajectory(frame.iloc[:, 0].to_numpy(), frame.iloc[:, 1:].to_numpy(), label=Path(path).stem)


def write_trajectory_csv(traj: Trajectory, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = {"t": traj.times}
    for i in range(traj.dim):
        columns[f"y{i}"] = traj.values[:, i]
    pd.DataFrame(columns).to_csv(path, index=False, float_format="%.17g")
    return path


def ingest_csv(
    path,
    t_range: Optional[Tuple[float, float]] = None,
    n_points: int = 500,
    normalize_values: bool = True,
) -> Tuple[Trajectory, Optional[Normalization]]:
    """
    Load a time series and resample it onto a uniform grid.

    Args:
        path: CSV with a time column first and one or more value columns
        t_range: Resampling interval; defaults to the data's own span
        n_points: Number of uniform samples
        normalize_values: Map each channel to zero mean and unit variance

    Returns:
        Tuple[Trajectory, Optional[Normalization]]: Resampled data and the
        statistics needed to undo the normalization

    Raises:
        DataError: On unsorted or duplicate times or an out-of-range t_range
        ParseError: On a non-numeric cell, with its row and column
    """
    path = Path(path)
    frame = _parse_frame(path)
    t = frame.iloc[:, 0].to_numpy()
    diffs = np.diff(t)
    if np.any(diffs == 0.0):
        raise DataError(f"{path}: duplicate time {t[1:][diffs == 0.0][0]!r}")
    if np.any(diffs < 0.0):
        raise DataError(f"{path}: times are not sorted")
    if n_points < 2:
        raise ConfigurationError("n_points must be at least 2")
    lo, hi = t_range if t_range is not None else (t[0], t[-1])
    if lo < t[0] or hi > t[-1] or not hi > lo:
        raise DataError(f"{path}: range [{lo}, {hi}] is outside the data span [{t[0]}, {t[-1]}]")

    grid = np.linspace(lo, hi, n_points)
    values = np.column_stack([np.interp(grid, t, frame.iloc[:, j].to_numpy()) for j in range(1, frame.shape[1])])
    traj = Trajectory(grid, values, label=path.stem)
    logger.info("Ingested %s: %d rows -> %d samples, %d channels", path.name, t.size, n_points, traj.dim)
    if not normalize_values:
        return traj, None
    return normalize(traj)
