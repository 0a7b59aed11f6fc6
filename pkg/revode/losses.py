"""Losses evaluated at observation times on the solver grid."""

from abc import ABC, abstractmethod
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError

# relative tolerance for matching an observation time to a grid time
GRID_MATCH_TOL = 1e-9


class ObservationLoss(ABC):
    """
    A scalar loss that is a sum of per-observation terms L_m(y(t_m)).

    Engines stream grid values into `value` on the forward pass and pull
    `gradient` when the matching step index is reached on the backward pass.
    """

    def __init__(self, obs_times):
        obs_times = np.asarray(obs_times, dtype=np.float64).reshape(-1)
        if obs_times.size == 0:
            raise ConfigurationError("a loss needs at least one observation time")
        if np.any(np.diff(obs_times) <= 0.0):
            raise ConfigurationError("observation times must be strictly increasing")
        self.obs_times = obs_times

    @property
    def n_obs(self) -> int:
        return self.obs_times.size

    def index_map(self, grid_times: np.ndarray) -> Dict[int, int]:
        """
        Map step index n -> observation index m for every observation.

        Raises:
            ConfigurationError: If an observation time is not on the grid
        """
        grid_times = np.asarray(grid_times)
        mapping = {}
        for m, t_obs in enumerate(self.obs_times):
            n = int(np.argmin(np.abs(grid_times - t_obs)))
            if abs(grid_times[n] - t_obs) > GRID_MATCH_TOL * max(1.0, abs(t_obs)):
                raise ConfigurationError(
                    f"observation time {t_obs!r} is not on the step grid "
                    f"[{grid_times[0]!r}, {grid_times[-1]!r}]"
                )
            mapping[n] = m
        return mapping

    @abstractmethod
    def value(self, m: int, y: np.ndarray) -> float:
        raise NotImplementedError

    @abstractmethod
    def gradient(self, m: int, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class TrajectoryLoss(ObservationLoss):
    """Mean squared error over all M·d observed entries."""

    def __init__(self, obs_times, targets):
        super().__init__(obs_times)
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets[:, None]
        if targets.shape[0] != self.n_obs:
            raise ConfigurationError(
                f"{targets.shape[0]} targets for {self.n_obs} observation times"
            )
        self.targets = targets
        self._scale = 1.0 / targets.size

    def value(self, m, y):
        r = np.asarray(y) - self.targets[m]
        return float(np.dot(r, r) * self._scale)

    def gradient(self, m, y):
        return 2.0 * self._scale * (np.asarray(y) - self.targets[m])


class LinearLoss(ObservationLoss):
    """L = Σ_m w_m · y(t_m); gradients do not depend on the state."""

    def __init__(self, obs_times, weights):
        super().__init__(obs_times)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim == 1:
            weights = np.broadcast_to(weights, (self.n_obs, weights.size))
        if weights.shape[0] != self.n_obs:
            raise ConfigurationError("one weight row is needed per observation time")
        self.weights = np.array(weights)

    def value(self, m, y):
        return float(np.dot(self.weights[m], y))

    def gradient(self, m, y):
        return self.weights[m].copy()


def terminal_loss(t_end: float, dim: int) -> LinearLoss:
    """L = Σ_i y_i(T), the y_N loss used by the reversible backprop derivation."""
    return LinearLoss([t_end], np.ones(dim))


def mse_loss(predicted, target) -> Tuple[float, np.ndarray]:
    """
    Mean squared error between two trajectories on the same grid.

    Args:
        predicted: Object with `times` (M,) and `values` (M, d)
        target: Same layout as predicted

    Returns:
        Tuple[float, np.ndarray]: Loss and the (M, d) gradient 2(ŷ - y)/(M·d)
    """
    p_times, t_times = np.asarray(predicted.times), np.asarray(target.times)
    p_vals, t_vals = np.asarray(predicted.values), np.asarray(target.values)
    if p_vals.shape != t_vals.shape or p_times.shape != t_times.shape:
        raise ConfigurationError(
            f"trajectory shapes differ: {p_vals.shape} vs {t_vals.shape}"
        )
    if np.any(np.abs(p_times - t_times) > GRID_MATCH_TOL * np.maximum(1.0, np.abs(t_times))):
        raise ConfigurationError("trajectories are sampled on different time grids")
    r = p_vals - t_vals
    return float(np.mean(r * r)), 2.0 * r / r.size


class ObservationStream:
    """
    Feeds grid values to a loss as a forward solve passes observation times.

    Observation times are visited in order; `snapshots` keeps copies of the
    observed states only when asked to.
    """

    def __init__(self, loss: Optional[ObservationLoss], keep_snapshots: bool = False):
        self.loss = loss
        self.keep_snapshots = keep_snapshots
        self.value = 0.0
        self.snapshots: List[Tuple[float, np.ndarray]] = []
        self._next = 0

    def visit(self, t: float, y: np.ndarray) -> None:
        if self.loss is None or self._next >= self.loss.n_obs:
            return
        t_obs = self.loss.obs_times[self._next]
        if abs(t - t_obs) <= GRID_MATCH_TOL * max(1.0, abs(t_obs)):
            self.value += self.loss.value(self._next, y)
            if self.keep_snapshots:
                self.snapshots.append((t, np.array(y, copy=True)))
            self._next += 1

    def check_complete(self) -> None:
        if self.loss is not None and self._next < self.loss.n_obs:
            raise ConfigurationError(
                f"observation time {self.loss.obs_times[self._next]!r} was never reached on the step grid"
            )
