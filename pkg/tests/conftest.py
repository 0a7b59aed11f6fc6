import numpy as np
import pytest

from revode.field_core import mlp_field
from revode.losses import TrajectoryLoss
from revode.rk_solvers import TABLEAU_NAMES, make_tableau
from revode.step_control import FixedSchedule

ALL_TABLEAUX = list(TABLEAU_NAMES)
FIXED_TABLEAUX = ["euler", "midpoint", "ralston3", "rk4"]
COUPLINGS = [0.99, 0.999, 1.0]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def rk4():
    return make_tableau("rk4")


@pytest.fixture
def small_mlp():
    return mlp_field(dim=2, hidden=10, seed=7)


def observation_problem(n_steps=50, n_obs=5, dim=2, seed=0, t_end=1.0):
    """Random MLP, y0 and an MSE loss observed on a fixed grid."""
    rng = np.random.default_rng(seed)
    field = mlp_field(dim, 10, seed)
    schedule = FixedSchedule(0.0, t_end, n_steps)
    times = schedule.record().times
    idx = np.linspace(n_steps / n_obs, n_steps, n_obs).round().astype(int)
    loss = TrajectoryLoss(times[idx], rng.normal(size=(n_obs, dim)))
    return field, rng.normal(size=dim), schedule, loss


@pytest.fixture
def problem():
    return observation_problem()
