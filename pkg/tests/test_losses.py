import numpy as np
import pytest

from revode.errors import ConfigurationError
from revode.experiments.datasets import Trajectory
from revode.losses import LinearLoss, ObservationStream, TrajectoryLoss, mse_loss, terminal_loss


def test_mse_of_identical_trajectories_is_zero():
    traj = Trajectory([0.0, 1.0], [[1.0, 2.0], [3.0, 4.0]])
    loss, grad = mse_loss(traj, traj)
    assert loss == 0.0
    assert not grad.any()


def test_mse_single_scalar():
    loss, grad = mse_loss(Trajectory([0.0], [1.0]), Trajectory([0.0], [0.0]))
    assert loss == 1.0
    assert grad.tolist() == [[2.0]]


def test_mse_random_pair(rng):
    a = Trajectory(np.arange(5.0), rng.normal(size=(5, 3)))
    b = Trajectory(np.arange(5.0), rng.normal(size=(5, 3)))
    loss, grad = mse_loss(a, b)
    r = a.values - b.values
    assert loss == pytest.approx(np.sum(r ** 2) / 15)
    np.testing.assert_allclose(grad, 2 * r / 15)


def test_mse_grid_mismatch():
    with pytest.raises(ConfigurationError):
        mse_loss(Trajectory([0.0, 1.0], [1.0, 2.0]), Trajectory([0.0, 1.5], [1.0, 2.0]))
    with pytest.raises(ConfigurationError):
        mse_loss(Trajectory([0.0, 1.0], [1.0, 2.0]), Trajectory([0.0, 1.0], [[1.0, 2.0], [3.0, 4.0]]))


def test_trajectory_loss_terms_sum_to_mse(rng):
    times = np.linspace(0.0, 1.0, 4)
    targets = rng.normal(size=(4, 2))
    predicted = rng.normal(size=(4, 2))
    loss = TrajectoryLoss(times, targets)
    total = sum(loss.value(m, predicted[m]) for m in range(4))
    assert total == pytest.approx(mse_loss(Trajectory(times, predicted), Trajectory(times, targets))[0])
    np.testing.assert_allclose(loss.gradient(1, predicted[1]), 2 * (predicted[1] - targets[1]) / 8)


def test_index_map_matches_grid_and_rejects_off_grid():
    loss = TrajectoryLoss([0.5, 1.0], [[0.0], [0.0]])
    grid = np.linspace(0.0, 1.0, 5)
    assert loss.index_map(grid) == {2: 0, 4: 1}
    with pytest.raises(ConfigurationError):
        loss.index_map(np.linspace(0.0, 1.0, 4))


def test_observation_times_must_increase():
    with pytest.raises(ConfigurationError):
        TrajectoryLoss([1.0, 0.5], [[0.0], [0.0]])
    with pytest.raises(ConfigurationError):
        TrajectoryLoss([], np.zeros((0, 1)))


def test_terminal_loss_is_sum_of_components():
    loss = terminal_loss(2.0, 3)
    assert loss.value(0, np.array([1.0, 2.0, 3.0])) == 6.0
    assert loss.gradient(0, np.zeros(3)).tolist() == [1.0, 1.0, 1.0]


def test_stream_accumulates_in_order_and_checks_completion():
    loss = LinearLoss([0.5, 1.0], np.array([1.0]))
    stream = ObservationStream(loss, keep_snapshots=True)
    for t, y in [(0.0, 5.0), (0.5, 2.0), (0.75, 9.0), (1.0, 3.0)]:
        stream.visit(t, np.array([y]))
    stream.check_complete()
    assert stream.value == 5.0
    assert [t for t, _ in stream.snapshots] == [0.5, 1.0]

    partial = ObservationStream(loss)
    partial.visit(0.5, np.array([1.0]))
    with pytest.raises(ConfigurationError):
        partial.check_complete()
