import numpy as np
import pytest

from densityplan.dynamics import CarConfig, TimeGrid
from densityplan.policy import PolicyParams


@pytest.fixture
def car():
    return CarConfig()


@pytest.fixture
def open_loop_car():
    return CarConfig().open_loop()


@pytest.fixture
def grid():
    return TimeGrid(dt=0.1, n_steps=100, substeps=5)


@pytest.fixture
def short_grid():
    return TimeGrid(dt=0.1, n_steps=10, substeps=5)


def make_policy(knots, start=None, horizon=10.0):
    if start is None:
        start = np.zeros(5)
    return PolicyParams(np.asarray(knots, dtype=float), np.asarray(start, dtype=float),
                        horizon)


def straight_policy(v0=1.0, horizon=10.0, n_knots=10):
    """All-zero knots: constant-speed straight line."""
    start = np.array([0.0, 0.0, 0.0, v0, 0.0])
    return make_policy(np.zeros((n_knots, 2)), start, horizon)


def random_policy(rng, car=None, start=None, horizon=10.0, n_knots=10):
    box = (car or CarConfig()).knot_box()
    knots = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((n_knots, 2))
    if start is None:
        start = np.array([0.0, 0.0, 0.0, 1.5, 0.0])
    return make_policy(knots, start, horizon)
