"""Reference-trajectory parameterization.

A policy is a set of K input knots (omega_ref, a_ref) at uniform times over
the horizon, interpolated piecewise-linearly, plus the reference start state.
The encoded nominal path is recovered by an open-loop rollout of the car.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from ._kernels import ref_rollout
from .dynamics import TimeGrid

DEFAULT_KNOTS = 10

_FINE_SEGMENTS = 2000


@dataclass
class PolicyParams:
    """Decision variable of the planner.

    knots: (K, 2) reference input values at uniform times over [0, horizon].
    start_ref: (5,) reference start state, bias component zero.
    """

    knots: np.ndarray
    start_ref: np.ndarray
    horizon_s: float
    _ref_cache: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        self.start_ref = np.asarray(self.start_ref, dtype=float)
        if self.knots.ndim != 2 or self.knots.shape[1] != 2 or self.knots.shape[0] < 2:
            raise ValueError("need at least 2 knots of shape (K, 2)")
        if self.start_ref.shape != (5,):
            raise ValueError("start_ref must be a 5-state")
        if self.start_ref[dynamics.BIAS] != 0.0:
            raise ValueError("reference start must carry zero bias")
        if self.horizon_s <= 0:
            raise ValueError("horizon must be positive")

    @property
    def n_knots(self) -> int:
        return self.knots.shape[0]

    def reference_input(self, t: float) -> np.ndarray:
        """Piecewise-linear interpolation of the knots at time ``t``."""
        dynamics._check_time(t, self)
        K = self.n_knots
        eta = t * (K - 1) / self.horizon_s
        j = min(max(int(eta), 0), K - 2)
        w = min(max(eta - j, 0.0), 1.0)
        return (1.0 - w) * self.knots[j] + w * self.knots[j + 1]

    def reference_state(self, t: float) -> np.ndarray:
        """Reference state (4 components) at time ``t``.

        Backed by a lazily built fine-grained open-loop rollout; accurate to
        well below integrator tolerances for the standalone field/divergence
        operations (batch planning uses the rollout kernels directly).
        """
        dynamics._check_time(t, self)
        if self._ref_cache is None:
            dt_fine = self.horizon_s / _FINE_SEGMENTS
            states, _ = ref_rollout(self.start_ref[None, :4], self.knots[None],
                                    dt_fine, _FINE_SEGMENTS, 1,
                                    np.zeros(10))
            self._ref_cache = (dt_fine, states[0])
        dt_fine, states = self._ref_cache
        eta = min(max(t / dt_fine, 0.0), _FINE_SEGMENTS - 1e-9)
        j = int(eta)
        w = eta - j
        return (1.0 - w) * states[j] + w * states[j + 1]

    def to_json(self) -> str:
        return json.dumps({
            "knots": self.knots.tolist(),
            "start_ref": self.start_ref.tolist(),
            "horizon_s": self.horizon_s,
        })

    @classmethod
    def from_json(cls, text: str) -> "PolicyParams":
        data = json.loads(text)
        return cls(np.array(data["knots"], dtype=float),
                   np.array(data["start_ref"], dtype=float),
                   float(data["horizon_s"]))


@dataclass
class ReferenceTrajectory:
    """Nominal states at t_0..t_N and interpolated inputs at t_0..t_{N-1}."""

    states: np.ndarray
    inputs: np.ndarray


def _check_grid(p: PolicyParams, grid: TimeGrid):
    if abs(grid.horizon - p.horizon_s) > 1e-9:
        raise ValueError("time grid does not match the policy horizon")


def recover_reference(p: PolicyParams, grid: TimeGrid) -> ReferenceTrajectory:
    """Open-loop RK4 rollout of the encoded reference on the output grid."""
    _check_grid(p, grid)
    states4, inputs = ref_rollout(p.start_ref[None, :4], p.knots[None],
                                  grid.dt, grid.n_steps, grid.substeps,
                                  np.zeros(10))
    states = np.zeros((grid.n_steps + 1, 5))
    states[:, :4] = states4[0]
    return ReferenceTrajectory(states=states, inputs=inputs[0])


def sample_params(m: int, bounds, rng_seed: int, n_knots: int = DEFAULT_KNOTS,
                  start_ref=None, horizon_s: float = 10.0) -> list[PolicyParams]:
    """Draw ``m`` i.i.d. uniform knot sets from the given input box.

    bounds: (2, 2) array [[omega_lo, omega_hi], [a_lo, a_hi]]. Deterministic
    for a fixed seed.
    """
    if m < 1:
        raise ValueError("need at least one sample")
    bounds = np.asarray(bounds, dtype=float)
    if start_ref is None:
        start_ref = np.zeros(5)
    rng = np.random.default_rng(rng_seed)
    lo = bounds[:, 0]
    width = bounds[:, 1] - bounds[:, 0]
    draws = rng.random((m, n_knots, 2))
    knots = lo + width * draws
    return [PolicyParams(knots[i], np.array(start_ref, dtype=float), horizon_s)
            for i in range(m)]


def sample_knot_array(m: int, bounds, rng_seed: int,
                      n_knots: int = DEFAULT_KNOTS) -> np.ndarray:
    """Knot tensor (m, K, 2) drawn exactly like :func:`sample_params`."""
    bounds = np.asarray(bounds, dtype=float)
    rng = np.random.default_rng(rng_seed)
    return bounds[:, 0] + (bounds[:, 1] - bounds[:, 0]) * rng.random((m, n_knots, 2))
