"""Vehicle dynamics, closed-loop field, RK4 integration, and divergence.

States are float64 arrays of length 5: (p_x, p_y, theta, v, theta_bias).
The heading-measurement bias is a constant of the motion (its derivative is
exactly zero); the closed loop feeds the tracking controller the biased
measurement (p_x, p_y, theta + theta_bias, v, 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import pure as _pure
from ._kernels import closed_rollout

# State component indices.
PX, PY, TH, V, BIAS = 0, 1, 2, 3, 4
STATE_DIM = 5


class IntegrationError(RuntimeError):
    """Raised when a rollout produces a non-finite state."""


def make_state(p_x=0.0, p_y=0.0, theta=0.0, v=0.0, theta_bias=0.0):
    return np.array([p_x, p_y, theta, v, theta_bias], dtype=float)


def wrap_angle(angle):
    """Normalize angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), 2.0 * np.pi)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform output grid t_k = k * dt with fixed integrator substeps."""

    dt: float = 0.1
    n_steps: int = 100
    substeps: int = 5

    def __post_init__(self):
        if self.dt <= 0 or self.n_steps < 1 or self.substeps < 1:
            raise ValueError("invalid time grid")

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True)
class StateBounds:
    """Componentwise box for the state space; unbounded entries are +-inf."""

    x_min: np.ndarray
    x_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x_min", np.asarray(self.x_min, dtype=float))
        object.__setattr__(self, "x_max", np.asarray(self.x_max, dtype=float))
        if not np.all(self.x_min < self.x_max):
            raise ValueError("x_min must be below x_max componentwise")


@dataclass(frozen=True)
class CarConfig:
    """Tracking gains, input box and saturation margins of the closed loop.

    The controller output is clamped onto the input box by a C^2 saturation
    that is exact identity on the box shrunk by ``sat_margin_frac`` of the
    channel range, so in-box reference inputs pass through unchanged, the
    closed-loop field stays continuously differentiable everywhere, and
    finite differences across the saturation seam keep their accuracy.
    """

    k_theta: float = 3.0
    k_y: float = 1.0
    k_v: float = 2.0
    k_x: float = 1.0
    omega_min: float = -1.0
    omega_max: float = 1.0
    a_min: float = -3.0
    a_max: float = 3.0
    sat_margin_frac: float = 0.02

    def as_array(self) -> np.ndarray:
        """Flat parameter vector consumed by the rollout kernels."""
        m_om = self.sat_margin_frac * (self.omega_max - self.omega_min)
        m_a = self.sat_margin_frac * (self.a_max - self.a_min)
        return np.array([
            self.k_theta, self.k_y, self.k_v, self.k_x,
            self.omega_min, self.omega_max, self.a_min, self.a_max,
            m_om, m_a,
        ])

    def input_box(self) -> np.ndarray:
        """(2, 2) array [[omega_min, omega_max], [a_min, a_max]]."""
        return np.array([[self.omega_min, self.omega_max],
                         [self.a_min, self.a_max]])

    def knot_box(self) -> np.ndarray:
        """Admissible knot box: the input box shrunk by the saturation margin.

        Knots inside it are reproduced exactly by the saturation, so zero
        tracking error yields exactly the reference input.
        """
        box = self.input_box()
        m = self.sat_margin_frac * (box[:, 1] - box[:, 0])
        return np.stack([box[:, 0] + m, box[:, 1] - m], axis=1)

    def open_loop(self) -> "CarConfig":
        """Copy with all feedback gains zeroed (pure reference following)."""
        return CarConfig(0.0, 0.0, 0.0, 0.0,
                         self.omega_min, self.omega_max,
                         self.a_min, self.a_max, self.sat_margin_frac)


def vehicle_field(x, u):
    """Kinematic car field: (v cos th, v sin th, omega, a, 0)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return np.array([x[V] * np.cos(x[TH]), x[V] * np.sin(x[TH]),
                     u[0], u[1], 0.0])


def biased_measurement(x):
    """Measured state: heading offset by the bias, bias channel reads zero."""
    x = np.asarray(x, dtype=float)
    return np.array([x[PX], x[PY], wrap_angle(x[TH] + x[BIAS]), x[V], 0.0])


def _check_time(t, policy):
    if t < -1e-12 or t > policy.horizon_s * (1.0 + 1e-9) + 1e-12:
        raise ValueError("policy horizon exceeded")


def tracking_input(x, t, policy, car: CarConfig):
    """Saturated controller output for state ``x`` at time ``t``.

    The reference state at ``t`` is recovered from the policy's cached
    reference rollout; this is the per-step online operation of the planner.
    """
    _check_time(t, policy)
    zeta = policy.reference_state(t)
    uref = policy.reference_input(t)
    u, _ = _pure.controller(np.asarray(x, dtype=float)[None, :], zeta, uref,
                            car.as_array())
    return u[0]


def closed_loop_field(x, t, policy, car: CarConfig):
    """Field of the autonomous closed-loop system at (x, t) under the policy."""
    return vehicle_field(x, tracking_input(x, t, policy, car))


def divergence(x, t, policy, car: CarConfig):
    """Trace of the state Jacobian of the closed-loop field.

    Only the direct heading and speed feedback terms contribute:
    div = -k_theta * sat'_omega(raw) - k_v * sat'_a(raw).
    """
    _check_time(t, policy)
    zeta = policy.reference_state(t)
    uref = policy.reference_input(t)
    _, div = _pure.controller(np.asarray(x, dtype=float)[None, :], zeta, uref,
                              car.as_array())
    return float(div[0])


def step_constant_input(x, u, dt: float, substeps: int = 5):
    """One zero-order-hold step: RK4 integration under a fixed input."""
    x = np.asarray(x, dtype=float).copy()
    u = np.asarray(u, dtype=float)
    h = dt / substeps

    def f(xc):
        return np.array([xc[V] * np.cos(xc[TH]), xc[V] * np.sin(xc[TH]),
                         u[0], u[1], 0.0])

    for _ in range(substeps):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def integrate(x0, policy, grid: TimeGrid, car: CarConfig):
    """Closed-loop RK4 trajectory of the 5-state car on the output grid.

    Deterministic for fixed inputs; raises IntegrationError if any
    intermediate state goes non-finite.
    """
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise IntegrationError("integration diverged")
    out = closed_rollout(x0[None, :], policy.start_ref[:4], policy.knots,
                         grid.dt, grid.n_steps, grid.substeps, car.as_array())
    states = out["states"][0]
    if not np.all(np.isfinite(states)):
        raise IntegrationError("integration diverged")
    return states
