import numpy as np
import pytest

from densityplan import dynamics
from densityplan.dynamics import (CarConfig, IntegrationError, TimeGrid,
                                  biased_measurement, closed_loop_field,
                                  divergence, integrate, make_state,
                                  tracking_input, vehicle_field, wrap_angle)

from conftest import random_policy, straight_policy


class TestVehicleField:
    def test_straight(self):
        f = vehicle_field(make_state(0, 0, 0, 1, 0), np.array([0.0, 0.0]))
        np.testing.assert_allclose(f, [1, 0, 0, 0, 0], atol=1e-15)

    def test_heading_up_with_bias(self):
        f = vehicle_field(make_state(0, 0, np.pi / 2, 2, 0.3), np.array([0.5, -1.0]))
        np.testing.assert_allclose(f, [0, 2, 0.5, -1, 0], atol=1e-15)

    def test_diagonal(self):
        f = vehicle_field(make_state(3, -2, np.pi / 4, np.sqrt(2), 0), np.array([1.0, 1.0]))
        np.testing.assert_allclose(f, [1, 1, 1, 1, 0], atol=1e-15)


class TestBiasedMeasurement:
    def test_bias_added_to_heading(self):
        m = biased_measurement(make_state(0, 0, 0.1, 1, 0.2))
        np.testing.assert_allclose(m, [0, 0, 0.3, 1, 0], atol=1e-15)

    def test_zero_bias_identity(self):
        x = make_state(1.0, -2.0, 0.7, 3.0, 0.0)
        m = biased_measurement(x)
        np.testing.assert_allclose(m[:4], x[:4])
        assert m[4] == 0.0

    def test_wraps_into_interval(self):
        m = biased_measurement(make_state(1, 2, np.pi, 0, -np.pi))
        np.testing.assert_allclose(m, [1, 2, 0, 0, 0], atol=1e-12)


def test_wrap_angle_range():
    angles = np.linspace(-20, 20, 1001)
    w = wrap_angle(angles)
    assert np.all(w > -np.pi)
    assert np.all(w <= np.pi)
    np.testing.assert_allclose(np.sin(w), np.sin(angles), atol=1e-12)
    assert wrap_angle(np.pi) == np.pi


class TestClosedLoopField:
    def test_on_reference_input_equals_reference(self, car):
        p = straight_policy(v0=1.0)
        p.knots[:] = [[0.2, 0.1]] * p.n_knots
        # place the system exactly on the reference at t = 1.3
        x_ref = p.reference_state(1.3)
        x = np.array([x_ref[0], x_ref[1], x_ref[2], x_ref[3], 0.0])
        u = tracking_input(x, 1.3, p, car)
        np.testing.assert_allclose(u, [0.2, 0.1], atol=1e-8)

    def test_zero_gain_matches_open_loop(self, open_loop_car):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = random_policy(rng)
            x = make_state(*rng.normal(size=5))
            t = rng.uniform(0, p.horizon_s)
            f = closed_loop_field(x, t, p, open_loop_car)
            np.testing.assert_allclose(f, vehicle_field(x, p.reference_input(t)),
                                       atol=1e-12)

    def test_composition(self, car):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = random_policy(rng)
            x = make_state(*rng.normal(scale=2.0, size=5))
            t = rng.uniform(0, p.horizon_s)
            f = closed_loop_field(x, t, p, car)
            np.testing.assert_allclose(f, vehicle_field(x, tracking_input(x, t, p, car)))

    def test_horizon_exceeded(self, car):
        p = straight_policy()
        with pytest.raises(ValueError, match="policy horizon exceeded"):
            closed_loop_field(make_state(), 10.5, p, car)


class TestIntegrate:
    def test_at_rest_stays_put(self, car, grid):
        p = straight_policy(v0=0.0)
        traj = integrate(make_state(0, 0, 0, 0, 0), p, grid, car)
        np.testing.assert_allclose(traj[:, :2], 0.0, atol=1e-12)

    def test_straight_line_exact(self, open_loop_car, grid):
        p = straight_policy(v0=1.0)
        traj = integrate(make_state(0, 0, 0, 1, 0), p, grid, open_loop_car)
        np.testing.assert_allclose(traj[:, 0], grid.times(), atol=1e-12)
        np.testing.assert_allclose(traj[:, 1], 0.0, atol=1e-14)

    def test_circular_arc(self, open_loop_car, grid):
        omega, v = 0.2, 1.0
        p = straight_policy(v0=v)
        p.knots[:, 0] = omega
        traj = integrate(make_state(0, 0, 0, v, 0), p, grid, open_loop_car)
        t = grid.times()
        r = v / omega
        np.testing.assert_allclose(traj[:, 0], r * np.sin(omega * t), atol=1e-6)
        np.testing.assert_allclose(traj[:, 1], r * (1 - np.cos(omega * t)), atol=1e-6)

    def test_rk4_order_on_arc(self, open_loop_car):
        omega, v = 0.8, 2.0
        p = straight_policy(v0=v)
        p.knots[:, 0] = omega
        x0 = make_state(0, 0, 0, v, 0)

        def end_state(substeps):
            g = TimeGrid(dt=0.1, n_steps=100, substeps=substeps)
            return integrate(x0, p, g, open_loop_car)[-1]

        e1 = np.linalg.norm(end_state(1) - end_state(2))
        e2 = np.linalg.norm(end_state(2) - end_state(4))
        assert e1 / e2 >= 8.0

    def test_bias_constant(self, car, grid):
        rng = np.random.default_rng(2)
        for _ in range(5):
            p = random_policy(rng)
            x0 = make_state(0.1, -0.2, 0.05, 1.0, rng.uniform(-0.1, 0.1))
            traj = integrate(x0, p, grid, car)
            assert np.all(traj[:, dynamics.BIAS] == x0[dynamics.BIAS])

    def test_deterministic_bitwise(self, car, grid):
        p = random_policy(np.random.default_rng(3))
        x0 = make_state(0.3, 0.1, 0.2, 1.2, 0.05)
        a = integrate(x0, p, grid, car)
        b = integrate(x0, p, grid, car)
        assert np.array_equal(a, b)

    def test_nonfinite_start_raises(self, car, grid):
        p = straight_policy()
        with pytest.raises(IntegrationError):
            integrate(np.array([np.nan, 0, 0, 0, 0]), p, grid, car)

    def test_matches_naive_augmented_rk4(self, car):
        """Kernel rollout equals a from-scratch RK4 on the augmented system."""
        from densityplan._kernels import pure

        rng = np.random.default_rng(4)
        p = random_policy(rng, horizon=2.0, n_knots=4)
        grid = TimeGrid(dt=0.1, n_steps=20, substeps=3)
        x0 = make_state(0.2, -0.3, 0.1, 1.0, 0.03)
        traj = integrate(x0, p, grid, car)

        carr = car.as_array()
        h = grid.dt / grid.substeps

        def aug_field(y, t):
            x, z = y[:5], y[5:]
            u, _ = pure.controller(x[None], z, p.reference_input(t), carr)
            fx = vehicle_field(x, u[0])
            uref = p.reference_input(t)
            fz = np.array([z[3] * np.cos(z[2]), z[3] * np.sin(z[2]), uref[0], uref[1]])
            return np.concatenate([fx, fz])

        y = np.concatenate([x0, p.start_ref[:4]])
        naive = [y[:5].copy()]
        for k in range(grid.n_steps):
            for i in range(grid.substeps):
                t0 = (k * grid.substeps + i) * h
                k1 = aug_field(y, t0)
                k2 = aug_field(y + 0.5 * h * k1, t0 + 0.5 * h)
                k3 = aug_field(y + 0.5 * h * k2, t0 + 0.5 * h)
                k4 = aug_field(y + h * k3, t0 + h)
                y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            naive.append(y[:5].copy())
        np.testing.assert_allclose(traj, np.array(naive), rtol=1e-12, atol=1e-12)


class TestDivergence:
    def test_open_loop_zero(self, open_loop_car):
        rng = np.random.default_rng(5)
        for _ in range(10):
            p = random_policy(rng)
            x = make_state(*rng.normal(size=5))
            assert divergence(x, rng.uniform(0, 10), p, open_loop_car) == 0.0

    def test_speed_feedback_only(self):
        car = CarConfig(k_theta=0.0, k_y=0.0, k_v=2.0, k_x=0.0)
        p = straight_policy(v0=1.0)
        x = make_state(0.0, 0.0, 0.0, 1.3, 0.0)
        assert divergence(x, 1.0, p, car) == pytest.approx(-2.0, abs=1e-9)

    def test_matches_finite_differences(self, car):
        rng = np.random.default_rng(6)
        eps = 1e-5
        for _ in range(100):
            p = random_policy(rng)
            x = make_state(rng.normal(), rng.normal(), rng.normal(scale=0.5),
                           rng.uniform(0.5, 3.0), rng.uniform(-0.1, 0.1))
            t = rng.uniform(0, p.horizon_s)
            div = divergence(x, t, p, car)
            trace = 0.0
            for i in range(5):
                dx = np.zeros(5)
                dx[i] = eps
                fp = closed_loop_field(x + dx, t, p, car)
                fm = closed_loop_field(x - dx, t, p, car)
                trace += (fp[i] - fm[i]) / (2 * eps)
            assert div == pytest.approx(trace, rel=1e-4, abs=1e-7)
