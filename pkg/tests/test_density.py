import numpy as np
import pytest

from densityplan.density import (ExactPredictor, InitialDistribution,
                                 SurrogatePredictor,
                                 default_initial_distribution, predict_batch,
                                 propagate, propagate_batch, propagate_field,
                                 rollouts_to_csv, sample_initial)
from densityplan.dynamics import TimeGrid, make_state

from conftest import random_policy, straight_policy


class TestPropagateAnalytic:
    def test_divergence_free_open_loop_constant_density(self, open_loop_car, grid):
        p = straight_policy(v0=1.2)
        p.knots[:, 0] = 0.3
        r = propagate(make_state(0.2, -0.1, 0.3, 1.2, 0.02), 0.7, p, grid, open_loop_car)
        np.testing.assert_allclose(r.densities, 0.7, rtol=1e-12)
        np.testing.assert_array_equal(r.g_log, 0.0)

    def test_1d_contraction(self):
        """x' = -x has div = -1, so rho(t) = rho0 * e^t along trajectories."""
        states, g = propagate_field(lambda x: -x, lambda x: -1.0,
                                    np.array([2.0]), 1.0, t_end=1.0, n_steps=10)
        np.testing.assert_allclose(states[-1, 0], 2.0 * np.exp(-1.0), rtol=1e-8)
        np.testing.assert_allclose(np.exp(g[-1]), np.exp(1.0), rtol=1e-8)

    def test_jacobian_divergence_identity(self, car):
        """log|det dPhi/dx0| + g(x0, t_N) = 0 (the strongest transport oracle)."""
        grid = TimeGrid(dt=0.1, n_steps=10, substeps=5)
        rng = np.random.default_rng(20)
        eps = 1e-5
        for trial in range(20):
            p = random_policy(rng, horizon=grid.horizon)
            x0 = np.array([rng.normal(0, 0.3), rng.normal(0, 0.3),
                           rng.normal(0, 0.1), 1.5 + rng.normal(0, 0.2),
                           rng.uniform(-0.1, 0.1)])
            r = propagate(x0, 1.0, p, grid, car)
            jac = np.empty((5, 5))
            for i in range(5):
                dx = np.zeros(5)
                dx[i] = eps
                xp = propagate(x0 + dx, 1.0, p, grid, car).states[-1]
                xm = propagate(x0 - dx, 1.0, p, grid, car).states[-1]
                jac[:, i] = (xp - xm) / (2 * eps)
            _, logdet = np.linalg.slogdet(jac)
            assert abs(logdet + r.g_log[-1]) < 1e-3

    def test_monotone_refinement(self, car):
        """g at the horizon converges with substep refinement.

        The start is placed far off the reference so the controller traverses
        the saturation tails (inside the identity region the divergence is
        piecewise constant and RK4 integrates g exactly at any substep count).
        """
        p = random_policy(np.random.default_rng(21), horizon=5.0)
        x0 = make_state(3.0, -4.0, 2.0, 4.0, 0.1)

        def g_end(substeps):
            g = TimeGrid(dt=0.1, n_steps=50, substeps=substeps)
            return propagate(x0, 1.0, p, g, car).g_log[-1]

        d1 = abs(g_end(1) - g_end(2))
        d2 = abs(g_end(2) - g_end(4))
        d3 = abs(g_end(4) - g_end(8))
        assert d2 < d1 and d3 < d2

    def test_densities_non_negative(self, car, grid):
        rng = np.random.default_rng(22)
        p = random_policy(rng)
        rollouts = propagate_batch(rng.normal(scale=0.3, size=(20, 5)) + [0, 0, 0, 1.5, 0],
                                   rng.uniform(0, 2, 20), p, grid, car)
        for r in rollouts:
            assert np.all(r.densities >= 0)
            # rho(t) = rho0 * exp(g) holds by construction to roundoff
            np.testing.assert_allclose(r.densities, r.rho0 * np.exp(r.g_log), rtol=1e-12)


class TestSampleInitial:
    def test_dirac_convention(self):
        dist = InitialDistribution("gaussian", np.zeros(5), np.zeros(5))
        samples = sample_initial(dist, 5, rng_seed=0)
        for x, rho in samples:
            np.testing.assert_array_equal(x, 0.0)
            assert rho == 1.0

    def test_uniform_box_density(self):
        dist = InitialDistribution("uniform-box", np.zeros(2), np.array([2.0, 0.5]))
        samples = sample_initial(dist, 50, rng_seed=1)
        vol = 4.0 * 1.0
        for x, rho in samples:
            assert np.all(np.abs(x) <= [2.0, 0.5])
            assert rho == pytest.approx(1.0 / vol)

    def test_gaussian_clt(self):
        sigma = 0.5
        dist = InitialDistribution("gaussian", np.array([1.0, -2.0]),
                                   np.array([sigma, sigma]))
        s = 4000
        samples = sample_initial(dist, s, rng_seed=2)
        xs = np.stack([x for x, _ in samples])
        assert np.all(np.abs(xs.mean(axis=0) - [1.0, -2.0]) < 4 * sigma / np.sqrt(s))

    def test_deterministic(self):
        dist = default_initial_distribution(make_state(0, 0, 0.1, 2.0, 0))
        a = sample_initial(dist, 10, rng_seed=3)
        b = sample_initial(dist, 10, rng_seed=3)
        for (xa, ra), (xb, rb) in zip(a, b):
            assert np.array_equal(xa, xb) and ra == rb

    def test_default_distribution_shape(self):
        dist = default_initial_distribution(make_state(1, 2, 0.3, 2.0, 0.5))
        samples = sample_initial(dist, 200, rng_seed=4)
        xs = np.stack([x for x, _ in samples])
        assert np.all(xs[:, 2] == 0.3)
        assert np.all(xs[:, 3] == 2.0)
        assert np.all(np.abs(xs[:, 4]) <= 0.1)
        assert np.std(xs[:, 0]) > 0.15


class TestPredictBatch:
    def test_exact_backend_matches_propagate(self, car, grid):
        p = straight_policy(v0=1.0)
        x0 = make_state(0.1, 0.0, 0.0, 1.0, 0.05)
        single = propagate(x0, 0.5, p, grid, car)
        batch = predict_batch(ExactPredictor(car), x0[None], [0.5], p, grid)
        assert len(batch) == 1
        np.testing.assert_array_equal(batch[0].states, single.states)
        np.testing.assert_array_equal(batch[0].g_log, single.g_log)

    def test_batch_of_500_finishes(self, car, grid):
        rng = np.random.default_rng(23)
        p = random_policy(rng)
        x0 = rng.normal(scale=0.3, size=(500, 5)) + [0, 0, 0, 1.5, 0]
        rollouts = predict_batch(ExactPredictor(car), x0, np.ones(500), p, grid)
        assert len(rollouts) == 500

    def test_permutation_equivariance(self, car, grid):
        rng = np.random.default_rng(24)
        p = random_policy(rng)
        x0 = rng.normal(scale=0.2, size=(8, 5)) + [0, 0, 0, 1.0, 0]
        rho = rng.uniform(0.5, 2.0, 8)
        perm = rng.permutation(8)
        base = predict_batch(ExactPredictor(car), x0, rho, p, grid)
        shuf = predict_batch(ExactPredictor(car), x0[perm], rho[perm], p, grid)
        for i, j in enumerate(perm):
            assert np.array_equal(shuf[i].states, base[j].states)

    def test_stub_predictor_unavailable(self, tmp_path):
        with pytest.raises(RuntimeError, match="predictor unavailable"):
            SurrogatePredictor(tmp_path / "missing.npz")

    def test_stub_predictor_replay(self, tmp_path, car, grid):
        p = straight_policy()
        x0 = np.zeros((2, 5))
        x0[:, 3] = 1.0
        exact = predict_batch(ExactPredictor(car), x0, [1.0, 1.0], p, grid)
        path = tmp_path / "surrogate.npz"
        np.savez(path, states=np.stack([r.states for r in exact]),
                 g=np.stack([r.g_log for r in exact]))
        stub = SurrogatePredictor(path)
        replay = predict_batch(stub, x0, [1.0, 1.0], p, grid)
        np.testing.assert_array_equal(replay[0].states, exact[0].states)


def test_rollout_csv_schema(tmp_path, car, short_grid):
    p = straight_policy(horizon=1.0)
    rollouts = propagate_batch(np.zeros((2, 5)) + [0, 0, 0, 1, 0], [1.0, 2.0], p,
                               short_grid, car)
    path = tmp_path / "rollouts.csv"
    rollouts_to_csv(rollouts, short_grid, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "sample_id,k,t,p_x,p_y,theta,v,theta_bias,rho"
    assert len(lines) == 1 + 2 * (short_grid.n_steps + 1)
