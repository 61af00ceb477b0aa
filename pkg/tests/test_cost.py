import numpy as np
import pytest

from densityplan._kernels import closed_rollout, ref_rollout
from densityplan.cost import (CostWeights, assemble_gradient, batch_cost,
                              bounds_cost, clip_gradient, collision_cost,
                              goal_cost, input_cost, total_cost)
from densityplan.density import DensityRollout
from densityplan.dynamics import CarConfig, StateBounds, TimeGrid
from densityplan.envmap import GridGeometry, OccupancyGrid, occ_gradients



def _geom(n_steps, cx=60, cy=60, cell=0.5, origin=(-15.0, -15.0)):
    return GridGeometry(origin=origin, cell_size=cell, cx=cx, cy=cy,
                        n_steps=n_steps, dt=0.1)


def _rollout_with(states_xy_last=None, rho_last=1.0, n_times=11):
    states = np.zeros((n_times, 5))
    if states_xy_last is not None:
        states[-1, :2] = states_xy_last
    g = np.zeros(n_times)
    g[-1] = np.log(rho_last) if rho_last > 0 else -np.inf
    return DensityRollout(states=states, g_log=g, rho0=1.0)


WIDE_BOUNDS = StateBounds(np.array([-1e9, -1e9, -np.inf, -np.inf, -np.inf]),
                          np.array([1e9, 1e9, np.inf, np.inf, np.inf]))


class TestGoalCost:
    def test_at_goal_zero(self):
        r = _rollout_with([0, 0])
        assert goal_cost(r, np.zeros(5), CostWeights().q_g) == 0.0

    def test_three_four_offset(self):
        r = _rollout_with([3.0, 4.0])
        assert goal_cost(r, np.zeros(5), CostWeights().q_g) == pytest.approx(25.0)

    def test_density_scales_linearly(self):
        r = _rollout_with([3.0, 4.0], rho_last=0.5)
        assert goal_cost(r, np.zeros(5), CostWeights().q_g) == pytest.approx(12.5)


class TestInputCost:
    def test_zero(self):
        assert input_cost(np.zeros((100, 2)), CostWeights().q_i) == 0.0

    def test_constant_ones(self):
        assert input_cost(np.ones((100, 2)), CostWeights().q_i) == pytest.approx(200.0)

    def test_quadratic_scaling(self):
        u = np.random.default_rng(0).normal(size=(30, 2))
        qi = CostWeights().q_i
        assert input_cost(2 * u, qi) == pytest.approx(4 * input_cost(u, qi))


class TestBoundsCost:
    def test_inside_zero(self):
        r = _rollout_with([1.0, 1.0])
        bounds = StateBounds(np.full(5, -10.0), np.full(5, 10.0))
        assert bounds_cost(r, bounds) == 0.0

    def test_hinge_square(self):
        states = np.zeros((11, 5))
        states[4, 3] = 12.0  # exceeds v_max = 10 by 2 at one step
        r = DensityRollout(states=states, g_log=np.zeros(11), rho0=1.0)
        bounds = StateBounds(np.array([-20, -20, -np.inf, 0.0, -np.inf]),
                             np.array([20, 20, np.inf, 10.0, np.inf]))
        assert bounds_cost(r, bounds) == pytest.approx(4.0)

    def test_infinite_bounds_ignore_component(self):
        states = np.zeros((5, 5))
        states[:, 2] = 100.0  # unbounded heading
        r = DensityRollout(states=states, g_log=np.zeros(5), rho0=1.0)
        bounds = StateBounds(np.array([-1, -1, -np.inf, -1, -np.inf]),
                             np.array([1, 1, np.inf, 1, np.inf]))
        assert bounds_cost(r, bounds) == 0.0


class TestCollisionCost:
    def test_free_environment_zero(self):
        geom = _geom(10)
        env = OccupancyGrid(geom, np.zeros((geom.cx, geom.cy, geom.n_times)))
        grads = occ_gradients(env)
        r = _rollout_with([1.0, 1.0], n_times=11)
        assert collision_cost([r], env, grads) == 0.0

    def test_zero_gradient_zero(self):
        geom = _geom(10)
        env = OccupancyGrid(geom, np.full((geom.cx, geom.cy, geom.n_times), 0.5))
        grads = occ_gradients(env)
        r = _rollout_with([1.0, 1.0], n_times=11)
        assert collision_cost([r], env, grads) == pytest.approx(0.0, abs=1e-15)

    def test_hand_computed_term(self):
        # one step with weight 0.3 and displacement 0.05 m -> 7.5e-4
        geom = _geom(0, cx=20, cy=20, origin=(-5.0, -5.0))
        p = np.full((20, 20, 1), 0.3)
        # occupancy gradient 0.1 in x at the sample's cell -> pull -0.05 m
        g_x = np.full_like(p, 0.1)
        g_y = np.zeros_like(p)
        env = OccupancyGrid(geom, p)
        states = np.zeros((1, 5))
        r = DensityRollout(states=states, g_log=np.zeros(1), rho0=1.0)
        val = collision_cost([r], env, (g_x, g_y), beta=1.0)
        assert val == pytest.approx(0.3 * 0.05 ** 2)


class TestTotalCost:
    def _setup(self, n_steps=10):
        geom = _geom(n_steps)
        rng = np.random.default_rng(1)
        env = OccupancyGrid(geom, 0.3 * rng.random((geom.cx, geom.cy, geom.n_times)))
        grads = occ_gradients(env)
        states = rng.normal(scale=2.0, size=(n_steps + 1, 5))
        states[:, 3] += 2.0
        r = DensityRollout(states=states, g_log=rng.normal(scale=0.1, size=n_steps + 1),
                           rho0=1.0)
        r.inputs = rng.normal(size=(n_steps, 2))
        bounds = StateBounds(np.array([-3, -3, -np.inf, 0, -np.inf]),
                             np.array([3, 3, np.inf, 10, np.inf]))
        return r, env, grads, bounds

    def test_all_alphas_zero(self):
        r, env, grads, bounds = self._setup()
        w = CostWeights(alpha_g=0, alpha_i=0, alpha_b=0, alpha_c=0)
        bd = total_cost([r], env, grads, np.zeros(5), bounds, w)
        assert bd.total == 0.0

    def test_goal_only(self):
        r, env, grads, bounds = self._setup()
        w = CostWeights(alpha_g=1, alpha_i=0, alpha_b=0, alpha_c=0)
        bd = total_cost([r], env, grads, np.zeros(5), bounds, w)
        assert bd.total == pytest.approx(bd.j_g)

    def test_breakdown_recombination(self):
        r, env, grads, bounds = self._setup()
        w = CostWeights()
        bd = total_cost([r], env, grads, np.zeros(5), bounds, w)
        recombined = (w.alpha_g * bd.j_g + w.alpha_i * bd.j_i
                      + w.alpha_b * bd.j_b + w.alpha_c * bd.j_c)
        assert bd.total == pytest.approx(recombined, rel=1e-12)
        assert min(bd.j_g, bd.j_i, bd.j_b, bd.j_c) >= 0.0

    def test_staging_ignores_environment(self):
        r, env, grads, bounds = self._setup()
        geom = env.geometry
        other = OccupancyGrid(geom, np.random.default_rng(9).random(env.p_occ.shape))
        w = CostWeights()
        a = total_cost([r], env, grads, np.zeros(5), bounds, w,
                       alpha_b_on=False, alpha_c_on=False)
        b = total_cost([r], other, occ_gradients(other), np.zeros(5), bounds, w,
                       alpha_b_on=False, alpha_c_on=False)
        assert a.total == b.total
        assert not a.alpha_b_active and not a.alpha_c_active


def _fd_config(seed, n_steps=20, n_samples=3, knots=5):
    """Random (env, p, x0 samples) configuration for the gradient contract."""
    rng = np.random.default_rng(seed)
    car = CarConfig()
    grid = TimeGrid(dt=0.1, n_steps=n_steps, substeps=3)
    geom = _geom(n_steps, cx=80, cy=80, origin=(-20.0, -20.0))
    env = OccupancyGrid(geom, 0.6 * rng.random((geom.cx, geom.cy, geom.n_times)))
    grads = occ_gradients(env)
    box = car.knot_box()
    kn = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((knots, 2))
    x0 = rng.normal(scale=0.3, size=(n_samples, 5)) + [0, 0, 0, 1.5, 0]
    x0[:, 4] = rng.uniform(-0.1, 0.1, n_samples)
    rho0 = rng.uniform(0.5, 2.0, n_samples)
    ref0 = np.array([0.0, 0.0, 0.0, 1.5])
    goal = np.array([3.0, 1.0, 0, 0, 0])
    bounds = StateBounds(np.array([-19, -19, -np.inf, 0, -np.inf]),
                         np.array([19, 19, np.inf, 10, np.inf]))
    weights = CostWeights()
    return car, grid, env, grads, kn, x0, rho0, ref0, goal, bounds, weights


def _stage2_total(kn, cfg, frozen):
    car, grid, env, grads, _, x0, rho0, ref0, goal, bounds, weights = cfg
    out = closed_rollout(x0, ref0, kn, grid.dt, grid.n_steps, grid.substeps,
                         car.as_array())
    rho = rho0[:, None] * np.exp(out["g"])
    bc = batch_cost(out["states"], out["inputs"], rho, goal, bounds, weights,
                    env, grads, np.ones(x0.shape[0]), np.ones(x0.shape[0]),
                    frozen=frozen)
    cells = env.geometry.cell_of(out["states"][:, :, :2])
    return float(bc.total.sum()), cells


class TestGradientContract:
    """Analytic parameter gradient vs central finite differences (h = 1e-4)
    under the detachment rule, skipping cell-crossing configurations."""

    def test_stage2_cost_gradient(self):
        checked = 0
        for seed in range(12):
            cfg = _fd_config(seed)
            car, grid, env, grads, kn, x0, rho0, ref0, goal, bounds, weights = cfg
            out = closed_rollout(x0, ref0, kn, grid.dt, grid.n_steps,
                                 grid.substeps, car.as_array(), with_grad=True)
            rho = rho0[:, None] * np.exp(out["g"])
            ones = np.ones(x0.shape[0])
            bc = batch_cost(out["states"], out["inputs"], rho, goal, bounds,
                            weights, env, grads, ones, ones)
            dg_scaled = out["dg"]
            grad = assemble_gradient(bc, out["dstates"], out["dinputs"],
                                     dg=dg_scaled).sum(axis=0)
            frozen = (bc.coll_w, bc.coll_desired)
            base_cells = env.geometry.cell_of(out["states"][:, :, :2])

            h = 1e-4
            fd = np.zeros(kn.size)
            crossed = False
            for q in range(kn.size):
                dk = np.zeros_like(kn)
                dk.flat[q] = h
                jp, cp = _stage2_total(kn + dk, cfg, frozen)
                jm, cm = _stage2_total(kn - dk, cfg, frozen)
                if not (np.array_equal(cp, base_cells) and np.array_equal(cm, base_cells)):
                    crossed = True
                    break
                fd[q] = (jp - jm) / (2 * h)
            if crossed:
                continue
            checked += 1
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel < 2e-3, f"seed {seed}: rel={rel:.2e}"
        assert checked >= 4

    def test_stage1_reference_gradient(self):
        """Same contract for the density-free initialization cost."""
        for seed in range(4):
            cfg = _fd_config(seed + 100)
            car, grid, env, grads, kn, _, _, ref0, goal, bounds, weights = cfg
            states4, inputs, dstates, dinputs = ref_rollout(
                ref0[None], kn[None], grid.dt, grid.n_steps, grid.substeps,
                car.as_array(), with_grad=True)
            states = np.zeros((1, grid.n_steps + 1, 5))
            states[:, :, :4] = states4
            ones = np.ones(1)
            bc = batch_cost(states, inputs, None, goal, bounds, weights, env,
                            grads, ones, ones)
            grad = assemble_gradient(bc, dstates, dinputs)[0]
            frozen = (bc.coll_w, bc.coll_desired)
            base_cells = env.geometry.cell_of(states[:, :, :2])

            def total_at(k2):
                s4, inp = ref_rollout(ref0[None], k2[None], grid.dt,
                                      grid.n_steps, grid.substeps, car.as_array())
                s = np.zeros((1, grid.n_steps + 1, 5))
                s[:, :, :4] = s4
                b = batch_cost(s, inp, None, goal, bounds, weights, env, grads,
                               ones, ones, frozen=frozen)
                return float(b.total.sum()), env.geometry.cell_of(s[:, :, :2])

            h = 1e-4
            fd = np.zeros(kn.size)
            crossed = False
            for q in range(kn.size):
                dk = np.zeros_like(kn)
                dk.flat[q] = h
                jp, cp = total_at(kn + dk)
                jm, cm = total_at(kn - dk)
                if not (np.array_equal(cp, base_cells) and np.array_equal(cm, base_cells)):
                    crossed = True
                    break
                fd[q] = (jp - jm) / (2 * h)
            if crossed:
                continue
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            assert rel < 2e-3, f"seed {seed}: rel={rel:.2e}"


def test_clip_gradient():
    g = np.array([-100.0, 0.5, 100.0])
    np.testing.assert_array_equal(clip_gradient(g, 10.0), [-10.0, 0.5, 10.0])
