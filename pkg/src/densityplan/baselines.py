"""Comparison planners: sampling, primitive search, receding-horizon MPC
(standard and tube variants), and the full-horizon oracle.

The MPC family minimizes, over an H-step input sequence applied from the
current state,

    J = alpha_I sum ||u||^2_{Q_I} + alpha_G ||x(t_{h+H}) - x_G||_{Q_G}
        + alpha_C sum P_coll(x(t_k), t_k)^2   (+ hinge bounds penalty)

with the occupancy probability bilinearly interpolated so a first-order
solver can descend it. Tube variants see the grid inflated by their radius
and position bounds tightened by the same amount; radius zero is exactly the
standard MPC. The oracle solves the same objective with h = 0, H = N, the
true initial state, multiple starts and a large iteration budget.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass

import numpy as np

from . import cost as costmod
from ._kernels import openloop_rollout, ref_rollout
from .cost import batch_cost
from .dynamics import StateBounds
from .envmap import OccupancyGrid, inflate
from .optimizer import (AdamState, PlanProblem, PlanResult, adam_step,
                        plan_status, reference_metrics)
from .policy import PolicyParams, sample_knot_array
from .seeding import STREAM_ORACLE, STREAM_POLICY, substream_seed


@dataclass
class MpcConfig:
    horizon: int = 10
    iters: int = 50
    lr: float = 0.1
    tube_radius: float = 0.0
    warm_start: bool = True
    substeps: int = 5

    def __post_init__(self):
        if self.horizon < 1 or self.tube_radius < 0:
            raise ValueError("invalid MPC config")


@dataclass
class OracleConfig:
    n_starts: int = 8
    iters: int = 400
    lr: float = 0.05
    substeps: int = 5


@dataclass
class SearchConfig:
    segment_s: float = 1.0
    max_expansions: int = 20000
    heading_bins: int = 16
    v_bin: float = 0.5


# ---------------------------------------------------------------------------
# sampling baseline

def sampling_planner(problem: PlanProblem, m: int, rng_seed: int) -> PlanResult:
    """Best of ``m`` random knot sets under the fully active density-one cost.

    Draws the same parameter sets as the gradient planner's initialization
    for the same seed, but performs zero gradient steps.
    """
    t0 = time.monotonic()
    grid = problem.grid
    car_arr = problem.car.as_array()
    start = problem.dist.mean.copy()
    start[4] = 0.0
    knots = sample_knot_array(m, problem.car.knot_box(),
                              substream_seed(rng_seed, STREAM_POLICY))
    states4, inputs = ref_rollout(np.tile(start[:4], (m, 1)), knots, grid.dt,
                                  grid.n_steps, grid.substeps, car_arr)
    states = np.zeros((m, grid.n_steps + 1, 5))
    states[:, :, :4] = states4
    ones = np.ones(m)
    bc = batch_cost(states, inputs, None, problem.goal, problem.bounds,
                    problem.weights, problem.env, problem.gradients, ones, ones)
    idx = int(np.argmin(bc.total))
    policy = PolicyParams(knots[idx].copy(), start, grid.horizon)
    ref = reference_metrics(policy, problem)
    return PlanResult(
        method="sampling",
        status=plan_status(ref["goal_dist"], ref["J_C"], False),
        policy=policy,
        timings={"offline_s": time.monotonic() - t0},
        seed=rng_seed,
        diagnostics={"best_total": float(bc.total[idx]),
                     "goal_dist_ref": ref["goal_dist"]},
    )


# ---------------------------------------------------------------------------
# primitive search baseline

def _segment_cost(states, inputs, problem: PlanProblem, k_offset: int):
    """Stage-1 running cost terms of one primitive segment (density one)."""
    w = problem.weights
    j_i = float(np.sum(w.q_i * inputs * inputs))
    lo = np.maximum(0.0, problem.bounds.x_min - states)
    hi = np.maximum(0.0, states - problem.bounds.x_max)
    j_b = float(w.q_bound * np.sum(lo * lo + hi * hi))
    geom = problem.env.geometry
    n_new = states.shape[0]
    ks = np.minimum(k_offset + np.arange(n_new), geom.n_steps)
    cells = geom.cell_of(states[:, :2])
    inside = geom.in_grid(cells)
    p = np.ones(n_new)
    p[inside] = problem.env.p_occ[cells[inside, 0], cells[inside, 1], ks[inside]]
    g_x, g_y = problem.gradients
    pull = np.zeros((n_new, 2))
    pull[inside, 0] = g_x[cells[inside, 0], cells[inside, 1], ks[inside]]
    pull[inside, 1] = g_y[cells[inside, 0], cells[inside, 1], ks[inside]]
    d2 = np.sum((w.beta * pull * geom.cell_size) ** 2, axis=1)
    d2[~inside] = 0.0
    j_c = float(np.sum(p * d2))
    return w.alpha_i * j_i + w.alpha_b * j_b + w.alpha_c * j_c


def search_planner(problem: PlanProblem, config: SearchConfig | None = None) -> PlanResult:
    """best-first search over a knot-value lattice.

    The alphabet is the nine (omega, a) combinations of the input-box
    extremes and zero, placed as policy knots at fixed segment boundaries;
    each expansion integrates the exact interpolated ramp between consecutive
    knot values, so the winning path converts to PolicyParams losslessly.
    The heuristic alpha_G * max(0, dist - v_max * t_left)^2 underestimates
    the terminal goal cost and is exact at full depth, making the first
    full-depth pop optimal for the lattice. Ties break on the lowest knot
    alphabet index.
    """
    config = config or SearchConfig()
    t_start = time.monotonic()
    grid = problem.grid
    w = problem.weights
    seg_steps = max(1, int(round(config.segment_s / grid.dt)))
    depth_max = grid.n_steps // seg_steps
    box = problem.car.input_box()
    alphabet = [(om, a) for om in (-box[0, 1], 0.0, box[0, 1])
                for a in (-box[1, 1], 0.0, box[1, 1])]
    v_max = problem.bounds.x_max[3]
    if not np.isfinite(v_max):
        v_max = 10.0
    start = problem.dist.mean.copy()
    start[4] = 0.0
    goal = problem.goal
    seg_dt = seg_steps * grid.dt

    def heuristic(state, depth):
        t_left = (depth_max - depth) * seg_dt
        d = np.hypot(state[0] - goal[0], state[1] - goal[1])
        return w.alpha_g * max(0.0, d - v_max * t_left) ** 2

    def bucket(state, depth, knot_idx):
        geom = problem.env.geometry
        cell = geom.cell_of(state[:2])
        th = int((state[2] % (2 * np.pi)) / (2 * np.pi) * config.heading_bins)
        return (int(cell[0]), int(cell[1]), th,
                int(state[3] / config.v_bin), depth, knot_idx)

    counter = 0
    h0 = heuristic(start, 0)
    open_list = []
    best_g = {}
    # the root branches over the value of knot 0 (no motion yet)
    for idx in range(len(alphabet)):
        counter += 1
        heapq.heappush(open_list, (h0, counter, start, 0, 0.0, (idx,)))
        best_g[bucket(start, 0, idx)] = 0.0
    best_full = None
    expansions = 0
    car_arr = problem.car.as_array()

    while open_list and expansions < config.max_expansions:
        f, _, state, depth, g_cost, path = heapq.heappop(open_list)
        if depth == depth_max:
            best_full = (f, path)
            break
        expansions += 1
        for idx, knot in enumerate(alphabet):
            two = np.array([alphabet[path[-1]], knot])
            seg_states, seg_inputs = ref_rollout(state[None, :4], two[None],
                                                 grid.dt, seg_steps,
                                                 grid.substeps, car_arr)
            child = np.zeros(5)
            child[:4] = seg_states[0, -1]
            states5 = np.zeros((seg_steps, 5))
            states5[:, :4] = seg_states[0, 1:]
            k_offset = depth * seg_steps + 1
            g_new = g_cost + _segment_cost(states5, seg_inputs[0], problem,
                                           k_offset)
            key = bucket(child, depth + 1, idx)
            if key in best_g and best_g[key] <= g_new:
                continue
            best_g[key] = g_new
            counter += 1
            heapq.heappush(open_list, (g_new + heuristic(child, depth + 1),
                                       counter, child, depth + 1, g_new,
                                       path + (idx,)))

    if best_full is None:
        # expansion cap hit: fall back to the best full-depth node queued
        full = [(f, path) for f, _, _, d, _, path in open_list if d == depth_max]
        if full:
            best_full = min(full, key=lambda t: t[0])
    if best_full is None:
        return PlanResult(method="search", status="failed_goal",
                          timings={"offline_s": time.monotonic() - t_start},
                          diagnostics={"expansions": expansions})

    _, path = best_full
    knots = np.array([alphabet[i] for i in path])
    policy = PolicyParams(knots, start, grid.horizon)
    ref = reference_metrics(policy, problem)
    return PlanResult(
        method="search",
        status=plan_status(ref["goal_dist"], ref["J_C"], False),
        policy=policy,
        timings={"offline_s": time.monotonic() - t_start},
        diagnostics={"expansions": expansions,
                     "goal_dist_ref": ref["goal_dist"],
                     "path": list(path)},
    )


# ---------------------------------------------------------------------------
# MPC family and oracle (shared Eq.-style objective and solver)

def _bilinear_prob(env: OccupancyGrid, xy, k_abs):
    """Bilinearly interpolated P_occ and its world-coordinate gradient.

    xy: (B, T, 2), k_abs: (T,) absolute time indices. Out-of-grid points
    read probability 1 with zero gradient.
    """
    geom = env.geometry
    c = geom.grid_coords(xy)
    inside = ((c[..., 0] >= 0.0) & (c[..., 0] <= geom.cx - 1.0)
              & (c[..., 1] >= 0.0) & (c[..., 1] <= geom.cy - 1.0))
    cx = np.clip(c[..., 0], 0.0, geom.cx - 1.0 - 1e-12)
    cy = np.clip(c[..., 1], 0.0, geom.cy - 1.0 - 1e-12)
    i0 = np.floor(cx).astype(np.int64)
    j0 = np.floor(cy).astype(np.int64)
    fx = cx - i0
    fy = cy - j0
    kk = np.broadcast_to(np.asarray(k_abs), i0.shape)
    p00 = env.p_occ[i0, j0, kk]
    p10 = env.p_occ[i0 + 1, j0, kk]
    p01 = env.p_occ[i0, j0 + 1, kk]
    p11 = env.p_occ[i0 + 1, j0 + 1, kk]
    p = (p00 * (1 - fx) * (1 - fy) + p10 * fx * (1 - fy)
         + p01 * (1 - fx) * fy + p11 * fx * fy)
    dp_dcx = (p10 - p00) * (1 - fy) + (p11 - p01) * fy
    dp_dcy = (p01 - p00) * (1 - fx) + (p11 - p10) * fx
    grad = np.stack([dp_dcx, dp_dcy], axis=-1) / geom.cell_size
    p = np.where(inside, p, 1.0)
    grad = np.where(inside[..., None], grad, 0.0)
    return p, grad


_GOAL_EPS = 1e-12


def _mpc_objective(states, u_eff, du_eff, dstates, k_abs, env, bounds,
                   problem: PlanProblem, with_grad):
    """Receding-horizon objective and its gradient w.r.t. the raw inputs.

    states: (B, H+1, 5) from openloop_rollout, u_eff/du_eff: (B, H, 2),
    dstates: (B, H+1, 5, 2H) or None, k_abs: (H+1,) absolute time indices.
    """
    w = problem.weights
    B, H1 = states.shape[0], states.shape[1]
    goal = problem.goal
    j_i = np.einsum("bkc,c->b", u_eff * u_eff, w.q_i)
    d_last = states[:, -1, :] - goal
    quad = np.sum(w.q_g * d_last * d_last, axis=1)
    root = np.sqrt(quad + _GOAL_EPS)
    p, p_grad = _bilinear_prob(env, states[:, :, :2], k_abs)
    j_c = np.sum(p * p, axis=1)
    lo = np.maximum(0.0, bounds.x_min - states)
    hi = np.maximum(0.0, states - bounds.x_max)
    j_b = w.q_bound * np.sum(lo * lo + hi * hi, axis=(1, 2))
    total = w.alpha_i * j_i + w.alpha_g * root + w.alpha_c * j_c + w.alpha_b * j_b
    if not with_grad:
        return total, None
    d_states = w.alpha_c * 2.0 * p[..., None] * p_grad       # (B, H+1, 2)
    d_states_full = np.zeros_like(states)
    d_states_full[:, :, :2] = d_states
    d_states_full += w.alpha_b * w.q_bound * 2.0 * (hi - lo)
    d_states_full[:, -1, :] += w.alpha_g * (w.q_g * d_last) / root[:, None]
    grad = np.einsum("btd,btdp->bp", d_states_full, dstates)
    d_u = w.alpha_i * 2.0 * w.q_i * u_eff * du_eff           # (B, H, 2)
    grad += d_u.reshape(B, -1)
    return total, grad


def _solve_inputs(x0_batch, init_raw, k_offset, env, bounds,
                  problem: PlanProblem, iters: int, lr: float, substeps: int):
    """ADAM descent of the receding-horizon objective; best iterate returned.

    x0_batch: (B, 5), init_raw: (B, H, 2). Returns (best raw (B, H, 2),
    best objective (B,), final gradient norm (B,)).
    """
    grid = problem.grid
    car_arr = problem.car.as_array()
    B, H = init_raw.shape[0], init_raw.shape[1]
    k_abs = np.minimum(k_offset + np.arange(H + 1), grid.n_steps)
    u_raw = init_raw.copy()
    adam = AdamState(lr=lr)
    best = np.full(B, np.inf)
    best_raw = u_raw.copy()
    gnorm = np.zeros(B)
    for it in range(iters + 1):
        last = it == iters
        out = openloop_rollout(x0_batch, u_raw, grid.dt, substeps, car_arr,
                               with_grad=not last)
        total, grad = _mpc_objective(out["states"], out["u_eff"], out["du_eff"],
                                     out.get("dstates"), k_abs, env, bounds,
                                     problem, with_grad=not last)
        improved = total < best
        best = np.where(improved, total, best)
        best_raw[improved] = u_raw[improved]
        if last:
            break
        grad = costmod.clip_gradient(grad, problem.weights.grad_clip)
        gnorm = np.linalg.norm(grad, axis=1)
        u_raw = adam_step(adam, u_raw, grad.reshape(B, H, 2))
    return best_raw, best, gnorm


def tightened_bounds(bounds: StateBounds, radius: float) -> StateBounds:
    """Position bounds pulled in by the tube radius (other components kept)."""
    if radius == 0.0:
        return bounds
    x_min = bounds.x_min.copy()
    x_max = bounds.x_max.copy()
    x_min[:2] += radius
    x_max[:2] -= radius
    return StateBounds(x_min, x_max)


class MpcController:
    """Receding-horizon controller over a fixed problem (M0 or tube variants)."""

    def __init__(self, problem: PlanProblem, config: MpcConfig):
        self.problem = problem
        self.config = config
        self.env = (inflate(problem.env, config.tube_radius)
                    if config.tube_radius > 0 else problem.env)
        self.bounds = tightened_bounds(problem.bounds, config.tube_radius)
        self.warm: np.ndarray | None = None

    def step(self, x, k: int):
        """Solve from the measured state at output index ``k``; apply-first.

        Returns (input (2,), solve diagnostics dict).
        """
        H = self.config.horizon
        if self.warm is None or not self.config.warm_start:
            init = np.zeros((1, H, 2))
        else:
            init = np.concatenate([self.warm[1:], self.warm[-1:]])[None]
        x0 = np.asarray(x, dtype=float)[None]
        best_raw, best, gnorm = _solve_inputs(
            x0, init, k, self.env, self.bounds, self.problem,
            self.config.iters, self.config.lr, self.config.substeps)
        self.warm = best_raw[0]
        from ._kernels import pure as _pure
        u_eff, _, _ = _pure._sat(best_raw[0, 0, 0],
                                 self.problem.car.omega_min,
                                 self.problem.car.omega_max,
                                 self.problem.car.as_array()[8])
        a_eff, _, _ = _pure._sat(best_raw[0, 0, 1],
                                 self.problem.car.a_min,
                                 self.problem.car.a_max,
                                 self.problem.car.as_array()[9])
        return np.array([float(u_eff), float(a_eff)]), {
            "objective": float(best[0]), "grad_norm": float(gnorm[0])}


def mpc_step(current, t_h: int, env: OccupancyGrid, config: MpcConfig,
             warm, problem: PlanProblem):
    """One receding-horizon solve (spec operation); see MpcController.step."""
    ctrl = MpcController(problem, config)
    ctrl.warm = warm
    u, diag = ctrl.step(current, t_h)
    return u, ctrl.warm, diag


def oracle_solve(problem: PlanProblem, true_x0, config: OracleConfig,
                 rng_seed: int) -> PlanResult:
    """Full-horizon minimization of the receding-horizon objective.

    Multi-start (zeros plus seeded random sequences), large budget, exact
    initial state, no wall-clock budget. The result carries the effective
    (saturated) input sequence executed open loop.
    """
    t0 = time.monotonic()
    grid = problem.grid
    H = grid.n_steps
    rng = np.random.default_rng(substream_seed(rng_seed, STREAM_ORACLE))
    box = problem.car.input_box()
    starts = np.zeros((config.n_starts, H, 2))
    for i in range(1, config.n_starts):
        starts[i] = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((H, 2))
    x0_batch = np.tile(np.asarray(true_x0, dtype=float), (config.n_starts, 1))
    best_raw, best, _ = _solve_inputs(x0_batch, starts, 0, problem.env,
                                      problem.bounds, problem,
                                      config.iters, config.lr, config.substeps)
    idx = int(np.argmin(best))
    out = openloop_rollout(x0_batch[[idx]], best_raw[[idx]], grid.dt,
                           config.substeps, problem.car.as_array())
    states = out["states"][0]
    u_eff = out["u_eff"][0]

    # density-one planning metrics of the solved trajectory
    ones = np.ones(1)
    bc = batch_cost(states[None], u_eff[None], None, problem.goal,
                    problem.bounds, problem.weights, problem.env,
                    problem.gradients, ones, ones)
    status = plan_status(float(bc.goal_dist[0]), float(bc.j_c[0]), False)
    return PlanResult(
        method="O", status=status, input_sequence=u_eff,
        timings={"offline_s": time.monotonic() - t0}, seed=rng_seed,
        diagnostics={"objective": float(best[idx]),
                     "goal_dist_ref": float(bc.goal_dist[0]),
                     "planned_states": states.tolist()},
    )
