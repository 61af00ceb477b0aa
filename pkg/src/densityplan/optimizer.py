"""Two-stage gradient planner.

Stage 1 (initialization): sample many knot sets, optimize each on its
deterministic reference trajectory with density one and staged cost
activation -- the bounds term switches on once a trajectory gets near the
goal, the collision term once the bounds are satisfied -- and keep the best.
Stage 2 (local refinement): sample initial states from the uncertainty
model, transport them (with densities) along the tracked closed loop, and
descend the summed density-weighted cost with every term active.

Both stages step with bias-corrected ADAM on clipped analytic gradients and
report the best iterate over the history, compared under the fully active
cost.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import cost as costmod
from ._kernels import closed_rollout, ref_rollout
from .cost import CostBreakdown, CostWeights, assemble_gradient, batch_cost
from .density import InitialDistribution, sample_initial
from .dynamics import CarConfig, StateBounds, TimeGrid
from .envmap import OccupancyGrid, occ_gradients
from .policy import PolicyParams, sample_knot_array
from .seeding import STREAM_INIT, STREAM_POLICY, substream_seed

log = logging.getLogger(__name__)

GOAL_FAIL_M = 4.5
JC_FAIL = 10.0


@dataclass
class AdamState:
    """Bias-corrected ADAM accumulator over a (possibly batched) parameter."""

    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step_count: np.ndarray | None = None

    def reset_rows(self, rows):
        """Zero the moments of selected leading indices (objective changed)."""
        if self.m is not None:
            self.m[rows] = 0.0
            self.v[rows] = 0.0
            self.step_count[rows] = 0


def adam_step(state: AdamState, params, grad):
    """One ADAM update; returns the new parameters (state is advanced)."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("gradient overflow")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
        state.step_count = np.zeros(params.shape[0])
    state.step_count = state.step_count + 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * (grad * grad)
    tt = state.step_count.reshape((-1,) + (1,) * (params.ndim - 1))
    m_hat = state.m / (1 - state.beta1 ** tt)
    v_hat = state.v / (1 - state.beta2 ** tt)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class StageConfig:
    m_starts: int = 100
    s_samples: int = 50
    iters_init: int = 100
    iters_local: int = 100
    goal_threshold: float = 1.0
    lr_init: float = 0.05
    lr_local: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    n_knots: int = 10
    budget_s: float = 300.0

    def __post_init__(self):
        if self.m_starts < 1 or self.s_samples < 1:
            raise ValueError("need at least one start and one sample")
        if self.iters_init < 0 or self.iters_local < 0:
            raise ValueError("iteration caps must be non-negative")


@dataclass
class PlanProblem:
    """Everything a planner needs: world, uncertainty, goal, and weights."""

    env: OccupancyGrid
    dist: InitialDistribution
    goal: np.ndarray
    bounds: StateBounds
    car: CarConfig
    grid: TimeGrid
    weights: CostWeights
    gradients: tuple = None

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float)
        if self.gradients is None:
            self.gradients = occ_gradients(self.env)


@dataclass
class PlanResult:
    method: str
    status: str
    policy: PolicyParams | None = None
    input_sequence: np.ndarray | None = None
    breakdown: CostBreakdown | None = None
    cost_history: list = field(default_factory=list)
    collision_profile: np.ndarray | None = None
    timings: dict = field(default_factory=dict)
    seed: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method,
            "status": self.status,
            "policy": None if self.policy is None else json.loads(self.policy.to_json()),
            "input_sequence": None if self.input_sequence is None
            else np.asarray(self.input_sequence).tolist(),
            "breakdown": None if self.breakdown is None else self.breakdown.to_dict(),
            "cost_history": self.cost_history,
            "collision_profile": None if self.collision_profile is None
            else np.asarray(self.collision_profile).tolist(),
            "timings": self.timings,
            "seed": self.seed,
            "diagnostics": self.diagnostics,
        }, indent=1)

    def history_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "stage", "total", "J_G", "J_I", "J_B", "J_C"])
            for row in self.cost_history:
                writer.writerow([row["iteration"], row["stage"], row["total"],
                                 row["J_G"], row["J_I"], row["J_B"], row["J_C"]])


def _start_state(problem: PlanProblem) -> np.ndarray:
    start = problem.dist.mean.copy()
    start[4] = 0.0
    return start


def _full_total(bc, w: CostWeights):
    """Fully active per-trajectory total (stage-independent comparison)."""
    return (w.alpha_g * bc.j_g + w.alpha_i * bc.j_i + w.alpha_b * bc.j_b
            + w.alpha_c * bc.j_c)


def stage1_initialize(problem: PlanProblem, config: StageConfig, rng_seed: int,
                      deadline: float | None = None):
    """Multi-start staged optimization of deterministic reference trajectories.

    Returns (best PolicyParams, info dict with history and the best cost).
    """
    w = problem.weights
    grid = problem.grid
    car_arr = problem.car.as_array()
    start = _start_state(problem)
    knots = sample_knot_array(config.m_starts, problem.car.knot_box(),
                              substream_seed(rng_seed, STREAM_POLICY),
                              config.n_knots)
    M = config.m_starts
    box = problem.car.knot_box()
    starts4 = np.tile(start[:4], (M, 1))
    bounds_on = np.zeros(M, dtype=bool)
    coll_on = np.zeros(M, dtype=bool)
    adam = AdamState(lr=config.lr_init, beta1=config.beta1, beta2=config.beta2)

    best_total = np.inf
    best_knots = knots[0].copy()
    best_flags = (False, False)
    history = []

    for it in range(config.iters_init + 1):
        last = (it == config.iters_init) or (
            deadline is not None and time.monotonic() > deadline)
        states4, inputs, dstates, dinputs = ref_rollout(
            starts4, knots, grid.dt, grid.n_steps, grid.substeps, car_arr,
            with_grad=True)
        states = np.zeros((M, grid.n_steps + 1, 5))
        states[:, :, :4] = states4

        # staging checks on the current rollout (activation is monotone)
        goal_d = np.hypot(states[:, -1, 0] - problem.goal[0],
                          states[:, -1, 1] - problem.goal[1])
        lo = np.maximum(0.0, problem.bounds.x_min - states)
        hi = np.maximum(0.0, states - problem.bounds.x_max)
        j_b_raw = w.q_bound * np.sum(lo * lo + hi * hi, axis=(1, 2))
        newly_bounds = (~bounds_on) & (goal_d < config.goal_threshold)
        newly_coll = (~coll_on) & bounds_on & (j_b_raw == 0.0)
        if np.any(newly_bounds | newly_coll):
            adam.reset_rows(np.nonzero(newly_bounds | newly_coll)[0])
        bounds_on |= newly_bounds
        coll_on |= newly_coll

        bc = batch_cost(states, inputs, None, problem.goal, problem.bounds, w,
                        problem.env, problem.gradients, bounds_on, coll_on)
        full = _full_total(bc, w)
        full = np.where(np.isfinite(full), full, np.inf)
        idx = int(np.argmin(full))
        if full[idx] < best_total:
            best_total = float(full[idx])
            best_knots = knots[idx].copy()
            best_flags = (bool(bounds_on[idx]), bool(coll_on[idx]))
        history.append({
            "iteration": it, "stage": 1, "total": float(best_total),
            "J_G": float(bc.j_g[idx]), "J_I": float(bc.j_i[idx]),
            "J_B": float(bc.j_b[idx]), "J_C": float(bc.j_c[idx]),
        })
        if last:
            break

        grad = assemble_gradient(bc, dstates, dinputs).reshape(knots.shape)
        grad = costmod.clip_gradient(grad, w.grad_clip)
        knots = adam_step(adam, knots, grad)
        np.clip(knots[:, :, 0], box[0, 0], box[0, 1], out=knots[:, :, 0])
        np.clip(knots[:, :, 1], box[1, 0], box[1, 1], out=knots[:, :, 1])

    if not np.isfinite(best_total):
        raise RuntimeError("initialization failed")
    policy = PolicyParams(best_knots, start, grid.horizon)
    return policy, {"history": history, "best_total": best_total,
                    "flags": best_flags}


def stage2_refine(p_star: PolicyParams, problem: PlanProblem,
                  config: StageConfig, rng_seed: int,
                  deadline: float | None = None):
    """Density-weighted local refinement of the stage-1 policy.

    Returns (best PolicyParams, info dict). All cost terms are active from
    the first iteration; the best iterate over the history is returned.
    """
    w = problem.weights
    grid = problem.grid
    car_arr = problem.car.as_array()
    box = problem.car.knot_box()
    samples = sample_initial(problem.dist, config.s_samples,
                             substream_seed(rng_seed, STREAM_INIT))
    x0 = np.stack([x for x, _ in samples])
    rho0 = np.array([r for _, r in samples])
    ones = np.ones(config.s_samples)
    knots = p_star.knots.copy()
    start4 = p_star.start_ref[:4]
    adam = AdamState(lr=config.lr_local, beta1=config.beta1, beta2=config.beta2)

    best_total = np.inf
    best_knots = knots.copy()
    history = []
    timed_out = False

    for it in range(config.iters_local + 1):
        last = it == config.iters_local
        if deadline is not None and time.monotonic() > deadline:
            timed_out = True
            break
        out = closed_rollout(x0, start4, knots, grid.dt, grid.n_steps,
                             grid.substeps, car_arr, with_grad=not last)
        rho = rho0[:, None] * np.exp(out["g"])
        bc = batch_cost(out["states"], out["inputs"], rho, problem.goal,
                        problem.bounds, w, problem.env, problem.gradients,
                        ones, ones)
        total = float(bc.total.sum())
        if not np.isfinite(total):
            break
        if total < best_total:
            best_total = total
            best_knots = knots.copy()
        history.append({
            "iteration": it, "stage": 2, "total": total,
            "J_G": float(bc.j_g.sum()), "J_I": float(bc.j_i.sum()),
            "J_B": float(bc.j_b.sum()), "J_C": float(bc.j_c.sum()),
        })
        if last:
            break
        grad = assemble_gradient(bc, out["dstates"], out["dinputs"],
                                 dg=out["dg"]).sum(axis=0)
        grad = costmod.clip_gradient(grad, w.grad_clip).reshape(knots.shape)
        knots = adam_step(adam, knots[None], grad[None])[0]
        np.clip(knots[:, 0], box[0, 0], box[0, 1], out=knots[:, 0])
        np.clip(knots[:, 1], box[1, 0], box[1, 1], out=knots[:, 1])

    policy = PolicyParams(best_knots, p_star.start_ref.copy(), grid.horizon)
    return policy, {"history": history, "best_total": best_total,
                    "x0": x0, "rho0": rho0, "timed_out": timed_out}


def reference_metrics(policy: PolicyParams, problem: PlanProblem):
    """Density-one cost terms of the planned reference (the failure-rule scale)."""
    grid = problem.grid
    states4, inputs = ref_rollout(policy.start_ref[None, :4], policy.knots[None],
                                  grid.dt, grid.n_steps, grid.substeps,
                                  problem.car.as_array())
    states = np.zeros((1, grid.n_steps + 1, 5))
    states[:, :, :4] = states4
    bc = batch_cost(states, inputs, None, problem.goal, problem.bounds,
                    problem.weights, problem.env, problem.gradients,
                    np.ones(1), np.ones(1))
    return {
        "goal_dist": float(bc.goal_dist[0]),
        "J_G": float(bc.j_g[0]), "J_I": float(bc.j_i[0]),
        "J_B": float(bc.j_b[0]), "J_C": float(bc.j_c[0]),
    }


def plan_status(goal_dist: float, j_c: float, timed_out: bool,
                goal_fail_m: float = GOAL_FAIL_M, jc_fail: float = JC_FAIL) -> str:
    if timed_out:
        return "timeout"
    if j_c > jc_fail:
        return "failed_collision"
    if goal_dist > goal_fail_m:
        return "failed_goal"
    return "ok"


def plan_density(problem: PlanProblem, config: StageConfig, rng_seed: int) -> PlanResult:
    """Full two-stage planning run with timing, status and diagnostics."""
    t_all = time.monotonic()
    deadline = t_all + config.budget_s
    t0 = time.monotonic()
    p1, info1 = stage1_initialize(problem, config, rng_seed, deadline)
    t_init = time.monotonic() - t0
    log.info("stage 1 finished in %.2fs, best cost %.4f", t_init, info1["best_total"])

    t0 = time.monotonic()
    p2, info2 = stage2_refine(p1, problem, config, rng_seed, deadline)
    t_local = time.monotonic() - t0
    log.info("stage 2 finished in %.2fs, best cost %.4g", t_local, info2["best_total"])

    # final diagnostics on the refined policy
    grid = problem.grid
    out = closed_rollout(info2["x0"], p2.start_ref[:4], p2.knots, grid.dt,
                         grid.n_steps, grid.substeps, problem.car.as_array())
    from .collision import collision_profile_from_rollouts
    from .density import DensityRollout
    rollouts = [DensityRollout(states=out["states"][i], g_log=out["g"][i],
                               rho0=float(info2["rho0"][i]))
                for i in range(out["states"].shape[0])]
    import warnings as _warnings
    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")
        profile = collision_profile_from_rollouts(rollouts, problem.env)

    ref = reference_metrics(p2, problem)
    timed_out = info2["timed_out"] or (time.monotonic() > deadline)
    status = plan_status(ref["goal_dist"], ref["J_C"], timed_out)
    w = problem.weights
    breakdown = CostBreakdown(
        j_g=ref["J_G"], j_i=ref["J_I"], j_b=ref["J_B"], j_c=ref["J_C"],
        total=(w.alpha_g * ref["J_G"] + w.alpha_i * ref["J_I"]
               + w.alpha_b * ref["J_B"] + w.alpha_c * ref["J_C"]))
    return PlanResult(
        method="DP", status=status, policy=p2,
        breakdown=breakdown,
        cost_history=info1["history"] + info2["history"],
        collision_profile=profile.totals,
        timings={"stage1_s": t_init, "stage2_s": t_local,
                 "offline_s": time.monotonic() - t_all},
        seed=rng_seed,
        diagnostics={"stage1_best": info1["best_total"],
                     "stage2_best": info2["best_total"],
                     "goal_dist_ref": ref["goal_dist"]},
    )
