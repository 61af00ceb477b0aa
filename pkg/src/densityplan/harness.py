"""Experiment orchestration: closed-loop execution of planned trajectories,
failure accounting, cost-increment metrics, and the evaluation suites.

A plan is executed at 1/dt Hz with zero-order-hold inputs: reference
policies run their tracking controller on the (perfect or biased) state
measurement, the oracle replays its solved input sequence, and the MPC
baselines solve their receding-horizon problem each step. Realized costs are
evaluated with density one on the executed trajectory -- the scale the
failure rule (J_C > 10, final distance > 4.5 m) is calibrated to.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics
from ._kernels import pure as _pure
from .baselines import (MpcConfig, MpcController, OracleConfig, SearchConfig,
                        oracle_solve, sampling_planner, search_planner)
from .collision import batch_collision_terms, bin_ego, collision_probability
from .cost import CostWeights
from .density import DensityRollout, default_initial_distribution
from .dynamics import CarConfig, StateBounds, TimeGrid, step_constant_input
from .envmap import (EnvGenConfig, GridGeometry, OccupancyGrid,
                     generate_random_env, ingest_tracks_csv, read_sidecar)
from .optimizer import PlanProblem, PlanResult, StageConfig, plan_density
from .policy import recover_reference
from .seeding import (STREAM_ENV, STREAM_TRUTH, STREAM_WINDOW, substream_seed)

MPC_RADII = {"M0": 0.0, "M1": 0.3, "M2": 0.5, "M3": 1.0}

METRICS_COLUMNS = ["method", "env_id", "mode", "status", "J_G", "J_I",
                   "J_C_profile_max", "J_C_profile_sum", "offline_s",
                   "online_ms_per_step", "J_C"]
TIMING_COLUMNS = {"offline_s", "online_ms_per_step"}


@dataclass
class ExperimentConfig:
    n_envs: int = 20
    methods: tuple = ("DP", "sampling", "search", "M0")
    modes: tuple = ("perfect",)
    env_gen: EnvGenConfig = field(default_factory=EnvGenConfig)
    stage: StageConfig = field(default_factory=StageConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    car: CarConfig = field(default_factory=CarConfig)
    sampling_m: int = 100
    pos_sigma: float = 0.3
    bias_halfwidth: float = 0.1
    goal_fail_m: float = 4.5
    jc_fail: float = 10.0
    budget_s: float = 300.0
    v_max: float = 10.0
    substeps: int = 5
    windows_per_recording: int = 10


@dataclass
class ExecutionTrace:
    states: np.ndarray
    inputs: np.ndarray
    step_times_s: np.ndarray
    realized: dict
    status: str


@dataclass
class MetricsReport:
    rows: list
    summary: dict

    def write(self, out_dir):
        import os
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(self.rows, os.path.join(out_dir, "metrics.csv"))
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(self.summary, fh, indent=1)


def build_problem(env: OccupancyGrid, start, goal, config: ExperimentConfig) -> PlanProblem:
    geom = env.geometry
    bounds = StateBounds(
        np.array([geom.origin[0], geom.origin[1], -np.inf, 0.0, -np.inf]),
        np.array([geom.origin[0] + geom.cx * geom.cell_size,
                  geom.origin[1] + geom.cy * geom.cell_size,
                  np.inf, config.v_max, np.inf]))
    dist = default_initial_distribution(start, pos_sigma=config.pos_sigma,
                                        bias_halfwidth=config.bias_halfwidth)
    grid = TimeGrid(dt=geom.dt, n_steps=geom.n_steps, substeps=config.substeps)
    return PlanProblem(env=env, dist=dist, goal=np.asarray(goal, dtype=float),
                       bounds=bounds, car=config.car, grid=grid,
                       weights=config.weights)


def _measure(x, mode: str):
    """Perfect measurement is the biased measurement of a bias-free state, so
    zero-bias runs produce bitwise-identical traces in both modes."""
    if mode == "biased":
        return dynamics.biased_measurement(x)
    out = np.asarray(x, dtype=float).copy()
    out[dynamics.BIAS] = 0.0
    return dynamics.biased_measurement(out)


def _realized_metrics(states, inputs, problem: PlanProblem,
                      config: ExperimentConfig):
    """Density-one costs of an executed trajectory."""
    w = problem.weights
    goal = problem.goal
    d_last = states[-1] - goal
    j_g = float(np.sum(w.q_g * d_last * d_last))
    goal_dist = float(np.hypot(d_last[0], d_last[1]))
    j_i = float(np.sum(w.q_i * inputs * inputs))
    p_occ, desired = batch_collision_terms(states[None, :, :2], problem.env,
                                           problem.gradients, w.beta)
    d2 = np.sum((states[None, :, :2] - desired) ** 2, axis=-1)
    j_c = float(np.sum(p_occ * d2))
    rollout = DensityRollout(states=states, g_log=np.zeros(states.shape[0]),
                             rho0=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ego = bin_ego([rollout], problem.env.geometry)
    profile = collision_probability(ego, problem.env)
    return {"goal_dist": goal_dist, "J_G": j_g, "J_I": j_i, "J_C": j_c,
            "J_C_profile_max": profile.max, "J_C_profile_sum": profile.sum}


def simulate_execution(plan: PlanResult, problem: PlanProblem, true_x0,
                       mode: str, config: ExperimentConfig) -> ExecutionTrace:
    """Closed-loop rollout of a plan from the true initial state.

    Records states, applied inputs, per-step online compute time, and the
    realized density-one costs; applies the failure rules to the trace.
    """
    grid = problem.grid
    n = grid.n_steps
    x = np.asarray(true_x0, dtype=float).copy()
    states = np.empty((n + 1, 5))
    inputs = np.empty((n, 2))
    step_times = np.empty(n)
    states[0] = x
    car_arr = problem.car.as_array()

    if plan.method in MPC_RADII:
        ctrl = MpcController(problem, replace(config.mpc,
                                              tube_radius=MPC_RADII[plan.method]))
        for k in range(n):
            measured = _measure(x, mode)
            t0 = time.perf_counter()
            u, _ = ctrl.step(measured, k)
            step_times[k] = time.perf_counter() - t0
            inputs[k] = u
            x = step_constant_input(x, u, grid.dt, grid.substeps)
            states[k + 1] = x
    elif plan.input_sequence is not None:
        seq = np.asarray(plan.input_sequence, dtype=float)
        for k in range(n):
            t0 = time.perf_counter()
            u = seq[k]
            step_times[k] = time.perf_counter() - t0
            inputs[k] = u
            x = step_constant_input(x, u, grid.dt, grid.substeps)
            states[k + 1] = x
    elif plan.policy is not None:
        ref = recover_reference(plan.policy, grid)
        ref_states = ref.states[:, :4]
        ref_inputs = np.vstack([ref.inputs, ref.inputs[-1]])
        for k in range(n):
            measured = _measure(x, mode)
            t0 = time.perf_counter()
            u, _ = _pure.controller(measured[None], ref_states[k],
                                    ref_inputs[k], car_arr)
            step_times[k] = time.perf_counter() - t0
            inputs[k] = u[0]
            x = step_constant_input(x, u[0], grid.dt, grid.substeps)
            states[k + 1] = x
    else:
        # no executable artifact (plan failed before producing one)
        return ExecutionTrace(states=states[:1], inputs=np.empty((0, 2)),
                              step_times_s=np.empty(0),
                              realized={}, status=plan.status)

    if not np.all(np.isfinite(states)):
        # dynamics divergence: truncate at the first bad step; a diverged run
        # cannot reach the goal
        bad = int(np.argmax(~np.all(np.isfinite(states), axis=1)))
        return ExecutionTrace(states=states[:bad], inputs=inputs[:bad],
                              step_times_s=step_times[:bad], realized={},
                              status="failed_goal")
    realized = _realized_metrics(states, inputs, problem, config)
    if plan.status == "timeout":
        status = "timeout"
    elif realized["J_C"] > config.jc_fail:
        status = "failed_collision"
    elif realized["goal_dist"] > config.goal_fail_m:
        status = "failed_goal"
    else:
        status = "ok"
    return ExecutionTrace(states=states, inputs=inputs, step_times_s=step_times,
                          realized=realized, status=status)


def trace_to_csv(trace: ExecutionTrace, dt: float, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "t", "p_x", "p_y", "theta", "v", "theta_bias",
                         "omega", "a", "step_ms"])
        for k in range(trace.states.shape[0]):
            row = [k, f"{k * dt:.6f}"] + [repr(v) for v in trace.states[k]]
            if k < trace.inputs.shape[0]:
                row += [repr(trace.inputs[k, 0]), repr(trace.inputs[k, 1]),
                        repr(trace.step_times_s[k] * 1e3)]
            else:
                row += ["", "", ""]
            writer.writerow(row)


def run_plan(method: str, problem: PlanProblem, config: ExperimentConfig,
             rng_seed: int, true_x0=None) -> PlanResult:
    """Dispatch one planning method on one problem."""
    if method == "DP":
        stage = replace(config.stage, budget_s=config.budget_s)
        return plan_density(problem, stage, rng_seed)
    if method == "sampling":
        return sampling_planner(problem, config.sampling_m, rng_seed)
    if method == "search":
        return search_planner(problem, config.search)
    if method == "O":
        if true_x0 is None:
            raise ValueError("oracle needs the true initial state")
        return oracle_solve(problem, true_x0, config.oracle, rng_seed)
    if method in MPC_RADII:
        # receding-horizon methods plan online; nothing to do offline
        return PlanResult(method=method, status="ok",
                          timings={"offline_s": 0.0}, seed=rng_seed)
    raise ValueError(f"unknown method: {method}")


def _evaluate_problems(problems, config: ExperimentConfig, root_seed: int) -> MetricsReport:
    """Run every configured method on every (env_id, problem, true_x0)."""
    rows = []
    for env_id, problem, true_x0 in problems:
        for method in config.methods:
            plan = run_plan(method, problem, config,
                            substream_seed(root_seed, STREAM_ENV, env_id),
                            true_x0=true_x0)
            offline = plan.timings.get("offline_s", 0.0)
            for mode in config.modes:
                trace = simulate_execution(plan, problem, true_x0, mode, config)
                row = {"method": method, "env_id": env_id, "mode": mode,
                       "status": trace.status, "offline_s": offline,
                       "online_ms_per_step": (float(np.mean(trace.step_times_s)) * 1e3
                                              if trace.step_times_s.size else np.nan)}
                for key in ("J_G", "J_I", "J_C", "J_C_profile_max",
                            "J_C_profile_sum"):
                    row[key] = trace.realized.get(key, np.nan)
                rows.append(row)
    return MetricsReport(rows=rows, summary=summarize(rows, config))


def summarize(rows, config: ExperimentConfig) -> dict:
    """Failure rates, cost increments vs the per-environment best, timings.

    Failed runs count toward the failure rate but are excluded from cost and
    timing averages and from defining the per-environment best.
    """
    summary = {}
    for mode in config.modes:
        mode_rows = [r for r in rows if r["mode"] == mode]
        env_ids = sorted({r["env_id"] for r in mode_rows})
        best = {}
        for env_id in env_ids:
            ok_rows = [r for r in mode_rows
                       if r["env_id"] == env_id and r["status"] == "ok"]
            if ok_rows:
                best[env_id] = {
                    "J_C": min(r["J_C"] for r in ok_rows),
                    "J_G": min(r["J_G"] for r in ok_rows),
                    "J_I": min(r["J_I"] for r in ok_rows),
                }
        per_method = {}
        for method in config.methods:
            m_rows = [r for r in mode_rows if r["method"] == method]
            n = len(m_rows)
            ok = [r for r in m_rows if r["status"] == "ok"]
            entry = {"n_envs": n, "failure_rate": 1.0 - len(ok) / n if n else np.nan}
            incs = {"CRI": [], "GCI": [], "ICI": []}
            for r in ok:
                if r["env_id"] not in best:
                    continue
                b = best[r["env_id"]]
                incs["CRI"].append(r["J_C"] - b["J_C"])
                incs["GCI"].append(r["J_G"] - b["J_G"])
                incs["ICI"].append(r["J_I"] - b["J_I"])
            for key, vals in incs.items():
                entry[key] = float(np.mean(vals)) if vals else None
            entry["offline_s_mean"] = (float(np.mean([r["offline_s"] for r in ok]))
                                       if ok else None)
            entry["online_ms_per_step_mean"] = (
                float(np.mean([r["online_ms_per_step"] for r in ok])) if ok else None)
            per_method[method] = entry
        summary[mode] = per_method
    return summary


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for r in rows:
            out = []
            for c in METRICS_COLUMNS:
                v = r[c]
                out.append(repr(float(v)) if isinstance(v, (float, np.floating))
                           else v)
            writer.writerow(out)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def evaluate_suite(config: ExperimentConfig, root_seed: int,
                   out_dir=None) -> MetricsReport:
    """Random-environment evaluation of all configured methods."""
    problems = []
    for env_id in range(config.n_envs):
        obstacles, grid, start, goal = generate_random_env(
            config.env_gen, substream_seed(root_seed, STREAM_ENV, env_id))
        problem = build_problem(grid, start, goal, config)
        rng = np.random.default_rng(substream_seed(root_seed, STREAM_TRUTH, env_id))
        true_x0 = problem.dist.draw(1, rng)[0]
        problems.append((env_id, problem, true_x0))
    report = _evaluate_problems(problems, config, root_seed)
    if out_dir is not None:
        report.write(out_dir)
    return report


def _window_problem(grid: OccupancyGrid, config: ExperimentConfig, rng):
    """Sample an admissible start/goal pair inside an ingested window."""
    geom = grid.geometry
    lo = np.array(geom.origin)
    hi = lo + np.array([geom.cx, geom.cy]) * geom.cell_size
    for _ in range(1000):
        start_xy = rng.uniform(lo, hi)
        goal_xy = rng.uniform(lo, hi)
        d = np.hypot(*(goal_xy - start_xy))
        if not (config.env_gen.start_goal_distance[0] <= d
                <= config.env_gen.start_goal_distance[1]):
            continue
        if grid.prob_at(start_xy, 0) >= config.env_gen.free_threshold:
            continue
        if grid.prob_at(goal_xy, geom.n_steps) >= config.env_gen.free_threshold:
            continue
        bearing = np.arctan2(goal_xy[1] - start_xy[1], goal_xy[0] - start_xy[0])
        v0 = rng.uniform(*config.env_gen.v0_range)
        start = np.array([start_xy[0], start_xy[1], bearing, v0, 0.0])
        goal = np.array([goal_xy[0], goal_xy[1], 0.0, 0.0, 0.0])
        return start, goal
    return None


def _recording_geometry(csv_path, config: ExperimentConfig) -> tuple:
    """Grid geometry covering a recording's tracks, and its time span."""
    frame_rate, utm_origin = read_sidecar(csv_path)
    xs, ys, frames = [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            xs.append(float(row["xCenter"]))
            ys.append(float(row["yCenter"]))
            frames.append(float(row["frame"]))
    xs = np.asarray(xs) + utm_origin[0]
    ys = np.asarray(ys) + utm_origin[1]
    margin = config.env_gen.margin + 10.0
    cell = config.env_gen.cell_size
    origin = (xs.min() - margin, ys.min() - margin)
    cx = int(np.ceil((xs.max() + margin - origin[0]) / cell))
    cy = int(np.ceil((ys.max() + margin - origin[1]) / cell))
    geom = GridGeometry(origin=origin, cell_size=cell, cx=cx, cy=cy,
                        n_steps=config.env_gen.n_steps, dt=config.env_gen.dt)
    t_span = (min(frames) / frame_rate, max(frames) / frame_rate)
    return geom, t_span


def ind_suite(csv_paths, config: ExperimentConfig, root_seed: int,
              out_dir=None) -> MetricsReport:
    """Evaluation on ingested trajectory recordings.

    Per recording, ``windows_per_recording`` random time windows are
    ingested; a start/goal pair is sampled per window under the same
    admissibility rules as the random generator. Windows with no admissible
    pair are skipped with a warning.
    """
    problems = []
    env_id = 0
    for rec_idx, path in enumerate(csv_paths):
        geom, (t_min, t_max) = _recording_geometry(path, config)
        horizon = geom.n_steps * geom.dt
        for widx in range(config.windows_per_recording):
            rng = np.random.default_rng(
                substream_seed(root_seed, STREAM_WINDOW, rec_idx, widx))
            t_start = (t_min if t_max - horizon <= t_min
                       else rng.uniform(t_min, t_max - horizon))
            grid = ingest_tracks_csv(path, geom, (t_start, t_start + horizon))
            pair = _window_problem(grid, config, rng)
            if pair is None:
                warnings.warn(f"window {widx} of {path}: no admissible "
                              "start/goal pair, skipped", stacklevel=2)
                env_id += 1
                continue
            start, goal = pair
            problem = build_problem(grid, start, goal, config)
            true_rng = np.random.default_rng(
                substream_seed(root_seed, STREAM_TRUTH, env_id))
            true_x0 = problem.dist.draw(1, true_rng)[0]
            problems.append((env_id, problem, true_x0))
            env_id += 1
    report = _evaluate_problems(problems, config, root_seed)
    report.summary["environments_attempted"] = env_id
    report.summary["environments_evaluated"] = len(problems)
    if out_dir is not None:
        report.write(out_dir)
    return report
