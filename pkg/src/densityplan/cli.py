"""Command-line interface.

Subcommands: gen-env, plan, simulate, evaluate, ingest, compare. Every
default is overridable through a JSON config file (section per component;
see README for the schema).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .baselines import MpcConfig, OracleConfig, SearchConfig
from .cost import CostWeights
from .dynamics import CarConfig
from .envmap import (EnvGenConfig, environment_from_json, environment_to_json,
                     generate_random_env, ingest_tracks_csv, rasterize,
                     read_grid, write_grid)
from .harness import (ExperimentConfig, build_problem, evaluate_suite,
                      ind_suite, run_plan, simulate_execution, trace_to_csv)
from .optimizer import PlanResult, StageConfig
from .policy import PolicyParams
from .seeding import STREAM_TRUTH, substream_seed

_SECTIONS = {
    "env_gen": EnvGenConfig,
    "stage": StageConfig,
    "mpc": MpcConfig,
    "oracle": OracleConfig,
    "search": SearchConfig,
    "weights": CostWeights,
    "car": CarConfig,
}


def load_experiment_config(path=None) -> ExperimentConfig:
    """Defaults overridden section-by-section from a JSON file."""
    config = ExperimentConfig()
    if path is None:
        return config
    with open(path) as fh:
        data = json.load(fh)
    updates = {}
    for section, cls in _SECTIONS.items():
        if section in data:
            base = getattr(config, section)
            fields = {f.name for f in dataclasses.fields(cls)}
            unknown = set(data[section]) - fields
            if unknown:
                raise ValueError(f"unknown {section} options: {sorted(unknown)}")
            overrides = {
                k: (np.array(v, dtype=float) if isinstance(v, list) else
                    tuple(v) if isinstance(getattr(base, k), tuple) else v)
                for k, v in data[section].items()}
            updates[section] = dataclasses.replace(base, **overrides)
    exp = data.get("experiment", {})
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(exp) - fields
    if unknown:
        raise ValueError(f"unknown experiment options: {sorted(unknown)}")
    for k, v in exp.items():
        updates[k] = tuple(v) if isinstance(v, list) else v
    return dataclasses.replace(config, **updates)


def _load_environment(path, config: ExperimentConfig):
    with open(path) as fh:
        obstacles, geom, start, goal, seed = environment_from_json(fh.read())
    grid_path = os.path.splitext(path)[0] + ".grid"
    if os.path.exists(grid_path):
        grid = read_grid(grid_path)
    else:
        grid = rasterize(obstacles, geom)
    return build_problem(grid, start, goal, config), start, goal, seed


def cmd_gen_env(args):
    config = load_experiment_config(args.config)
    obstacles, grid, start, goal = generate_random_env(config.env_gen, args.seed)
    os.makedirs(args.out, exist_ok=True)
    env_path = os.path.join(args.out, "environment.json")
    with open(env_path, "w") as fh:
        fh.write(environment_to_json(obstacles, grid.geometry, start, goal,
                                     seed=args.seed))
    write_grid(grid, os.path.join(args.out, "environment.grid"))
    print(f"environment written to {env_path}")
    return 0


def cmd_plan(args):
    config = load_experiment_config(args.config)
    problem, start, goal, _ = _load_environment(args.env, config)
    true_x0 = None
    if args.method == "O":
        rng = np.random.default_rng(substream_seed(args.seed, STREAM_TRUTH, 0))
        true_x0 = problem.dist.draw(1, rng)[0]
    result = run_plan(args.method, problem, config, args.seed, true_x0=true_x0)
    os.makedirs(args.out, exist_ok=True)
    plan_path = os.path.join(args.out, f"plan_{args.method}.json")
    with open(plan_path, "w") as fh:
        fh.write(result.to_json())
    if result.cost_history:
        result.history_to_csv(os.path.join(args.out, f"history_{args.method}.csv"))
    print(f"{args.method}: status={result.status} "
          f"offline={result.timings.get('offline_s', 0.0):.2f}s -> {plan_path}")
    return 0 if result.status == "ok" else 1


def _plan_from_json(path) -> PlanResult:
    with open(path) as fh:
        data = json.load(fh)
    policy = None
    if data.get("policy") is not None:
        policy = PolicyParams(np.array(data["policy"]["knots"], dtype=float),
                              np.array(data["policy"]["start_ref"], dtype=float),
                              float(data["policy"]["horizon_s"]))
    seq = data.get("input_sequence")
    return PlanResult(method=data["method"], status=data["status"],
                      policy=policy,
                      input_sequence=None if seq is None else np.array(seq))


def cmd_simulate(args):
    config = load_experiment_config(args.config)
    problem, start, goal, _ = _load_environment(args.env, config)
    plan = _plan_from_json(args.plan)
    rng = np.random.default_rng(substream_seed(args.seed, STREAM_TRUTH, 0))
    true_x0 = problem.dist.draw(1, rng)[0]
    trace = simulate_execution(plan, problem, true_x0, args.measurement, config)
    os.makedirs(args.out, exist_ok=True)
    trace_to_csv(trace, problem.grid.dt, os.path.join(args.out, "trace.csv"))
    with open(os.path.join(args.out, "realized.json"), "w") as fh:
        json.dump({"status": trace.status, **trace.realized}, fh, indent=1)
    print(f"simulated {plan.method} [{args.measurement}]: {trace.status}")
    return 0 if trace.status == "ok" else 1


def cmd_evaluate(args):
    config = load_experiment_config(args.config)
    if args.method:
        config = dataclasses.replace(config, methods=tuple(args.method))
    if args.measurement:
        config = dataclasses.replace(config, modes=(args.measurement,))
    report = evaluate_suite(config, args.seed, out_dir=args.out)
    print(json.dumps(report.summary, indent=1))
    return 0


def cmd_ingest(args):
    config = load_experiment_config(args.config)
    from .harness import _recording_geometry
    geom, (t_min, t_max) = _recording_geometry(args.csv, config)
    window = (args.window_start if args.window_start is not None else t_min,
              (args.window_start if args.window_start is not None else t_min)
              + geom.n_steps * geom.dt)
    grid = ingest_tracks_csv(args.csv, geom, window)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "ingested.grid")
    write_grid(grid, out_path)
    meta = {"csv": str(args.csv), "window": list(window),
            "empty_window": bool(grid.empty_window),
            "recording_span": [t_min, t_max]}
    with open(os.path.join(args.out, "ingested.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    print(f"grid written to {out_path} (empty_window={grid.empty_window})")
    return 0


def cmd_compare(args):
    config = load_experiment_config(args.config)
    if args.method:
        config = dataclasses.replace(config, methods=tuple(args.method))
    if args.measurement:
        config = dataclasses.replace(config, modes=(args.measurement,))
    if args.tracks:
        report = ind_suite(args.tracks, config, args.seed, out_dir=args.out)
    else:
        report = evaluate_suite(config, args.seed, out_dir=args.out)
    for mode, methods in report.summary.items():
        if not isinstance(methods, dict):
            continue
        print(f"\n== mode: {mode}")
        header = f"{'method':>10} {'fail%':>7} {'CRI':>10} {'GCI':>10} " \
                 f"{'ICI':>10} {'offline_s':>10} {'online_ms':>10}"
        print(header)
        for method, e in methods.items():
            def fmt(v):
                return "-" if v is None else f"{v:10.3f}"
            print(f"{method:>10} {100 * e['failure_rate']:7.1f} {fmt(e['CRI'])} "
                  f"{fmt(e['GCI'])} {fmt(e['ICI'])} {fmt(e['offline_s_mean'])} "
                  f"{fmt(e['online_ms_per_step_mean'])}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="densityplan",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method_flag=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None,
                       help="JSON config overriding defaults")
        p.add_argument("--out", type=str, default="out")
        if method_flag:
            p.add_argument("--measurement", choices=("perfect", "biased"),
                           default=None)

    p = sub.add_parser("gen-env", help="generate a random environment")
    common(p)
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("plan", help="plan on a stored environment")
    common(p)
    p.add_argument("--env", required=True, help="environment JSON")
    p.add_argument("--method", default="DP",
                   choices=("DP", "sampling", "search", "O"))
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="execute a stored plan closed-loop")
    common(p, method_flag=True)
    p.add_argument("--env", required=True)
    p.add_argument("--plan", required=True, help="plan JSON from `plan`")
    p.set_defaults(func=cmd_simulate, measurement="perfect")

    p = sub.add_parser("evaluate", help="run the random-environment suite")
    common(p, method_flag=True)
    p.add_argument("--method", action="append", default=None,
                   help="repeatable; overrides the configured method list")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ingest", help="build a grid from a tracks CSV")
    common(p)
    p.add_argument("--csv", required=True)
    p.add_argument("--window-start", type=float, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("compare", help="evaluate and print a ranking table")
    common(p, method_flag=True)
    p.add_argument("--method", action="append", default=None)
    p.add_argument("--tracks", action="append", default=None,
                   help="tracks CSVs; runs the recording suite instead")
    p.set_defaults(func=cmd_compare)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
