"""Benchmark the compiled rollout kernels against the pure numpy fallback.

Run from the repository root after building the extension:

    python benchmarks/bench_kernels.py [--repeats 5]

Times the three hot kernels at planner-representative sizes and prints the
speedup of the compiled backend. The numbers bound the end-to-end planning
speed difference: these rollouts dominate both planner stages and every MPC
solve.
"""

import argparse
import time

import numpy as np

from densityplan._kernels import pure
from densityplan.dynamics import CarConfig

try:
    from densityplan._kernels import _core
except ImportError:
    _core = None

CAR = CarConfig().as_array()


def _time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases():
    rng = np.random.default_rng(0)
    box = CarConfig().knot_box()

    def knotset(b, k):
        return box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((b, k, 2))

    ref_x0 = np.tile([0.0, 0.0, 0.1, 1.5], (100, 1))
    ref_knots = knotset(100, 10)
    yield ("ref_rollout  B=100 N=100 grad", lambda impl: impl.ref_rollout(
        ref_x0, ref_knots, 0.1, 100, 5, CAR, with_grad=True))

    closed_x0 = rng.normal(scale=0.3, size=(50, 5)) + [0, 0, 0, 1.5, 0]
    closed_knots = knotset(1, 10)[0]
    ref0 = np.array([0.0, 0.0, 0.0, 1.5])
    yield ("closed_rollout S=50 N=100 grad", lambda impl: impl.closed_rollout(
        closed_x0, ref0, closed_knots, 0.1, 100, 5, CAR, with_grad=True))
    yield ("closed_rollout S=500 N=100", lambda impl: impl.closed_rollout(
        np.repeat(closed_x0, 10, axis=0), ref0, closed_knots, 0.1, 100, 5, CAR))

    mpc_x0 = np.array([[0.0, 0.0, 0.1, 2.0, 0.0]])
    mpc_u = rng.normal(size=(1, 10, 2))
    yield ("openloop_rollout H=10 grad (MPC)", lambda impl: impl.openloop_rollout(
        mpc_x0, mpc_u, 0.1, 5, CAR, with_grad=True))

    oracle_u = rng.normal(size=(8, 100, 2))
    oracle_x0 = np.tile(mpc_x0, (8, 1))
    yield ("openloop_rollout B=8 H=100 grad", lambda impl: impl.openloop_rollout(
        oracle_x0, oracle_u, 0.1, 5, CAR, with_grad=True))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if _core is None:
        print("compiled backend unavailable; run `pip install -e . "
              "--no-build-isolation` first")
    header = f"{'kernel':<34} {'pure':>10} {'compiled':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, call in cases():
        t_pure = _time(lambda: call(pure), args.repeats)
        if _core is not None:
            t_core = _time(lambda: call(_core), args.repeats)
            print(f"{name:<34} {t_pure * 1e3:9.2f}ms {t_core * 1e3:9.2f}ms "
                  f"{t_pure / t_core:7.1f}x")
        else:
            print(f"{name:<34} {t_pure * 1e3:9.2f}ms {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
