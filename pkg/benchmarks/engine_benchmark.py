#!/usr/bin/env python3
"""Benchmark the compiled engine against its pure-Python fallback.

Runs the two-task divergence experiment at a configurable horizon in two
subprocesses (the ``BILEVELOPT_NO_NUMBA`` flag applies at import time),
checks that both paths produce bitwise-identical trajectories, and prints
wall times with the speedup.

Usage: python benchmarks/engine_benchmark.py [--tau N] [--seeds N]
"""

import argparse
import json
import os
import subprocess
import sys
import tempfile

WORKER = r"""
import json, sys, time
import numpy as np
from bilevelopt import EstimatorKind, InnerLoopConfig, StepSchedule, UniformThetaInit, make_counterexample
from bilevelopt.engine import ScalarTaskFamily, run_scalar_experiment
from bilevelopt.kernels import NUMBA_ENABLED
from bilevelopt.outer_loop import RunConfig

tau, n_seeds, out_path = int(sys.argv[1]), int(sys.argv[2]), sys.argv[3]
spec, _, dist = make_counterexample()
family = ScalarTaskFamily.from_distribution(dist)
inner = InnerLoopConfig(alpha=spec.alpha, r=spec.r)

def run_all():
    thetas = []
    for kind in (EstimatorKind.fo(), EstimatorKind.ufo(0.1)):
        for seed in range(n_seeds):
            cfg = RunConfig(tau=tau, v=1, inner=inner, estimator=kind,
                            schedule=StepSchedule.harmonic(10.0), seed=seed,
                            theta0=UniformThetaInit(-10.0, 30.0))
            thetas.append(run_scalar_experiment(family, cfg).thetas)
    return np.concatenate(thetas)

run_all() if NUMBA_ENABLED else None   # warm-up compiles outside the timing
start = time.perf_counter()
result = run_all()
elapsed = time.perf_counter() - start
np.save(out_path + ".npy", result)
with open(out_path + ".json", "w") as fh:
    json.dump({"jit": NUMBA_ENABLED, "seconds": elapsed}, fh)
"""


def run_mode(disable_jit: bool, tau: int, seeds: int, out_path: str) -> dict:
    env = dict(os.environ, BILEVELOPT_NO_NUMBA="1" if disable_jit else "0")
    subprocess.run(
        [sys.executable, "-c", WORKER, str(tau), str(seeds), out_path],
        check=True,
        env=env,
    )
    with open(out_path + ".json") as fh:
        return json.load(fh)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--tau", type=int, default=2000, help="outer iterations per run")
    parser.add_argument("--seeds", type=int, default=3, help="seeds per estimator")
    args = parser.parse_args()

    import numpy as np

    with tempfile.TemporaryDirectory() as tmp:
        jit = run_mode(False, args.tau, args.seeds, os.path.join(tmp, "jit"))
        py = run_mode(True, args.tau, args.seeds, os.path.join(tmp, "py"))
        a = np.load(os.path.join(tmp, "jit.npy"))
        b = np.load(os.path.join(tmp, "py.npy"))
        identical = bool(np.array_equal(a.view(np.uint64), b.view(np.uint64)))

    runs = 2 * args.seeds
    print(f"two-task experiment, tau={args.tau}, {runs} runs (fo + ufo x {args.seeds} seeds)")
    print(f"  numba engine   : {jit['seconds']:8.3f} s")
    print(f"  python fallback: {py['seconds']:8.3f} s")
    print(f"  speedup        : {py['seconds'] / jit['seconds']:8.1f} x")
    print(f"  outputs bitwise identical: {identical}")
    return 0 if identical else 1


if __name__ == "__main__":
    sys.exit(main())
