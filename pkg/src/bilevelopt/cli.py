"""Experiment command line.

Subcommands::

    synthetic    two-task divergence experiment (first-order vs unbiased)
    quadratic    outer loop on a one-dimensional quadratic, with rate check
    fewshot-toy  outer loop on synthetic few-shot softmax tasks
    sweep        resource/accuracy table across estimators, r and q
    check        run the built-in property suites; exit 0 iff all pass

Options are read from ``--config`` files of flat ``key=value`` lines and
overridden by the flags ``--seed`` (repeatable), ``--out``,
``--estimator``, ``--q``, ``--tau``, ``--r`` and ``--alpha``.  All CSV
output uses a header row, UTF-8, '.' decimals and 17 significant digits,
so reruns with equal configs are byte-identical.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from .checks import run_all_checks
from .core import (
    STREAM_SCRATCH,
    FiniteTaskDistribution,
    InnerLoopConfig,
    substream,
)
from .diagnostics import rate_check
from .engine import ScalarTaskFamily, run_scalar_experiment, supports
from .estimators import EstimatorKind, estimate, exact_grad_stored
from .outer_loop import (
    RunConfig,
    StepSchedule,
    Trajectory,
    UniformThetaInit,
    run_minibatch_gd,
)
from .problems import (
    CounterexampleProblem,
    CounterexampleSpec,
    FewShotLogisticProblem,
    FewShotTaskSampler,
    QuadraticProblem,
    QuadraticTask,
    counterexample_constants,
)

__all__ = ["main"]

# Chosen success threshold for the unbiased runs' smallest recorded
# expected-gradient magnitude; recorded in every summary row.
UFO_MIN_ABS_GRAD_THRESHOLD = 0.05


def _fmt(value) -> str:
    """One CSV cell: 17-significant-digit floats, plain ints, '' for None."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _write_csv(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(cell) for cell in row) + "\n")


def _parse_config_file(path: str) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _parse_estimator(name: str, q: float | None) -> EstimatorKind:
    name = name.strip().lower().replace("-", "_")
    if name == "ufo":
        if q is None:
            raise ValueError("estimator ufo needs q (flag --q or config key q)")
        return EstimatorKind.ufo(q)
    if name == "exact_checkpointed":
        return EstimatorKind.exact_checkpointed()
    return EstimatorKind(name)


class _Options:
    """Merged option view: defaults, then config file, then CLI flags."""

    def __init__(self, defaults: dict, args):
        self.values = dict(defaults)
        if args.config:
            file_values = _parse_config_file(args.config)
            unknown = set(file_values) - set(defaults)
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            self.values.update(file_values)
        for key in ("out", "estimator", "q", "tau", "r", "alpha"):
            flag = getattr(args, key, None)
            if flag is not None:
                self.values[key] = flag
        if args.seed:
            self.values["seeds"] = ",".join(str(s) for s in args.seed)

    def get(self, key: str, cast=str):
        raw = self.values[key]
        if raw is None or isinstance(raw, str) and raw == "":
            return None
        if cast is bool and isinstance(raw, str):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)

    def seeds(self) -> list:
        return [int(s) for s in str(self.values["seeds"]).split(",") if s.strip() != ""]


def _run_scalar_config(family: ScalarTaskFamily, problem, dist, cfg: RunConfig) -> Trajectory:
    if supports(cfg):
        return run_scalar_experiment(family, cfg)
    return run_minibatch_gd(problem, dist, cfg)


def _iterate_rows(traj: Trajectory, seed: int, label: str, pad_cols: int):
    """Per-iteration CSV cells: k, gamma, theta, gradients, coin."""
    rows = []
    min_sq = math.inf
    meta = traj.meta_grads[:, 0]
    for k in range(traj.num_recorded):
        grad_m = meta[k] if np.isfinite(meta[k]) else None
        grad_sq = None if grad_m is None else grad_m * grad_m
        if grad_sq is not None:
            min_sq = min(min_sq, grad_sq)
        gamma = traj.gammas[k - 1] if k >= 1 else None
        corr = None
        if k >= 1 and traj.corrections[k - 1] >= 0:
            corr = int(traj.corrections[k - 1])
        rows.append(
            [
                "iter",
                seed,
                label,
                k,
                gamma,
                traj.thetas[k, 0],
                grad_m,
                grad_sq,
                None if min_sq == math.inf else min_sq,
                corr,
            ]
            + [None] * pad_cols
        )
    return rows, (None if min_sq == math.inf else min_sq)


SYNTHETIC_DEFAULTS = {
    "a1": "0.5",
    "a2": "1.5",
    "d_target": "0.06",
    "alpha": "0.1",
    "r": "10",
    "tau": "10000",
    "v": "1",
    "q": "0.1",
    "schedule": "harmonic:10",
    "theta0_low": "-10",
    "theta0_high": "30",
    "seeds": "0,1,2,3,4,5,6,7,8,9",
    "estimator": "",
    "clip": "",
    "out": "synthetic.csv",
}

_ITER_COLUMNS = [
    "row_type",
    "seed",
    "estimator",
    "k",
    "gamma_k",
    "theta",
    "grad_M_exact",
    "grad_M_sq",
    "min_grad_M_sq_so_far",
    "correction_taken",
]

_SYNTH_HEADER = _ITER_COLUMNS + [
    "final_min_grad_M_sq",
    "min_abs_grad_M",
    "tail_mean_grad_M_sq",
    "x_star",
    "theta_star",
    "sqrt_two_d",
    "threshold_min_abs_grad",
    # problem constants, so loss curves and the objective landscape can be
    # rebuilt from the CSV alone
    "a1",
    "a2",
    "b2",
    "big_a",
    "alpha",
    "r",
]


def cmd_synthetic(opts: _Options) -> int:
    spec = CounterexampleSpec.from_parameters(
        a1=opts.get("a1", float),
        a2=opts.get("a2", float),
        alpha=opts.get("alpha", float),
        r=opts.get("r", int),
        d_target=opts.get("d_target", float),
    )
    consts = counterexample_constants(spec)
    problem = CounterexampleProblem(dim=1)
    dist = spec.distribution()
    family = ScalarTaskFamily.from_distribution(dist)
    inner = InnerLoopConfig(alpha=spec.alpha, r=spec.r)
    theta0 = UniformThetaInit(opts.get("theta0_low", float), opts.get("theta0_high", float))
    schedule = StepSchedule.parse(opts.get("schedule"))

    chosen = opts.get("estimator")
    if chosen:
        estimators = [_parse_estimator(chosen, opts.get("q", float))]
    else:
        estimators = [EstimatorKind.fo(), EstimatorKind.ufo(opts.get("q", float))]

    rows = []
    failed = False
    for kind in estimators:
        for seed in opts.seeds():
            cfg = RunConfig(
                tau=opts.get("tau", int),
                v=opts.get("v", int),
                inner=inner,
                estimator=kind,
                schedule=schedule,
                seed=seed,
                theta0=theta0,
                clip_bound=opts.get("clip", float),
            )
            traj = _run_scalar_config(family, problem, dist, cfg)
            failed = failed or traj.failed
            run_rows, min_sq = _iterate_rows(traj, seed, kind.label(), pad_cols=13)
            rows.extend(run_rows)
            min_abs = None if min_sq is None else math.sqrt(min_sq)
            tail_mean = None
            if not traj.failed and cfg.tau >= 10:
                tail = traj.meta_grads[-(cfg.tau // 10):, 0]
                tail_mean = float(np.mean(tail**2))
            rows.append(
                ["summary", seed, kind.label()]
                + [None] * 7
                + [
                    min_sq,
                    min_abs,
                    tail_mean,
                    consts.x_star,
                    consts.theta_star,
                    math.sqrt(2.0 * spec.d_target),
                    UFO_MIN_ABS_GRAD_THRESHOLD,
                    spec.a1,
                    spec.a2,
                    spec.b2,
                    spec.big_a,
                    spec.alpha,
                    spec.r,
                ]
            )
    _write_csv(opts.get("out"), _SYNTH_HEADER, rows)
    if failed:
        print("error: at least one run aborted on a non-finite state", file=sys.stderr)
        return 1
    return 0


QUADRATIC_DEFAULTS = {
    "a": "1.0",
    "b": "0.0",
    "alpha": "0.1",
    "r": "5",
    "tau": "10000",
    "v": "1",
    "q": "",
    "schedule": "inverse_sqrt",
    "theta0": "10.0",
    "seeds": "0",
    "estimator": "exact_stored",
    "clip": "",
    "out": "quadratic.csv",
}

_QUAD_HEADER = _ITER_COLUMNS + ["final_min_grad_M_sq", "min_abs_grad_M", "rate_consistent"]


def cmd_quadratic(opts: _Options) -> int:
    task = QuadraticTask(a=np.array([opts.get("a", float)]), b=np.array([opts.get("b", float)]))
    problem = QuadraticProblem()
    dist = FiniteTaskDistribution([task], [1.0])
    family = ScalarTaskFamily.from_distribution(dist)
    inner = InnerLoopConfig(alpha=opts.get("alpha", float), r=opts.get("r", int))
    schedule = StepSchedule.parse(opts.get("schedule"))
    kind = _parse_estimator(opts.get("estimator"), opts.get("q", float))

    rows = []
    failed = False
    for seed in opts.seeds():
        cfg = RunConfig(
            tau=opts.get("tau", int),
            v=opts.get("v", int),
            inner=inner,
            estimator=kind,
            schedule=schedule,
            seed=seed,
            theta0=np.array([opts.get("theta0", float)]),
            clip_bound=opts.get("clip", float),
        )
        traj = _run_scalar_config(family, problem, dist, cfg)
        failed = failed or traj.failed
        run_rows, min_sq = _iterate_rows(traj, seed, kind.label(), pad_cols=3)
        rows.extend(run_rows)
        consistent = None
        if schedule.kind == "inverse_sqrt" and not traj.failed and cfg.tau >= 1:
            consistent = rate_check(traj).consistent
        min_abs = None if min_sq is None else math.sqrt(min_sq)
        rows.append(
            ["summary", seed, kind.label()] + [None] * 7 + [min_sq, min_abs, consistent]
        )
    _write_csv(opts.get("out"), _QUAD_HEADER, rows)
    return 1 if failed else 0


FEWSHOT_DEFAULTS = {
    "features": "4",
    "classes": "3",
    "shots": "2",
    "test_per_class": "1",
    "alpha": "0.4",
    "r": "3",
    "tau": "200",
    "v": "2",
    "q": "0.2",
    "schedule": "constant:0.5",
    "estimator": "ufo",
    "clip": "0.1",
    "mc_norm_every": "20",
    "mc_norm_samples": "32",
    "seeds": "0",
    "out": "fewshot_toy.csv",
}

_FEWSHOT_HEADER = [
    "row_type",
    "seed",
    "estimator",
    "k",
    "gamma_k",
    "theta_norm",
    "batch_grad_norm",
    "grad_M_mc_norm",
    "correction_taken",
    "inner_grad_evals",
    "outer_grad_evals",
    "hvp_evals",
]


def cmd_fewshot_toy(opts: _Options) -> int:
    sampler = FewShotTaskSampler(
        num_features=opts.get("features", int),
        num_classes=opts.get("classes", int),
        shots_per_class=opts.get("shots", int),
        test_per_class=opts.get("test_per_class", int),
    )
    problem = FewShotLogisticProblem()
    dim = sampler.num_features * sampler.num_classes
    inner = InnerLoopConfig(alpha=opts.get("alpha", float), r=opts.get("r", int))
    kind = _parse_estimator(opts.get("estimator"), opts.get("q", float))
    schedule = StepSchedule.parse(opts.get("schedule"))

    rows = []
    failed = False
    for seed in opts.seeds():
        cfg = RunConfig(
            tau=opts.get("tau", int),
            v=opts.get("v", int),
            inner=inner,
            estimator=kind,
            schedule=schedule,
            seed=seed,
            theta0=np.zeros(dim),
            clip_bound=opts.get("clip", float),
            mc_norm_every=opts.get("mc_norm_every", int),
            mc_norm_samples=opts.get("mc_norm_samples", int),
        )
        traj = run_minibatch_gd(problem, sampler, cfg)
        failed = failed or traj.failed
        norms = traj.meta_grad_norms
        for k in range(traj.num_recorded):
            mc_norm = norms[k] if np.isfinite(norms[k]) else None
            if k == 0:
                rows.append(
                    ["iter", seed, kind.label(), 0, None, np.linalg.norm(traj.thetas[0]),
                     None, mc_norm, None, None, None, None]
                )
                continue
            corr = int(traj.corrections[k - 1]) if traj.corrections[k - 1] >= 0 else None
            rows.append(
                [
                    "iter",
                    seed,
                    kind.label(),
                    k,
                    traj.gammas[k - 1],
                    np.linalg.norm(traj.thetas[k]),
                    np.linalg.norm(traj.batch_grads[k - 1]),
                    mc_norm,
                    corr,
                    int(traj.inner_grad_evals[k - 1]),
                    int(traj.outer_grad_evals[k - 1]),
                    int(traj.hvp_evals[k - 1]),
                ]
            )
        rows.append(
            [
                "summary",
                seed,
                kind.label(),
                None,
                None,
                np.linalg.norm(traj.thetas[traj.num_recorded - 1]),
                None,
                None,
                None,
                int(traj.inner_grad_evals.sum()),
                int(traj.outer_grad_evals.sum()),
                int(traj.hvp_evals.sum()),
            ]
        )
    _write_csv(opts.get("out"), _FEWSHOT_HEADER, rows)
    return 1 if failed else 0


SWEEP_DEFAULTS = {
    "a1": "0.5",
    "a2": "1.5",
    "d_target": "0.06",
    "alpha": "0.1",
    "r": "5,10,20",
    "q": "",
    "estimators": "fo,exact_stored,exact_rerun,ufo",
    "calls": "300",
    "seeds": "0",
    "out": "sweep.csv",
}

_SWEEP_HEADER = [
    "estimator",
    "r",
    "q",
    "alpha",
    "calls",
    "mean_inner_grad_evals",
    "mean_outer_grad_evals",
    "mean_hvp_evals",
    "max_peak_cached_states",
    "correction_rate",
    "mean_abs_err_vs_exact",
    "max_abs_err_vs_exact",
]


def cmd_sweep(opts: _Options) -> int:
    alpha = opts.get("alpha", float)
    r_values = [int(x) for x in str(opts.values["r"]).split(",")]
    single = opts.values.get("estimator")
    if single:
        names = [str(single)]
    else:
        names = [s.strip() for s in str(opts.values["estimators"]).split(",")]
    calls = opts.get("calls", int)
    seed = opts.seeds()[0]
    q_flag = opts.get("q", float)

    rows = []
    for r in r_values:
        spec = CounterexampleSpec.from_parameters(
            a1=opts.get("a1", float),
            a2=opts.get("a2", float),
            alpha=alpha,
            r=r,
            d_target=opts.get("d_target", float),
        )
        consts = counterexample_constants(spec)
        problem = CounterexampleProblem(dim=1)
        cfg = InnerLoopConfig(alpha=alpha, r=r)
        lo, hi = consts.interval
        rng = substream(seed, STREAM_SCRATCH, r)
        thetas = rng.uniform(lo, hi, size=calls)
        task_picks = rng.integers(0, len(spec.tasks), size=calls)
        coin_rng = substream(seed, STREAM_SCRATCH, r, 1)

        for name in names:
            q = (q_flag if q_flag is not None else 1.0 / r) if name == "ufo" else None
            kind = _parse_estimator(name, q)
            inner = outer = hvp = 0.0
            peak = 0
            corrections = 0
            abs_errs = np.empty(calls)
            for i in range(calls):
                theta = np.array([thetas[i]])
                task = spec.tasks[int(task_picks[i])]
                est = estimate(kind, problem, task, theta, cfg, rng=coin_rng)
                exact = exact_grad_stored(problem, task, theta, cfg)
                abs_errs[i] = float(np.linalg.norm(est.gradient - exact.gradient))
                inner += est.inner_grad_evals
                outer += est.outer_grad_evals
                hvp += est.hvp_evals
                peak = max(peak, est.peak_cached_states)
                if est.correction_taken:
                    corrections += 1
            rows.append(
                [
                    kind.label(),
                    r,
                    q,
                    alpha,
                    calls,
                    inner / calls,
                    outer / calls,
                    hvp / calls,
                    peak,
                    corrections / calls if kind.is_stochastic else None,
                    abs_errs.mean(),
                    abs_errs.max(),
                ]
            )
    _write_csv(opts.get("out"), _SWEEP_HEADER, rows)
    return 0


def cmd_check() -> int:
    outcomes = run_all_checks()
    for outcome in outcomes:
        status = "PASS" if outcome.passed else "FAIL"
        print(f"{status}  {outcome.name}: {outcome.detail}")
    return 0 if all(o.passed for o in outcomes) else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilevelopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synthetic", "quadratic", "fewshot-toy", "sweep", "check"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="flat key=value config file")
        cmd.add_argument("--seed", type=int, action="append", help="run seed (repeatable)")
        cmd.add_argument("--out", help="output CSV path")
        cmd.add_argument("--estimator", help="estimator name")
        cmd.add_argument("--q", type=float, help="correction probability for ufo")
        cmd.add_argument("--tau", type=int, help="outer iterations")
        cmd.add_argument("--r", type=int, help="inner rollout length")
        cmd.add_argument("--alpha", type=float, help="inner step size")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "check":
            return cmd_check()
        if args.command == "synthetic":
            return cmd_synthetic(_Options(SYNTHETIC_DEFAULTS, args))
        if args.command == "quadratic":
            return cmd_quadratic(_Options(QUADRATIC_DEFAULTS, args))
        if args.command == "fewshot-toy":
            return cmd_fewshot_toy(_Options(FEWSHOT_DEFAULTS, args))
        if args.command == "sweep":
            return cmd_sweep(_Options(SWEEP_DEFAULTS, args))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
