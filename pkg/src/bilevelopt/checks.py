"""Self-contained property suites behind the ``check`` CLI command.

Each suite draws seeded random instances, exercises one contract of the
library, and reports pass/fail with a short detail string.  The suites
are intentionally redundant with the test suite: they give a user a
one-command health check of an installed build.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InnerLoopConfig, rollout
from .diagnostics import resource_report
from .estimators import (
    EstimatorKind,
    exact_grad_checkpointed,
    exact_grad_rerun,
    exact_grad_stored,
    fo_grad,
    ufo_grad,
)
from .kernels import piecewise_grad, piecewise_hess, piecewise_value
from .oracle import FDConfig, enumerate_expected_grad, fd_grad
from .problems import (
    CounterexampleProblem,
    CounterexampleSpec,
    FewShotLogisticProblem,
    FewShotTaskSampler,
    QuadraticProblem,
    QuadraticTask,
    counterexample_constants,
)

__all__ = ["CheckOutcome", "run_all_checks"]


@dataclass
class CheckOutcome:
    name: str
    passed: bool
    detail: str


def random_quadratic(rng, max_dim=50, max_r=20):
    p = int(rng.integers(1, max_dim + 1))
    a = rng.uniform(0.1, 2.0, p)
    b = rng.uniform(-2.0, 2.0, p)
    task = QuadraticTask(a=a, b=b)
    alpha = float(rng.uniform(0.05, 0.9)) / float(a.max())
    cfg = InnerLoopConfig(alpha=alpha, r=int(rng.integers(1, max_r + 1)))
    theta = rng.uniform(-3.0, 3.0, p)
    return QuadraticProblem(), task, theta, cfg


def random_counterexample(rng, max_dim=50, max_r=20, inside_interval=False):
    alpha = 0.1
    a1 = float(rng.uniform(0.2, 3.0))
    a2 = a1 + float(rng.uniform(0.2, 2.0))
    d_target = float(rng.uniform(0.01, 0.2))
    r = int(rng.integers(1, max_r + 1))
    spec = CounterexampleSpec.from_parameters(a1, a2, alpha, r, d_target)
    cfg = InnerLoopConfig(alpha=alpha, r=r)
    p = int(rng.integers(1, max_dim + 1))
    problem = CounterexampleProblem(dim=p)
    theta = rng.uniform(-1.0, 1.0, p)
    if inside_interval:
        lo, hi = counterexample_constants(spec).interval
        margin = 0.05 * (hi - lo)
        theta[0] = rng.uniform(lo + margin, hi - margin)
    else:
        theta[0] = rng.uniform(-15.0, 35.0)
    task = spec.tasks[int(rng.integers(0, 2))]
    return problem, task, theta, cfg, spec


def random_fewshot(rng, max_r=20):
    sampler = FewShotTaskSampler(
        num_features=int(rng.integers(2, 7)),
        num_classes=int(rng.integers(2, 6)),
        shots_per_class=int(rng.integers(1, 4)),
        test_per_class=int(rng.integers(1, 3)),
    )
    task = sampler.sample_one(rng)
    problem = FewShotLogisticProblem()
    theta = 0.5 * rng.standard_normal(problem.param_dim(task))
    cfg = InnerLoopConfig(alpha=float(rng.uniform(0.1, 0.5)), r=int(rng.integers(1, max_r + 1)))
    return problem, task, theta, cfg


def _instances(rng, count):
    for i in range(count):
        which = i % 3
        if which == 0:
            yield random_quadratic(rng)
        elif which == 1:
            yield random_counterexample(rng)[:4]
        else:
            yield random_fewshot(rng)


def check_estimator_equivalence(seed=101, count=30) -> CheckOutcome:
    rng = np.random.default_rng(seed)
    worst = "ok"
    for problem, task, theta, cfg in _instances(rng, count):
        stored = exact_grad_stored(problem, task, theta, cfg).gradient
        rerun = exact_grad_rerun(problem, task, theta, cfg).gradient
        ckpt = exact_grad_checkpointed(problem, task, theta, cfg).gradient
        if not (np.array_equal(stored, rerun) and np.array_equal(stored, ckpt)):
            worst = f"mismatch at r={cfg.r}, p={theta.size}"
            return CheckOutcome("estimator equivalence (bitwise)", False, worst)
    return CheckOutcome("estimator equivalence (bitwise)", True, f"{count} instances, all bitwise equal")


def check_fd_agreement(seed=102, count=12, tol=1e-5) -> CheckOutcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = []
    for _ in range(count // 3):
        cases.append(random_quadratic(rng, max_dim=8, max_r=8))
        cases.append(random_counterexample(rng, max_dim=6, max_r=8, inside_interval=True)[:4])
        cases.append(random_fewshot(rng, max_r=6))
    for problem, task, theta, cfg in cases:

        def objective(t):
            return problem.outer_loss(rollout(problem, task, t, cfg, keep_states=False), task)

        numeric = fd_grad(objective, theta, FDConfig())
        analytic = exact_grad_stored(problem, task, theta, cfg).gradient
        rel = np.linalg.norm(numeric - analytic) / max(np.linalg.norm(analytic), 1e-12)
        worst = max(worst, rel)
    return CheckOutcome(
        "finite differences vs exact gradient",
        worst < tol,
        f"worst relative error {worst:.3e} (tol {tol:g})",
    )


def check_unbiasedness(seed=103, count=30, tol=1e-12) -> CheckOutcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(count):
        q = float(rng.uniform(0.05, 1.0))
        problem, task, theta, cfg = next(_instances(rng, 1))
        pairs = [(task, 1.0)]
        expected_ufo = enumerate_expected_grad(problem, pairs, theta, cfg, EstimatorKind.ufo(q))
        exact = enumerate_expected_grad(problem, pairs, theta, cfg, EstimatorKind.exact_stored())
        first = enumerate_expected_grad(problem, pairs, theta, cfg, EstimatorKind.fo())
        # Round-off in the coin average scales with the largest operand,
        # which can dwarf a strongly contracted exact gradient.
        scale = max(np.linalg.norm(exact), np.linalg.norm(first), 1e-300)
        worst = max(worst, np.linalg.norm(expected_ufo - exact) / scale)
    return CheckOutcome(
        "coin-enumerated unbiasedness",
        worst < tol,
        f"worst relative error {worst:.3e} (tol {tol:g})",
    )


def check_resource_laws(seed=104, calls=2000) -> CheckOutcome:
    rng = np.random.default_rng(seed)
    cfg = InnerLoopConfig(alpha=0.1, r=10)
    problem = QuadraticProblem()
    task = QuadraticTask(a=np.array([0.5, 1.5]), b=np.array([0.0, 0.3]))
    theta = np.array([1.0, -1.0])

    reports = []
    for kind, fn in (
        (EstimatorKind.fo(), fo_grad),
        (EstimatorKind.exact_stored(), exact_grad_stored),
        (EstimatorKind.exact_rerun(), exact_grad_rerun),
    ):
        ests = [fn(problem, task, theta, cfg) for _ in range(200)]
        reports.append(resource_report(ests, kind, cfg))
    kind = EstimatorKind.ufo(0.2)
    ests = [ufo_grad(problem, task, theta, cfg, 0.2, rng) for _ in range(calls)]
    reports.append(resource_report(ests, kind, cfg))

    failed = [c.name for rep in reports for c in rep.checks if not c.passed]
    return CheckOutcome(
        "resource laws",
        not failed,
        "all tallies in band" if not failed else f"failed: {', '.join(failed)}",
    )


def check_piecewise_regularity(seed=105, families=50, points=400) -> CheckOutcome:
    rng = np.random.default_rng(seed)
    worst_jump = 0.0
    bounds_ok = True
    for _ in range(families):
        a = float(rng.uniform(0.1, 3.0))
        b = float(rng.uniform(-3.0, 3.0))
        big_a = float(rng.uniform(0.5, 5.0))
        center = b / a
        for z0 in (big_a, big_a + 1.0):
            for side in (-1.0, 1.0):
                # Adjacent representable floats around the breakpoint: any
                # jump beyond slope * 2 ulp is a genuine discontinuity.
                x0 = center + side * z0
                x_lo = np.nextafter(x0, -np.inf)
                x_hi = np.nextafter(x0, np.inf)
                for fn in (piecewise_value, piecewise_grad, piecewise_hess):
                    jump = abs(fn(x_hi, a, b, big_a) - fn(x_lo, a, b, big_a))
                    worst_jump = max(worst_jump, jump)
        xs = center + rng.uniform(-big_a - 4.0, big_a + 4.0, points)
        grads = np.array([piecewise_grad(x, a, b, big_a) for x in xs])
        hesses = np.array([piecewise_hess(x, a, b, big_a) for x in xs])
        if np.any(np.abs(grads) > a * (0.5 + big_a) + 1e-12) or np.any(np.abs(hesses) > a + 1e-12):
            bounds_ok = False
    passed = worst_jump < 1e-9 and bounds_ok
    return CheckOutcome(
        "piecewise continuity and bounds",
        passed,
        f"worst breakpoint jump {worst_jump:.3e}, bounds {'ok' if bounds_ok else 'violated'}",
    )


def check_gap_identity(seed=106, count=25) -> CheckOutcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    inside = True
    for _ in range(count):
        *_, spec = random_counterexample(rng, max_dim=1)
        consts = counterexample_constants(spec)
        rel = abs(consts.gap**2 - 2.0 * spec.d_target) / (2.0 * spec.d_target)
        worst = max(worst, rel)
        inside = inside and consts.contains(consts.x_star) and consts.contains(consts.theta_star)
    return CheckOutcome(
        "fixed-point gap identity",
        worst < 1e-9 and inside,
        f"worst relative gap error {worst:.3e}; fixed points inside interval: {inside}",
    )


def run_all_checks() -> list:
    """Run every suite; deterministic given the built-in seeds."""
    return [
        check_estimator_equivalence(),
        check_fd_agreement(),
        check_unbiasedness(),
        check_resource_laws(),
        check_piecewise_regularity(),
        check_gap_identity(),
    ]
