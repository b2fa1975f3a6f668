"""Closed-form bound calculators, exact expected gradients and law checks.

The bound calculators take regularity constants (gradient bound ``l1``,
curvature bound ``l2``, Hessian Lipschitz constant ``l3``) and evaluate
the smoothness/variance constants that govern outer-loop convergence.
``rate_check`` reads a recorded trajectory against the ``o(k^{-0.5+eps})``
rate that the inverse-square-root schedule guarantees, and
``resource_report`` audits estimator tallies against their complexity
laws.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .core import InnerLoopConfig, ProbabilityMismatch, ScheduleMismatch
from .estimators import EstimatorKind, default_checkpoint_count, exact_grad_stored

__all__ = [
    "RateReport",
    "RegularityConstants",
    "ResourceReport",
    "grad_sq_bound",
    "lipschitz_bound",
    "meta_grad_exact",
    "rate_check",
    "resource_report",
    "sgd_constant",
]


@dataclass(frozen=True)
class RegularityConstants:
    """Uniform regularity bounds plus the run parameters they combine with.

    ``l1`` bounds the outer gradient norm, ``l2`` both Hessian norms, and
    ``l3`` the inner Hessian's Lipschitz constant.  ``alpha`` and ``l3``
    may be zero here: the calculators are pure formulas and their boundary
    limits are useful sanity checks.
    """

    l1: float
    l2: float
    l3: float
    alpha: float
    r: int
    q: float = 1.0
    v: int = 1

    def __post_init__(self):
        if self.l1 <= 0.0 or self.l2 <= 0.0 or self.l3 < 0.0:
            raise ValueError("need l1, l2 > 0 and l3 >= 0")
        if self.alpha < 0.0 or self.r < 1 or not 0.0 < self.q <= 1.0 or self.v < 1:
            raise ValueError("need alpha >= 0, r >= 1, 0 < q <= 1, v >= 1")


def meta_grad_exact(problem, finite_dist, theta, cfg: InnerLoopConfig) -> np.ndarray:
    """Exact expected gradient over a finite task distribution.

    Probability-weighted average of the exact per-task gradient, summed in
    task order; requires probabilities summing to one within 1e-12.
    """
    probs = np.asarray(finite_dist.probs, dtype=np.float64)
    if abs(float(probs.sum()) - 1.0) > 1e-12:
        raise ProbabilityMismatch(f"probabilities sum to {probs.sum()}, not 1")
    total = np.zeros_like(np.asarray(theta, dtype=np.float64))
    for task, prob in finite_dist.items():
        total = total + prob * exact_grad_stored(problem, task, theta, cfg).gradient
    return total


def lipschitz_bound(c: RegularityConstants) -> float:
    """Smoothness constant of the expected outer objective's gradient."""
    growth = (1.0 + c.alpha * c.l2) ** (2 * c.r)
    return c.l2 * growth + (c.l1 * c.l3 / c.l2) * (growth - 1.0)


def grad_sq_bound(c: RegularityConstants) -> float:
    """Upper bound on the expected squared norm of the unbiased estimate."""
    growth = (1.0 + c.alpha * c.l2) ** c.r
    return (1.0 + (growth - 1.0) / c.q) ** 2 * c.l1**2


def sgd_constant(c: RegularityConstants) -> float:
    """The constant multiplying ``sum gamma_k^2`` in the descent inequality."""
    growth = (1.0 + c.alpha * c.l2) ** c.r
    single = (1.0 + (growth - 1.0) / c.q) ** 2
    batch = (c.v - 1) * growth**2
    return (single + batch) * c.l1**2 / (2.0 * c.v) * lipschitz_bound(c)


@dataclass
class RateReport:
    """Finite-horizon reading of the ``o(k^{-0.5+eps})`` rate claim.

    ``consistent`` means the scaled min-so-far series does not grow from
    its head window to its tail window.  A finite run can only falsify an
    asymptotic claim, never confirm it; ``consistent`` says "not
    falsified here".
    """

    consistent: bool
    eps: float
    split_index: int
    head_max: float
    tail_max: float
    min_so_far: np.ndarray
    scaled: np.ndarray


def rate_check(
    traj_or_schedule,
    exact_norms: Union[Sequence[float], None] = None,
    eps: float = 0.1,
    head_fraction: float = 0.1,
) -> RateReport:
    """Check min-so-far squared gradient norms against the k^(0.5-eps) scale.

    Accepts either a recorded trajectory (its schedule and recorded
    expected-gradient norms are used) or a schedule plus an explicit norm
    series.  Only the inverse-square-root schedule carries this rate;
    anything else raises ``ScheduleMismatch``.
    """
    schedule = getattr(traj_or_schedule, "config", traj_or_schedule)
    schedule = getattr(schedule, "schedule", schedule)
    if schedule.kind != "inverse_sqrt":
        raise ScheduleMismatch(f"rate guarantee needs the inverse_sqrt schedule, got {schedule.kind}")
    if exact_norms is None:
        exact_norms = traj_or_schedule.meta_grad_norms
    norms = np.asarray(exact_norms, dtype=np.float64)
    if norms.ndim != 1 or norms.size < 2 or np.any(np.isnan(norms)):
        raise ValueError("need a 1-D series of at least two recorded norms")

    min_so_far = np.minimum.accumulate(norms**2)
    k = np.arange(1, norms.size + 1, dtype=np.float64)
    scaled = min_so_far * k ** (0.5 - eps)
    split = max(1, int(norms.size * head_fraction))
    head_max = float(scaled[:split].max())
    tail_max = float(scaled[split:].max())
    return RateReport(
        consistent=tail_max <= head_max,
        eps=eps,
        split_index=split,
        head_max=head_max,
        tail_max=tail_max,
        min_so_far=min_so_far,
        scaled=scaled,
    )


@dataclass
class ResourceCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class ResourceReport:
    """Aggregated tallies with per-law pass/fail checks."""

    kind: EstimatorKind
    count: int
    mean_inner_grad_evals: float
    mean_outer_grad_evals: float
    mean_hvp_evals: float
    max_peak_cached_states: int
    correction_rate: Union[float, None]
    checks: list

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


def resource_report(estimates, kind: EstimatorKind, cfg: InnerLoopConfig) -> ResourceReport:
    """Audit a batch of estimates against the resource laws of their kind.

    Stored exact: peak cached states equals ``r`` exactly.  First-order
    and rerun exact: peak at most 3; rerun additionally costs exactly
    ``r + r*(r-1)/2`` inner gradients per call.  Checkpointed: peak within
    ``m + ceil(r/m)`` and inner gradients at most doubled.  Unbiased: the
    correction frequency must sit in a 3-sigma binomial band around ``q``,
    and the mean inner-gradient count in the matching band around its
    expectation ``r + q*(r + r*(r-1)/2)`` (the correction pass reruns its
    own forward rollout).
    """
    ests = list(estimates)
    if not ests:
        raise ValueError("need at least one estimate")
    n = len(ests)
    r = cfg.r
    inner = np.array([e.inner_grad_evals for e in ests], dtype=np.float64)
    outer = np.array([e.outer_grad_evals for e in ests], dtype=np.float64)
    hvps = np.array([e.hvp_evals for e in ests], dtype=np.float64)
    peaks = np.array([e.peak_cached_states for e in ests], dtype=np.int64)

    checks = []
    correction_rate = None

    def add(name, passed, detail):
        checks.append(ResourceCheck(name=name, passed=bool(passed), detail=detail))

    if kind.name == "exact_stored":
        add("peak_cached_states == r", np.all(peaks == r), f"peaks in [{peaks.min()}, {peaks.max()}], r={r}")
        add("inner_grad_evals == r", np.all(inner == r), f"mean {inner.mean():.3f}")
        add("hvp_evals == r", np.all(hvps == r), f"mean {hvps.mean():.3f}")
    elif kind.name == "fo":
        add("peak_cached_states <= 3", np.all(peaks <= 3), f"max {peaks.max()}")
        add("hvp_evals == 0", np.all(hvps == 0), f"max {hvps.max():.0f}")
        add("inner_grad_evals == r", np.all(inner == r), f"mean {inner.mean():.3f}")
    elif kind.name == "exact_rerun":
        expected = r + r * (r - 1) // 2
        add("peak_cached_states <= 3", np.all(peaks <= 3), f"max {peaks.max()}")
        add(
            "inner_grad_evals == r + r(r-1)/2",
            np.all(inner == expected),
            f"expected {expected}, mean {inner.mean():.3f}",
        )
    elif kind.name == "exact_checkpointed":
        m = kind.num_checkpoints or default_checkpoint_count(r)
        bound = m + -(-r // m)
        add("peak_cached_states <= m + ceil(r/m)", np.all(peaks <= bound), f"max {peaks.max()}, bound {bound}")
        add("inner_grad_evals <= 2r", np.all(inner <= 2 * r), f"max {inner.max():.0f}")
    else:  # ufo
        q = kind.q
        taken = np.array([bool(e.correction_taken) for e in ests], dtype=np.float64)
        correction_rate = float(taken.mean())
        sigma = np.sqrt(q * (1.0 - q) / n)
        lo, hi = q - 3.0 * sigma, q + 3.0 * sigma
        add(
            "correction frequency within 3-sigma of q",
            lo <= correction_rate <= hi,
            f"rate {correction_rate:.4f} vs [{lo:.4f}, {hi:.4f}]",
        )
        per_corr = r + r * (r - 1) / 2.0
        expected_mean = r + q * per_corr
        mean_sigma = per_corr * np.sqrt(q * (1.0 - q)) / np.sqrt(n)
        add(
            "mean inner_grad_evals within 3-sigma of expectation",
            abs(inner.mean() - expected_mean) <= 3.0 * mean_sigma,
            f"mean {inner.mean():.3f} vs {expected_mean:.3f} +- {3 * mean_sigma:.3f}",
        )
        add("peak_cached_states <= 3", np.all(peaks <= 3), f"max {peaks.max()}")

    return ResourceReport(
        kind=kind,
        count=n,
        mean_inner_grad_evals=float(inner.mean()),
        mean_outer_grad_evals=float(outer.mean()),
        mean_hvp_evals=float(hvps.mean()),
        max_peak_cached_states=int(peaks.max()),
        correction_rate=correction_rate,
        checks=checks,
    )
