"""Mini-batch outer gradient descent over tasks.

Each outer iteration draws ``v`` i.i.d. tasks, averages the chosen
estimator's gradients in fixed slot order, optionally clips the averaged
gradient entrywise, and applies the step.  All randomness comes from
position-addressed uniforms (see :mod:`bilevelopt.core`), so a recorded
seed replays the trajectory bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import (
    STREAM_CORRECTIONS,
    STREAM_SCRATCH,
    STREAM_TASKS,
    STREAM_THETA0,
    InnerLoopConfig,
    NonFiniteState,
    clip_entries,
    stream_uniforms,
    substream,
)
from .diagnostics import meta_grad_exact
from .estimators import EstimatorKind, estimate, exact_grad_stored

__all__ = [
    "RunConfig",
    "ScheduleReport",
    "StepSchedule",
    "Trajectory",
    "UniformThetaInit",
    "resolve_theta0",
    "run_minibatch_gd",
    "validate_schedule",
]


@dataclass(frozen=True)
class StepSchedule:
    """Outer step-size sequence ``gamma_k`` for ``k = 1, 2, ...``.

    Kinds: ``constant`` (gamma_k = param), ``harmonic`` (gamma_k =
    param / k), ``inverse_sqrt`` (gamma_k = k**-0.5).
    """

    kind: str
    param: float = 1.0

    _KINDS = ("constant", "harmonic", "inverse_sqrt")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {self._KINDS}")
        if not self.param > 0.0:
            raise ValueError("schedule parameter must be positive")

    @classmethod
    def constant(cls, gamma: float):
        return cls("constant", gamma)

    @classmethod
    def harmonic(cls, c: float):
        return cls("harmonic", c)

    @classmethod
    def inverse_sqrt(cls):
        return cls("inverse_sqrt")

    def gamma(self, k: int) -> float:
        if self.kind == "constant":
            return self.param
        if self.kind == "harmonic":
            return self.param / k
        return 1.0 / np.sqrt(float(k))

    @property
    def engine_code(self) -> int:
        return self._KINDS.index(self.kind)

    @classmethod
    def parse(cls, text: str) -> "StepSchedule":
        """Parse ``"constant:0.1"``, ``"harmonic:10"`` or ``"inverse_sqrt"``."""
        name, _, param = text.partition(":")
        name = name.strip()
        if name == "inverse_sqrt":
            return cls.inverse_sqrt()
        if not param:
            raise ValueError(f"schedule {name!r} needs a parameter, e.g. {name}:0.1")
        return cls(name, float(param))

    def label(self) -> str:
        if self.kind == "inverse_sqrt":
            return self.kind
        return f"{self.kind}:{self.param:g}"


@dataclass(frozen=True)
class ScheduleReport:
    """Analytic classification of a schedule's summability properties."""

    satisfies_step_conditions: bool  # divergent sum with vanishing steps
    square_summable: bool


def validate_schedule(schedule: StepSchedule) -> ScheduleReport:
    """Classify the schedule analytically (no numerical summation).

    A constant schedule neither vanishes nor is square-summable; the
    harmonic schedule satisfies both conditions; the inverse-square-root
    schedule has a divergent square sum.
    """
    if schedule.kind == "constant":
        return ScheduleReport(satisfies_step_conditions=False, square_summable=False)
    if schedule.kind == "harmonic":
        return ScheduleReport(satisfies_step_conditions=True, square_summable=True)
    return ScheduleReport(satisfies_step_conditions=True, square_summable=False)


@dataclass(frozen=True)
class UniformThetaInit:
    """Draw the starting point uniformly from ``[low, high]^dim``."""

    low: float
    high: float
    dim: int = 1

    def __post_init__(self):
        if not self.low < self.high or self.dim < 1:
            raise ValueError("need low < high and dim >= 1")


@dataclass
class RunConfig:
    """Everything one outer-loop run depends on.

    ``theta0`` is either a concrete vector or a ``UniformThetaInit`` spec
    resampled per seed.  ``tau = 0`` is allowed and produces a trajectory
    holding only the starting point.  Exact expected-gradient recording is
    automatic for finite task distributions; for generative distributions
    set ``mc_norm_every`` to record a Monte-Carlo estimate every N
    iterations.
    """

    tau: int
    v: int
    inner: InnerLoopConfig
    estimator: EstimatorKind
    schedule: StepSchedule
    seed: int
    theta0: Union[np.ndarray, UniformThetaInit]
    clip_bound: Union[float, None] = None
    mc_norm_every: Union[int, None] = None
    mc_norm_samples: int = 64

    def __post_init__(self):
        if self.tau < 0 or self.v < 1:
            raise ValueError(f"need tau >= 0 and v >= 1, got tau={self.tau}, v={self.v}")
        if self.clip_bound is not None and not self.clip_bound > 0.0:
            raise ValueError("clip_bound must be positive when given")


def resolve_theta0(cfg: RunConfig) -> np.ndarray:
    """The concrete starting vector for this run (seed-deterministic)."""
    if isinstance(cfg.theta0, UniformThetaInit):
        rng = substream(cfg.seed, STREAM_THETA0)
        return rng.uniform(cfg.theta0.low, cfg.theta0.high, size=cfg.theta0.dim)
    return np.asarray(cfg.theta0, dtype=np.float64).copy()


@dataclass
class Trajectory:
    """Recorded outer-loop run.

    ``thetas`` has ``tau + 1`` rows including the start; ``meta_grads``
    holds the exact (or Monte-Carlo) expected gradient at each recorded
    iterate and NaN rows elsewhere.  ``corrections[k-1]`` counts the
    correction coins taken in iteration ``k`` (-1 for non-stochastic
    estimators).  When a run aborts on a non-finite state, ``fail_iter``
    names the first bad iteration and rows from there on are unset.
    """

    config: RunConfig
    thetas: np.ndarray
    gammas: np.ndarray
    batch_grads: np.ndarray
    meta_grads: np.ndarray
    corrections: np.ndarray
    inner_grad_evals: np.ndarray
    outer_grad_evals: np.ndarray
    hvp_evals: np.ndarray
    fail_iter: Union[int, None] = None

    @property
    def failed(self) -> bool:
        return self.fail_iter is not None

    @property
    def num_recorded(self) -> int:
        """Number of valid iterate rows (tau + 1 on success)."""
        return self.fail_iter if self.failed else self.config.tau + 1

    @property
    def meta_grad_norms(self) -> np.ndarray:
        return np.linalg.norm(self.meta_grads, axis=1)


def _record_meta_grad(problem, dist, theta, cfg, k):
    # A diverging rollout inside the diagnostic leaves the row NaN instead
    # of aborting the run; only estimator/update divergence is fatal.
    try:
        if getattr(dist, "is_finite", False):
            return meta_grad_exact(problem, dist, theta, cfg.inner)
        if cfg.mc_norm_every and k % cfg.mc_norm_every == 0:
            rng = substream(cfg.seed, STREAM_SCRATCH, k)
            tasks = dist.sample(cfg.mc_norm_samples, rng)
            total = np.zeros_like(theta)
            for task in tasks:
                total = total + exact_grad_stored(problem, task, theta, cfg.inner).gradient
            return total / len(tasks)
    except NonFiniteState:
        return None
    return None


def run_minibatch_gd(problem, dist, cfg: RunConfig) -> Trajectory:
    """Run ``tau`` outer iterations of mini-batch GD with the chosen estimator.

    Fully deterministic given ``cfg.seed``: task picks, correction coins
    and the starting point all come from per-position substreams of that
    seed.  Batch gradients are summed in slot order ``w = 1..v``; clipping,
    when enabled, applies to the averaged batch gradient.
    """
    theta = resolve_theta0(cfg)
    p = theta.size
    tau, v = cfg.tau, cfg.v

    thetas = np.full((tau + 1, p), np.nan)
    gammas = np.full(tau, np.nan)
    batch_grads = np.full((tau, p), np.nan)
    meta_grads = np.full((tau + 1, p), np.nan)
    corrections = np.full(tau, -1, dtype=np.int64)
    inner_evals = np.zeros(tau, dtype=np.int64)
    outer_evals = np.zeros(tau, dtype=np.int64)
    hvp_evals = np.zeros(tau, dtype=np.int64)

    u_task = stream_uniforms(cfg.seed, STREAM_TASKS, (tau, v))
    u_corr = stream_uniforms(cfg.seed, STREAM_CORRECTIONS, (tau, v))

    traj = Trajectory(
        config=cfg,
        thetas=thetas,
        gammas=gammas,
        batch_grads=batch_grads,
        meta_grads=meta_grads,
        corrections=corrections,
        inner_grad_evals=inner_evals,
        outer_grad_evals=outer_evals,
        hvp_evals=hvp_evals,
    )

    thetas[0] = theta
    recorded = _record_meta_grad(problem, dist, theta, cfg, 0)
    if recorded is not None:
        meta_grads[0] = recorded

    is_ufo = cfg.estimator.is_stochastic
    for k in range(1, tau + 1):
        gamma = cfg.schedule.gamma(k)
        bsum = np.zeros(p)
        corr_count = 0 if is_ufo else -1
        try:
            for w in range(v):
                if getattr(dist, "is_finite", False):
                    task = dist.select(u_task[k - 1, w])
                else:
                    task = dist.sample_one(substream(cfg.seed, STREAM_TASKS, k, w))
                est = estimate(
                    cfg.estimator, problem, task, theta, cfg.inner,
                    xi_uniform=u_corr[k - 1, w],
                )
                bsum = bsum + est.gradient
                inner_evals[k - 1] += est.inner_grad_evals
                outer_evals[k - 1] += est.outer_grad_evals
                hvp_evals[k - 1] += est.hvp_evals
                if is_ufo and est.correction_taken:
                    corr_count += 1
        except NonFiniteState:
            traj.fail_iter = k
            return traj

        avg = bsum / v
        if cfg.clip_bound is not None:
            avg = clip_entries(avg, cfg.clip_bound)
        theta = theta - gamma * avg
        if not np.all(np.isfinite(theta)):
            traj.fail_iter = k
            return traj

        gammas[k - 1] = gamma
        batch_grads[k - 1] = avg
        corrections[k - 1] = corr_count
        thetas[k] = theta
        recorded = _record_meta_grad(problem, dist, theta, cfg, k)
        if recorded is not None:
            meta_grads[k] = recorded

    return traj
