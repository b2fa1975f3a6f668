"""Fast experiment runner for the scalar analytic families.

The long outer-loop experiments (tens of thousands of iterations with an
exact expected-gradient evaluation per iterate) are dominated by scalar
inner loops, so this module runs them through numba kernels.  Every
kernel mirrors the generic implementation operation-for-operation: same
update expressions, same evaluation order, same uniform-stream
addressing.  A trajectory produced here is bitwise-identical to one from
:func:`bilevelopt.outer_loop.run_minibatch_gd` on the same config (the
test suite enforces this), and with ``BILEVELOPT_NO_NUMBA=1`` the same
Python source runs uncompiled as the fallback path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    STREAM_CORRECTIONS,
    STREAM_TASKS,
    stream_uniforms,
)
from .kernels import (
    FAMILY_PIECEWISE,
    FAMILY_QUADRATIC,
    jit_kernel,
    scalar_grad,
    scalar_hess,
)
from .outer_loop import RunConfig, Trajectory, resolve_theta0
from .problems import PiecewiseTask, QuadraticTask

__all__ = [
    "ENGINE_ESTIMATORS",
    "ScalarTaskFamily",
    "run_scalar_experiment",
    "supports",
    "ufo_sample_batch",
]

# Estimator codes understood by the run kernel.
_EST_FO = 0
_EST_EXACT_STORED = 1
_EST_EXACT_RERUN = 2
_EST_UFO = 3

ENGINE_ESTIMATORS = {
    "fo": _EST_FO,
    "exact_stored": _EST_EXACT_STORED,
    "exact_rerun": _EST_EXACT_RERUN,
    "ufo": _EST_UFO,
}


# ---------------------------------------------------------------------------
# Scalar estimator kernels (mirrors of estimators.py specialized to p = 1)
# ---------------------------------------------------------------------------


def _fo_scalar(x0, fam, a, b, big_a, alpha, r):
    x = x0
    for _ in range(r):
        x = x - alpha * scalar_grad(fam, x, a, b, big_a)
        if not np.isfinite(x):
            return 0.0, False
    return scalar_grad(fam, x, a, b, big_a), True


def _exact_scalar(x0, fam, a, b, big_a, alpha, r):
    arr = np.empty(r)
    x = x0
    for j in range(r):
        arr[j] = x
        x = x - alpha * scalar_grad(fam, x, a, b, big_a)
        if not np.isfinite(x):
            return 0.0, False
    grad = scalar_grad(fam, x, a, b, big_a)
    for j in range(r - 1, -1, -1):
        grad = grad - alpha * (scalar_hess(fam, arr[j], a, b, big_a) * grad)
    return grad, True


def _rerun_scalar(x0, fam, a, b, big_a, alpha, r):
    x = x0
    for _ in range(r):
        x = x - alpha * scalar_grad(fam, x, a, b, big_a)
        if not np.isfinite(x):
            return 0.0, False
    grad = scalar_grad(fam, x, a, b, big_a)
    for j1 in range(r, 0, -1):
        x = x0
        for _ in range(j1 - 1):
            x = x - alpha * scalar_grad(fam, x, a, b, big_a)
        if not np.isfinite(x):
            return 0.0, False
        grad = grad - alpha * (scalar_hess(fam, x, a, b, big_a) * grad)
    return grad, True


def _meta_grad_scalar(x, fams, avals, bvals, big_as, probs, alpha, r):
    total = 0.0
    for i in range(fams.size):
        grad, ok = _exact_scalar(x, fams[i], avals[i], bvals[i], big_as[i], alpha, r)
        if not ok:
            return 0.0, False
        total = total + probs[i] * grad
    return total, True


def _select_index(cum, u):
    idx = 0
    while idx < cum.size - 1 and u >= cum[idx]:
        idx += 1
    return idx


def _run_scalar(
    theta0,
    tau,
    v,
    alpha,
    r,
    sched_code,
    sched_param,
    est_code,
    q,
    clip_bound,
    fams,
    avals,
    bvals,
    big_as,
    probs,
    cum,
    u_task,
    u_corr,
    thetas,
    gammas,
    metag,
    batch,
    corr,
    inner_ev,
    outer_ev,
    hvp_ev,
):
    theta = theta0
    thetas[0] = theta
    mg, ok = _meta_grad_scalar(theta, fams, avals, bvals, big_as, probs, alpha, r)
    if ok:
        metag[0] = mg
    per_rerun = r + r * (r - 1) // 2
    for k in range(1, tau + 1):
        if sched_code == 0:
            gamma = sched_param
        elif sched_code == 1:
            gamma = sched_param / k
        else:
            gamma = 1.0 / math.sqrt(float(k))
        bsum = 0.0
        corr_count = 0 if est_code == _EST_UFO else -1
        inner_n = 0
        outer_n = 0
        hvp_n = 0
        for w in range(v):
            i = _select_index(cum, u_task[k - 1, w])
            fam, a, b, big_a = fams[i], avals[i], bvals[i], big_as[i]
            if est_code == _EST_FO:
                grad, ok = _fo_scalar(theta, fam, a, b, big_a, alpha, r)
                inner_n += r
                outer_n += 1
            elif est_code == _EST_EXACT_STORED:
                grad, ok = _exact_scalar(theta, fam, a, b, big_a, alpha, r)
                inner_n += r
                outer_n += 1
                hvp_n += r
            elif est_code == _EST_EXACT_RERUN:
                grad, ok = _rerun_scalar(theta, fam, a, b, big_a, alpha, r)
                inner_n += per_rerun
                outer_n += 1
                hvp_n += r
            else:
                grad, ok = _fo_scalar(theta, fam, a, b, big_a, alpha, r)
                inner_n += r
                outer_n += 1
                if ok and u_corr[k - 1, w] < q:
                    corr_grad, ok = _rerun_scalar(theta, fam, a, b, big_a, alpha, r)
                    inner_n += per_rerun
                    outer_n += 1
                    hvp_n += r
                    corr_count += 1
                    if ok:
                        if q == 1.0:
                            grad = corr_grad
                        else:
                            grad = grad + (corr_grad - grad) / q
            if not ok:
                return k
            bsum = bsum + grad
        avg = bsum / v
        if clip_bound > 0.0:
            if avg > clip_bound:
                avg = clip_bound
            elif avg < -clip_bound:
                avg = -clip_bound
        theta = theta - gamma * avg
        if not np.isfinite(theta):
            return k
        gammas[k - 1] = gamma
        batch[k - 1] = avg
        corr[k - 1] = corr_count
        inner_ev[k - 1] = inner_n
        outer_ev[k - 1] = outer_n
        hvp_ev[k - 1] = hvp_n
        thetas[k] = theta
        mg, ok = _meta_grad_scalar(theta, fams, avals, bvals, big_as, probs, alpha, r)
        if ok:
            metag[k] = mg
    return -1


_fo_scalar = jit_kernel(_fo_scalar)
_exact_scalar = jit_kernel(_exact_scalar)
_rerun_scalar = jit_kernel(_rerun_scalar)
_meta_grad_scalar = jit_kernel(_meta_grad_scalar)
_select_index = jit_kernel(_select_index)
_run_scalar = jit_kernel(_run_scalar)


# ---------------------------------------------------------------------------
# Python-level wrappers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarTaskFamily:
    """Array encoding of a finite set of one-dimensional analytic tasks."""

    families: np.ndarray
    a: np.ndarray
    b: np.ndarray
    big_a: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_tasks(cls, tasks, probs) -> "ScalarTaskFamily":
        fams, avals, bvals, big_as = [], [], [], []
        for task in tasks:
            if isinstance(task, PiecewiseTask):
                fams.append(FAMILY_PIECEWISE)
                avals.append(task.a)
                bvals.append(task.b)
                big_as.append(task.big_a)
            elif isinstance(task, QuadraticTask):
                if task.a.size != 1:
                    raise ValueError("the scalar engine handles 1-D quadratics only")
                fams.append(FAMILY_QUADRATIC)
                avals.append(float(task.a[0]))
                bvals.append(float(task.b[0]))
                big_as.append(0.0)
            else:
                raise TypeError(f"unsupported task type {type(task).__name__}")
        return cls(
            families=np.asarray(fams, dtype=np.int64),
            a=np.asarray(avals, dtype=np.float64),
            b=np.asarray(bvals, dtype=np.float64),
            big_a=np.asarray(big_as, dtype=np.float64),
            probs=np.asarray(probs, dtype=np.float64),
        )

    @classmethod
    def from_distribution(cls, dist) -> "ScalarTaskFamily":
        return cls.from_tasks(dist.tasks, dist.probs)

    @property
    def cum_probs(self) -> np.ndarray:
        return np.cumsum(self.probs)


def supports(cfg: RunConfig) -> bool:
    """Whether the engine can run this config (estimator kind and p = 1)."""
    return cfg.estimator.name in ENGINE_ESTIMATORS


def run_scalar_experiment(family: ScalarTaskFamily, cfg: RunConfig) -> Trajectory:
    """Engine twin of :func:`run_minibatch_gd` for scalar task families.

    Returns an ordinary :class:`Trajectory`; fields match the generic
    runner bitwise for the same config and seed.
    """
    if not supports(cfg):
        raise ValueError(f"engine does not support estimator {cfg.estimator.name!r}")
    theta0 = resolve_theta0(cfg)
    if theta0.shape != (1,):
        raise ValueError("the scalar engine requires a one-dimensional theta")

    tau, v = cfg.tau, cfg.v
    thetas = np.full(tau + 1, np.nan)
    gammas = np.full(tau, np.nan)
    metag = np.full(tau + 1, np.nan)
    batch = np.full(tau, np.nan)
    corr = np.full(tau, -1, dtype=np.int64)
    inner_ev = np.zeros(tau, dtype=np.int64)
    outer_ev = np.zeros(tau, dtype=np.int64)
    hvp_ev = np.zeros(tau, dtype=np.int64)

    u_task = stream_uniforms(cfg.seed, STREAM_TASKS, (tau, v))
    u_corr = stream_uniforms(cfg.seed, STREAM_CORRECTIONS, (tau, v))

    fail = _run_scalar(
        float(theta0[0]),
        tau,
        v,
        cfg.inner.alpha,
        cfg.inner.r,
        cfg.schedule.engine_code,
        cfg.schedule.param,
        ENGINE_ESTIMATORS[cfg.estimator.name],
        cfg.estimator.q if cfg.estimator.q is not None else 1.0,
        cfg.clip_bound if cfg.clip_bound is not None else -1.0,
        family.families,
        family.a,
        family.b,
        family.big_a,
        family.probs,
        family.cum_probs,
        u_task,
        u_corr,
        thetas,
        gammas,
        metag,
        batch,
        corr,
        inner_ev,
        outer_ev,
        hvp_ev,
    )

    return Trajectory(
        config=cfg,
        thetas=thetas[:, None],
        gammas=gammas,
        batch_grads=batch[:, None],
        meta_grads=metag[:, None],
        corrections=corr,
        inner_grad_evals=inner_ev,
        outer_grad_evals=outer_ev,
        hvp_evals=hvp_ev,
        fail_iter=None if fail < 0 else int(fail),
    )


def ufo_sample_batch(
    family: ScalarTaskFamily,
    task_index: int,
    theta: float,
    alpha: float,
    r: int,
    q: float,
    uniforms: np.ndarray,
) -> np.ndarray:
    """Draws of the unbiased estimator at a fixed (theta, task).

    Because both component gradients are deterministic, each draw is the
    first-order value or its importance-weighted correction depending on
    the uniform; the outputs equal what repeated generic calls fed the
    same uniforms would return.
    """
    i = task_index
    fam, a, b, big_a = family.families[i], family.a[i], family.b[i], family.big_a[i]
    base, ok_b = _fo_scalar(theta, fam, a, b, big_a, alpha, r)
    corr, ok_c = _rerun_scalar(theta, fam, a, b, big_a, alpha, r)
    if not (ok_b and ok_c):
        raise ValueError("non-finite rollout at the sampling point")
    corrected = corr if q == 1.0 else base + (corr - base) / q
    return np.where(np.asarray(uniforms) < q, corrected, base)
