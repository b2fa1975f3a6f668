"""Independent verification tools.

Nothing in this module reuses estimator internals: gradients are checked
by central finite differences, expectations by explicit enumeration over
finite task sets (with the correction coin enumerated for the unbiased
estimator), and distributions by Monte-Carlo standardized deviations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import InnerLoopConfig, NonFiniteEvaluation, ProbabilityMismatch
from .estimators import EstimatorKind, estimate, exact_grad_rerun, fo_grad

__all__ = [
    "FDConfig",
    "MCReport",
    "enumerate_expected_grad",
    "fd_grad",
    "fd_hvp",
    "mc_mean_test",
    "mc_stats",
]


@dataclass(frozen=True)
class FDConfig:
    """Central-difference settings.

    The per-coordinate step is ``base_h * max(1, |x|)``.  Only the central
    scheme is offered; its O(h^2) truncation error is what the library's
    1e-5 / 1e-6 agreement tolerances rely on.
    """

    base_h: float = 1e-5

    def __post_init__(self):
        if not self.base_h > 0.0:
            raise ValueError("base_h must be positive")


def _check_finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise NonFiniteEvaluation(f"{what} returned a non-finite value")
    return value


def fd_grad(scalar_fn: Callable, phi: np.ndarray, fd: FDConfig = FDConfig()) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``phi``, per coordinate."""
    phi = np.asarray(phi, dtype=np.float64)
    grad = np.empty_like(phi)
    for d in range(phi.size):
        h = fd.base_h * max(1.0, abs(phi[d]))
        hi = phi.copy()
        lo = phi.copy()
        hi[d] += h
        lo[d] -= h
        f_hi = _check_finite(scalar_fn(hi), "scalar_fn")
        f_lo = _check_finite(scalar_fn(lo), "scalar_fn")
        grad[d] = (f_hi - f_lo) / (2.0 * h)
    return grad


def fd_hvp(
    grad_fn: Callable,
    phi: np.ndarray,
    vec: np.ndarray,
    fd: FDConfig = FDConfig(),
) -> np.ndarray:
    """Central difference of ``grad_fn`` along direction ``vec``."""
    phi = np.asarray(phi, dtype=np.float64)
    vec = np.asarray(vec, dtype=np.float64)
    scale = float(np.max(np.abs(vec)))
    if scale == 0.0:
        return np.zeros_like(phi)
    h = fd.base_h / scale
    g_hi = _check_finite(np.asarray(grad_fn(phi + h * vec)), "grad_fn")
    g_lo = _check_finite(np.asarray(grad_fn(phi - h * vec)), "grad_fn")
    return (g_hi - g_lo) / (2.0 * h)


@dataclass
class MCReport:
    """Sample mean vs. a reference, standardized per coordinate."""

    mean: np.ndarray
    stderr: np.ndarray
    max_abs_z: float
    count: int


def mc_stats(samples: np.ndarray, reference: np.ndarray) -> MCReport:
    """Standardized deviations of a sample mean from ``reference``.

    Coordinates with zero sample spread get z = 0 when the mean matches
    the reference exactly and z = inf otherwise.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    reference = np.atleast_1d(np.asarray(reference, dtype=np.float64))
    n = samples.shape[0]
    mean = samples.mean(axis=0)
    stderr = samples.std(axis=0, ddof=1) / np.sqrt(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(mean - reference) / stderr
    z = np.where(stderr == 0.0, np.where(mean == reference, 0.0, np.inf), z)
    return MCReport(mean=mean, stderr=stderr, max_abs_z=float(z.max()), count=n)


def mc_mean_test(sampler: Callable, reference: np.ndarray, n: int) -> MCReport:
    """Draw ``n`` samples from ``sampler()`` and standardize against reference."""
    if n < 100:
        raise ValueError(f"need n >= 100 draws for a meaningful band, got {n}")
    first = np.atleast_1d(np.asarray(sampler(), dtype=np.float64))
    samples = np.empty((n, first.size))
    samples[0] = first
    for i in range(1, n):
        samples[i] = sampler()
    return mc_stats(samples, reference)


def enumerate_expected_grad(
    problem,
    tasks_with_probs,
    theta: np.ndarray,
    cfg: InnerLoopConfig,
    estimator: EstimatorKind,
) -> np.ndarray:
    """Exact expectation of an estimator over a finite task set.

    Probability-weighted average of the estimator's output over every
    task; for the unbiased estimator the correction coin is enumerated
    exactly with weights ``(1 - q, q)``, so no sampling error enters.
    Probabilities must sum to one within 1e-12.
    """
    pairs = list(tasks_with_probs.items() if hasattr(tasks_with_probs, "items") else tasks_with_probs)
    total_prob = sum(prob for _, prob in pairs)
    if abs(total_prob - 1.0) > 1e-12:
        raise ProbabilityMismatch(f"task probabilities sum to {total_prob}, not 1")

    theta = np.asarray(theta, dtype=np.float64)
    expected = np.zeros_like(theta)
    for task, prob in pairs:
        if estimator.name == "ufo":
            q = estimator.q
            base = fo_grad(problem, task, theta, cfg).gradient
            corr = exact_grad_rerun(problem, task, theta, cfg).gradient
            if q == 1.0:
                outcome = corr
            else:
                taken = base + (corr - base) / q
                outcome = (1.0 - q) * base + q * taken
            expected = expected + prob * outcome
        else:
            est = estimate(estimator, problem, task, theta, cfg)
            expected = expected + prob * est.gradient
    return expected
