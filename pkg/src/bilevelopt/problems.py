"""Analytic problem families with closed-form losses, gradients and HVPs.

Three families:

* diagonal quadratics (any dimension, per-coordinate curvature),
* the two-task piecewise family whose expected first-order dynamics have
  a fixed point that is not a stationary point of the true objective,
* a toy softmax-regression few-shot family (linear model, synthetic
  Gaussian class clusters).

The piecewise scalar math lives in :mod:`bilevelopt.kernels` so the same
compiled code backs both these problem classes and the fast experiment
engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    DegenerateProblem,
    DimensionMismatch,
    FiniteTaskDistribution,
)
from .kernels import piecewise_grad, piecewise_hess, piecewise_value

__all__ = [
    "CounterexampleConstants",
    "CounterexampleProblem",
    "CounterexampleSpec",
    "FewShotLogisticProblem",
    "FewShotLogisticTask",
    "FewShotTaskSampler",
    "PiecewiseTask",
    "QuadraticProblem",
    "QuadraticTask",
    "cce_loss",
    "counterexample_constants",
    "derive_b2",
    "make_counterexample",
    "piecewise_grad",
    "piecewise_hess",
    "piecewise_value",
    "softmax",
]


# ---------------------------------------------------------------------------
# Diagonal quadratics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticTask:
    """Diagonal quadratic with per-coordinate curvature ``a`` and offset ``b``.

    Inner and outer loss coincide: ``sum_d (a_d/2) * (phi_d - b_d/a_d)^2``.
    """

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64))
        if self.a.ndim != 1 or self.a.shape != self.b.shape:
            raise ValueError("a and b must be 1-D arrays of equal length")
        if not np.all(self.a > 0.0):
            raise ValueError("all curvatures a_d must be positive")


class QuadraticProblem:
    """Bilevel problem whose inner and outer losses are the same quadratic."""

    def param_dim(self, task: QuadraticTask) -> int:
        return task.a.size

    def inner_loss(self, phi, task):
        d = phi - task.b / task.a
        return float(0.5 * np.dot(task.a * d, d))

    outer_loss = inner_loss

    def inner_grad(self, phi, task):
        return task.a * phi - task.b

    outer_grad = inner_grad

    def inner_hvp(self, phi, task, vec):
        return task.a * vec


# ---------------------------------------------------------------------------
# Piecewise two-task family
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PiecewiseTask:
    """One piecewise loss acting on the first coordinate of ``phi``.

    ``a`` is the quadratic-core curvature, ``b/a`` the minimizer, and
    ``big_a`` the half-width of the quadratic core.
    """

    a: float
    b: float
    big_a: float

    def __post_init__(self):
        if not self.a > 0.0 or not self.big_a > 0.0:
            raise ValueError("a and big_a must be positive")


class CounterexampleProblem:
    """Piecewise losses of the divergence construction, in ``dim`` dimensions.

    The loss depends on the first coordinate only; gradients and HVPs are
    zero on the remaining coordinates.  Inner and outer loss coincide.
    """

    def __init__(self, dim: int = 1):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim

    def param_dim(self, task: PiecewiseTask) -> int:
        return self.dim

    def inner_loss(self, phi, task):
        return float(piecewise_value(phi[0], task.a, task.b, task.big_a))

    outer_loss = inner_loss

    def inner_grad(self, phi, task):
        grad = np.zeros_like(phi)
        grad[0] = piecewise_grad(phi[0], task.a, task.b, task.big_a)
        return grad

    outer_grad = inner_grad

    def inner_hvp(self, phi, task, vec):
        out = np.zeros_like(vec)
        out[0] = piecewise_hess(phi[0], task.a, task.b, task.big_a) * vec[0]
        return out


@dataclass(frozen=True)
class CounterexampleSpec:
    """Full parameterization of the two-task divergence construction.

    ``b2`` is not free: it must place the first-order fixed point at
    exact-gradient norm ``sqrt(2*D)``, which is validated at construction
    (relative tolerance 1e-9).  Use :func:`make_counterexample` or
    ``CounterexampleSpec.from_parameters`` to build a valid spec.
    """

    a1: float
    a2: float
    b1: float
    b2: float
    big_a: float
    d_target: float
    alpha: float
    r: int

    def __post_init__(self):
        if not (0.0 < self.a1 < 1.0 / self.alpha and 0.0 < self.a2 < 1.0 / self.alpha):
            raise ValueError("need 0 < a1, a2 < 1/alpha")
        if self.a1 == self.a2:
            raise DegenerateProblem("a1 == a2 collapses the construction")
        if self.b1 != 0.0:
            raise ValueError("b1 must be exactly 0")
        if not self.b2 > 0.0 or not self.d_target > 0.0:
            raise ValueError("b2 and the gap target must be positive")
        if not self.big_a > abs(self.b1 / self.a1 - self.b2 / self.a2):
            raise ValueError("big_a must exceed |b1/a1 - b2/a2|")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        gap = counterexample_constants(self).gap
        target = math.sqrt(2.0 * self.d_target)
        if abs(gap - target) > 1e-9 * target:
            raise ValueError(
                f"b2 does not satisfy the gap identity: gap={gap!r}, target={target!r}"
            )

    @classmethod
    def from_parameters(
        cls,
        a1: float,
        a2: float,
        alpha: float,
        r: int,
        d_target: float,
        big_a: float | None = None,
    ) -> "CounterexampleSpec":
        """Derive ``b2`` (and by default ``big_a``) from the free parameters.

        The default ``big_a = |b2/a2 - b1/a1| + 1`` keeps the cubic blend
        region comfortably clear of the quadratic core.
        """
        b2 = derive_b2(a1, a2, alpha, r, d_target)
        if big_a is None:
            big_a = abs(b2 / a2) + 1.0
        return cls(a1=a1, a2=a2, b1=0.0, b2=b2, big_a=big_a, d_target=d_target, alpha=alpha, r=r)

    @property
    def tasks(self) -> tuple:
        return (
            PiecewiseTask(a=self.a1, b=self.b1, big_a=self.big_a),
            PiecewiseTask(a=self.a2, b=self.b2, big_a=self.big_a),
        )

    def distribution(self) -> FiniteTaskDistribution:
        return FiniteTaskDistribution(self.tasks, (0.5, 0.5))

    def as_config(self) -> dict:
        """The flat key=value mapping the CLI consumes (free parameters only;
        ``b2`` and the default ``big_a`` are re-derived on load)."""
        return {
            "a1": repr(self.a1),
            "a2": repr(self.a2),
            "alpha": repr(self.alpha),
            "r": repr(self.r),
            "d_target": repr(self.d_target),
        }

    @classmethod
    def from_config(cls, mapping: dict) -> "CounterexampleSpec":
        return cls.from_parameters(
            a1=float(mapping["a1"]),
            a2=float(mapping["a2"]),
            alpha=float(mapping["alpha"]),
            r=int(mapping["r"]),
            d_target=float(mapping["d_target"]),
        )


@dataclass(frozen=True)
class CounterexampleConstants:
    """Closed-form constants of the two-task construction.

    ``(a_star, b_star)`` define the expected first-order update dynamics,
    whose fixed point is ``x_star``; ``(a_hat, b_hat)`` define the true
    expected gradient, which vanishes at ``theta_star``.  ``gap`` is the
    true-gradient magnitude left at ``x_star``, and ``interval`` is the
    segment where both losses are exactly quadratic.
    """

    a_star: float
    b_star: float
    x_star: float
    a_hat: float
    b_hat: float
    theta_star: float
    gap: float
    interval: tuple

    def contains(self, x: float) -> bool:
        lo, hi = self.interval
        return lo <= x <= hi


def _effective_constants(a1, b1, a2, b2, alpha, r):
    """Linear-dynamics coefficients; no validation (shared by identity tests)."""
    u1 = (1.0 - alpha * a1) ** r
    u2 = (1.0 - alpha * a2) ** r
    a_star = 0.5 * (a1 * u1 + a2 * u2)
    b_star = 0.5 * (b1 * u1 + b2 * u2)
    a_hat = 0.5 * (a1 * u1 * u1 + a2 * u2 * u2)
    b_hat = 0.5 * (b1 * u1 * u1 + b2 * u2 * u2)
    return a_star, b_star, a_hat, b_hat


def derive_b2(a1: float, a2: float, alpha: float, r: int, d_target: float) -> float:
    """Solve for the offset that pins the fixed-point gradient gap.

    Returns the unique ``b2 > 0`` with ``|a_hat * x_star - b_hat| =
    sqrt(2 * d_target)``.  Both sides of the identity are linear in
    ``b2``, giving the closed form implemented here; the weight on the
    ratio term is ``(1 - alpha*a2)^r``, the only choice under which the
    identity holds (verified against a root-finding oracle in the tests).
    """
    if a1 == a2:
        raise DegenerateProblem("a1 == a2: the defining denominator vanishes")
    if not d_target > 0.0:
        raise ValueError("the gap target must be positive")
    u1 = 1.0 - alpha * a1
    u2 = 1.0 - alpha * a2
    ratio = (a1 * u1 ** (2 * r) + a2 * u2 ** (2 * r)) / (a1 * u1**r + a2 * u2**r)
    denom = abs(ratio * u2**r - u2 ** (2 * r))
    if denom == 0.0:
        raise DegenerateProblem("defining denominator vanished")
    return 2.0 * math.sqrt(2.0 * d_target) / denom


def counterexample_constants(spec: CounterexampleSpec) -> CounterexampleConstants:
    """Evaluate the closed-form constants for ``spec``."""
    a_star, b_star, a_hat, b_hat = _effective_constants(
        spec.a1, spec.b1, spec.a2, spec.b2, spec.alpha, spec.r
    )
    x_star = b_star / a_star
    theta_star = b_hat / a_hat
    gap = abs(a_hat * x_star - b_hat)
    interval = (spec.b2 / spec.a2 - spec.big_a, spec.b1 / spec.a1 + spec.big_a)
    return CounterexampleConstants(
        a_star=a_star,
        b_star=b_star,
        x_star=x_star,
        a_hat=a_hat,
        b_hat=b_hat,
        theta_star=theta_star,
        gap=gap,
        interval=interval,
    )


def make_counterexample(
    a1: float = 0.5,
    a2: float = 1.5,
    alpha: float = 0.1,
    r: int = 10,
    d_target: float = 0.06,
    big_a: float | None = None,
    dim: int = 1,
):
    """Build (spec, problem, distribution) with the synthetic-run defaults."""
    spec = CounterexampleSpec.from_parameters(a1, a2, alpha, r, d_target, big_a)
    return spec, CounterexampleProblem(dim=dim), spec.distribution()


# ---------------------------------------------------------------------------
# Toy few-shot softmax regression
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def cce_loss(logits: np.ndarray, label: np.ndarray) -> float:
    """Categorical cross-entropy ``logsumexp(Z) - Z.Y`` for a one-hot ``Y``.

    The log-sum-exp is computed with max subtraction, so arbitrarily large
    logits stay finite.
    """
    logits = np.asarray(logits, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    _check_one_hot(label[None, :])
    m = float(np.max(logits))
    lse = m + math.log(float(np.sum(np.exp(logits - m))))
    return lse - float(np.dot(logits, label))


def _check_one_hot(labels: np.ndarray) -> None:
    ok = np.all(np.isin(labels, (0.0, 1.0))) and np.all(labels.sum(axis=1) == 1.0)
    if not ok:
        raise ValueError("labels must be exact one-hot rows")


@dataclass(frozen=True)
class FewShotLogisticTask:
    """One few-shot classification task for a linear softmax model.

    ``train`` drives the inner loss, ``test`` the outer loss.  Labels are
    exact one-hot rows; the model is ``W`` of shape (classes, features),
    flattened into a parameter vector of length ``classes * features``.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        for name in ("train_x", "train_y", "test_x", "test_y"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        s, n = self.train_x.shape
        t, n2 = self.test_x.shape
        m = self.train_y.shape[1]
        if s < 1 or t < 1:
            raise ValueError("need at least one train and one test example")
        if n2 != n or self.train_y.shape != (s, m) or self.test_y.shape != (t, m):
            raise ValueError("inconsistent dataset shapes")
        _check_one_hot(self.train_y)
        _check_one_hot(self.test_y)

    @property
    def num_classes(self) -> int:
        return self.train_y.shape[1]

    @property
    def num_features(self) -> int:
        return self.train_x.shape[1]


class FewShotLogisticProblem:
    """Linear softmax regression; analytic mean gradient and HVP per split."""

    def param_dim(self, task: FewShotLogisticTask) -> int:
        return task.num_classes * task.num_features

    def _weights(self, phi, task):
        m, n = task.num_classes, task.num_features
        if phi.shape != (m * n,):
            raise DimensionMismatch(f"phi has shape {phi.shape}, expected ({m * n},)")
        return phi.reshape(m, n)

    def _loss(self, phi, task, x, y):
        w = self._weights(phi, task)
        logits = x @ w.T
        shifted = logits - np.max(logits, axis=1, keepdims=True)
        lse = np.max(logits, axis=1) + np.log(np.sum(np.exp(shifted), axis=1))
        return float(np.mean(lse - np.sum(logits * y, axis=1)))

    def _grad(self, phi, task, x, y):
        w = self._weights(phi, task)
        delta = softmax(x @ w.T) - y
        return (delta.T @ x).ravel() / x.shape[0]

    def _hvp(self, phi, task, vec, x):
        w = self._weights(phi, task)
        v = vec.reshape(w.shape)
        s = softmax(x @ w.T)
        u = x @ v.T
        curved = s * u - s * np.sum(s * u, axis=1, keepdims=True)
        return (curved.T @ x).ravel() / x.shape[0]

    def inner_loss(self, phi, task):
        return self._loss(phi, task, task.train_x, task.train_y)

    def outer_loss(self, phi, task):
        return self._loss(phi, task, task.test_x, task.test_y)

    def inner_grad(self, phi, task):
        return self._grad(phi, task, task.train_x, task.train_y)

    def outer_grad(self, phi, task):
        return self._grad(phi, task, task.test_x, task.test_y)

    def inner_hvp(self, phi, task, vec):
        return self._hvp(phi, task, vec, task.train_x)


class FewShotTaskSampler:
    """Generative distribution of synthetic Gaussian-cluster tasks.

    Each task draws fresh class means from a standard normal scaled by
    ``spread``, then ``shots_per_class`` train and ``test_per_class`` test
    examples per class with isotropic noise ``noise``.
    """

    is_finite = False

    def __init__(
        self,
        num_features: int = 4,
        num_classes: int = 3,
        shots_per_class: int = 2,
        test_per_class: int = 1,
        spread: float = 2.0,
        noise: float = 0.5,
    ):
        if min(num_features, num_classes, shots_per_class, test_per_class) < 1:
            raise ValueError("all sampler sizes must be >= 1")
        self.num_features = num_features
        self.num_classes = num_classes
        self.shots_per_class = shots_per_class
        self.test_per_class = test_per_class
        self.spread = spread
        self.noise = noise

    def _split(self, rng, means, per_class):
        m, n = means.shape
        x = np.empty((m * per_class, n))
        y = np.zeros((m * per_class, m))
        row = 0
        for c in range(m):
            for _ in range(per_class):
                x[row] = means[c] + self.noise * rng.standard_normal(n)
                y[row, c] = 1.0
                row += 1
        return x, y

    def sample_one(self, rng: np.random.Generator) -> FewShotLogisticTask:
        means = self.spread * rng.standard_normal((self.num_classes, self.num_features))
        train_x, train_y = self._split(rng, means, self.shots_per_class)
        test_x, test_y = self._split(rng, means, self.test_per_class)
        return FewShotLogisticTask(train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y)

    def sample(self, count: int, rng: np.random.Generator) -> list:
        return [self.sample_one(rng) for _ in range(count)]
