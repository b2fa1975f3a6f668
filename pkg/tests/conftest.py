"""Shared test helpers: random problem instances and reference problems."""

import numpy as np
import pytest

from bilevelopt.checks import random_counterexample, random_fewshot, random_quadratic

__all__ = [
    "AffineInnerProblem",
    "AffineTask",
    "all_family_instances",
    "random_counterexample",
    "random_fewshot",
    "random_quadratic",
]


class AffineTask:
    """Payload for the affine-inner reference problem."""

    def __init__(self, slope, a, b):
        self.slope = np.asarray(slope, dtype=np.float64)
        self.a = np.asarray(a, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)


class AffineInnerProblem:
    """Inner loss affine in phi (identically zero Hessian), quadratic outer.

    With no curvature the chain rule's correction terms vanish, so every
    estimator must return exactly the first-order gradient.
    """

    def param_dim(self, task):
        return task.slope.size

    def inner_loss(self, phi, task):
        return float(np.dot(task.slope, phi))

    def inner_grad(self, phi, task):
        return task.slope.copy()

    def inner_hvp(self, phi, task, vec):
        return np.zeros_like(vec)

    def outer_loss(self, phi, task):
        d = phi - task.b / task.a
        return float(0.5 * np.dot(task.a * d, d))

    def outer_grad(self, phi, task):
        return task.a * phi - task.b


def all_family_instances(rng, count):
    """Yield (problem, task, theta, cfg) cycling through the three families."""
    for i in range(count):
        which = i % 3
        if which == 0:
            yield random_quadratic(rng)
        elif which == 1:
            yield random_counterexample(rng)[:4]
        else:
            yield random_fewshot(rng)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
