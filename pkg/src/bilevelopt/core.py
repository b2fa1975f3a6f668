"""Foundational types and operations shared by every other module.

Contents: parameter-vector helpers, the bilevel problem interface, the
inner gradient-descent rollout, entrywise clipping, task distributions,
and the seeded RNG scheme used for reproducible experiments.

All arithmetic is 64-bit IEEE.  Operations here never hide non-finite
values behind tolerances: the rollout checks every iterate and raises
``NonFiniteState`` at the first bad step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence, Union, runtime_checkable

import numpy as np

__all__ = [
    "BilevelProblem",
    "DegenerateProblem",
    "DimensionMismatch",
    "EmptyDistribution",
    "FiniteTaskDistribution",
    "GradientEstimate",
    "InnerLoopConfig",
    "InvalidCheckpointCount",
    "NonFiniteEvaluation",
    "NonFiniteState",
    "ProbabilityMismatch",
    "ScheduleMismatch",
    "StateTrajectory",
    "as_param_vector",
    "clip_entries",
    "rollout",
    "sample_tasks",
    "stream_uniforms",
    "substream",
]


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class NonFiniteState(RuntimeError):
    """An inner-GD iterate developed a NaN/Inf entry (divergent rollout)."""


class NonFiniteEvaluation(RuntimeError):
    """A function evaluation required by an oracle returned NaN/Inf."""


class EmptyDistribution(ValueError):
    """A task distribution with no tasks cannot be sampled."""


class DegenerateProblem(ValueError):
    """Problem parameters collapse a required denominator to zero."""


class DimensionMismatch(ValueError):
    """A parameter vector does not match the problem's dimension."""


class InvalidCheckpointCount(ValueError):
    """Checkpoint count outside ``1 <= num_checkpoints <= r``."""


class ProbabilityMismatch(ValueError):
    """Task probabilities do not sum to one within 1e-12."""


class ScheduleMismatch(ValueError):
    """A diagnostic was asked to analyse an unsupported step schedule."""


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------


def as_param_vector(values) -> np.ndarray:
    """Coerce ``values`` to a fresh, finite, 1-D float64 array of length >= 1.

    Raises ``NonFiniteState`` on NaN/Inf entries and ``ValueError`` on an
    empty or non-1-D input.
    """
    vec = np.array(values, dtype=np.float64, copy=True)
    if vec.ndim != 1 or vec.size < 1:
        raise ValueError(f"parameter vector must be 1-D and non-empty, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise NonFiniteState("parameter vector contains NaN/Inf entries")
    return vec


def clip_entries(vec: np.ndarray, bound: float) -> np.ndarray:
    """Clip every entry of ``vec`` into ``[-bound, bound]``.

    ``bound`` must be strictly positive.  Idempotent: clipping twice with
    the same bound is a no-op.
    """
    if not bound > 0.0:
        raise ValueError(f"clip bound must be positive, got {bound}")
    return np.clip(vec, -bound, bound)


# ---------------------------------------------------------------------------
# Configuration and result types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InnerLoopConfig:
    """Inner gradient-descent settings: step size ``alpha`` and length ``r``.

    ``alpha`` must be strictly positive and ``r`` at least 1; a zero-length
    inner loop is rejected rather than given an arbitrary meaning.
    """

    alpha: float
    r: int

    def __post_init__(self):
        if not self.alpha > 0.0 or not math.isfinite(self.alpha):
            raise ValueError(f"alpha must be a positive finite real, got {self.alpha}")
        if not isinstance(self.r, int) or self.r < 1:
            raise ValueError(f"r must be an integer >= 1, got {self.r!r}")


@dataclass
class GradientEstimate:
    """Estimator output plus exact resource tallies.

    The eval counts tally the interface calls (inner gradient, outer
    gradient, Hessian-vector product) actually made while producing
    ``gradient``.  ``peak_cached_states`` counts the peak number of
    parameter-sized vectors the estimator retained at once; the stored
    exact estimator counts its state array exactly, the constant-memory
    estimators report their fixed register count.  ``correction_taken``
    is set (to the Bernoulli draw) only by the unbiased estimator.
    """

    gradient: np.ndarray
    inner_grad_evals: int = 0
    outer_grad_evals: int = 0
    hvp_evals: int = 0
    peak_cached_states: int = 0
    correction_taken: Union[bool, None] = None


@dataclass
class StateTrajectory:
    """The full inner-GD iterate sequence ``[phi_0, ..., phi_r]``."""

    states: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


# ---------------------------------------------------------------------------
# Problem interface
# ---------------------------------------------------------------------------


@runtime_checkable
class BilevelProblem(Protocol):
    """Behavioral contract every problem family implements.

    All five evaluations are deterministic pure functions of their
    arguments; ``inner_hvp`` must be linear and symmetric in the usual
    bilinear-form sense (checked by the regularity test suite).
    """

    def param_dim(self, task) -> int: ...

    def inner_loss(self, phi: np.ndarray, task) -> float: ...

    def outer_loss(self, phi: np.ndarray, task) -> float: ...

    def inner_grad(self, phi: np.ndarray, task) -> np.ndarray: ...

    def outer_grad(self, phi: np.ndarray, task) -> np.ndarray: ...

    def inner_hvp(self, phi: np.ndarray, task, vec: np.ndarray) -> np.ndarray: ...


def _check_dim(problem: BilevelProblem, task, theta: np.ndarray) -> None:
    dim = problem.param_dim(task)
    if theta.shape != (dim,):
        raise DimensionMismatch(
            f"theta has shape {theta.shape}, problem expects ({dim},)"
        )


def rollout(
    problem: BilevelProblem,
    task,
    theta: np.ndarray,
    cfg: InnerLoopConfig,
    keep_states: bool = False,
):
    """Run the r-step inner gradient descent from ``theta``.

    Returns a ``StateTrajectory`` of all ``r + 1`` states when
    ``keep_states`` is true, otherwise just the final state array.  The
    update is applied in fixed left-to-right order so that the stored and
    recomputed backward passes see bitwise-identical states.  Raises
    ``NonFiniteState`` as soon as any iterate develops a NaN/Inf entry.
    """
    _check_dim(problem, task, theta)
    phi = theta
    states = [phi] if keep_states else None
    for step in range(cfg.r):
        phi = phi - cfg.alpha * problem.inner_grad(phi, task)
        if not np.all(np.isfinite(phi)):
            raise NonFiniteState(f"non-finite inner state after step {step + 1}")
        if keep_states:
            states.append(phi)
    if keep_states:
        return StateTrajectory(states=states)
    return phi


# ---------------------------------------------------------------------------
# Task distributions
# ---------------------------------------------------------------------------


class FiniteTaskDistribution:
    """A finite set of tasks with explicit probabilities.

    Probabilities must sum to one within 1e-12.  Sampling maps a uniform
    draw through the cumulative distribution, so equal uniforms always
    select equal tasks regardless of how the draw was produced.
    """

    def __init__(self, tasks: Sequence, probs: Sequence[float] | None = None):
        self.tasks = tuple(tasks)
        if not self.tasks:
            raise EmptyDistribution("task distribution has no tasks")
        if probs is None:
            probs = np.full(len(self.tasks), 1.0 / len(self.tasks))
        self.probs = np.asarray(probs, dtype=np.float64)
        if self.probs.shape != (len(self.tasks),) or np.any(self.probs < 0.0):
            raise ProbabilityMismatch("probabilities must be non-negative, one per task")
        if abs(float(self.probs.sum()) - 1.0) > 1e-12:
            raise ProbabilityMismatch(f"probabilities sum to {self.probs.sum()}, not 1")
        self._cum = np.cumsum(self.probs)

    is_finite = True

    def __len__(self) -> int:
        return len(self.tasks)

    def items(self):
        """Iterate ``(task, probability)`` pairs in fixed order."""
        return zip(self.tasks, self.probs)

    def select(self, u: float):
        """Map a uniform ``u`` in [0, 1) to a task via the cumulative probs."""
        idx = int(np.searchsorted(self._cum, u, side="right"))
        return self.tasks[min(idx, len(self.tasks) - 1)]

    def sample_one(self, rng: np.random.Generator):
        return self.select(rng.random())

    def sample(self, count: int, rng: np.random.Generator) -> list:
        return [self.select(u) for u in rng.random(count)]


def sample_tasks(dist, count: int, rng: np.random.Generator) -> list:
    """Draw ``count`` i.i.d. tasks from ``dist`` using the given stream.

    Deterministic given the stream state; raises ``EmptyDistribution``
    when the distribution has no tasks and ``ValueError`` for count < 1.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if getattr(dist, "is_finite", False) and len(dist) == 0:
        raise EmptyDistribution("task distribution has no tasks")
    return dist.sample(count, rng)


# ---------------------------------------------------------------------------
# Seeded RNG streams
# ---------------------------------------------------------------------------

# Stream labels keep the independent consumers of one experiment seed from
# colliding: task selection, correction coin flips, and theta0 draws each
# get their own counter-based (Philox) stream.
STREAM_TASKS = 0
STREAM_CORRECTIONS = 1
STREAM_THETA0 = 2
STREAM_SCRATCH = 3


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for ``(seed, path...)``.

    Built on Philox keyed through ``SeedSequence`` spawn keys, so distinct
    paths give statistically independent streams and the same path always
    reproduces the same stream, regardless of evaluation order elsewhere.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=path)))


def stream_uniforms(seed: int, stream: int, shape) -> np.ndarray:
    """Pre-draw a uniform array addressed by position.

    The outer loop indexes entry ``(k-1, w-1)`` for iteration ``k`` and
    batch slot ``w``; because each consumer owns its cell, results do not
    depend on batch scheduling.
    """
    return substream(seed, stream).random(shape)
