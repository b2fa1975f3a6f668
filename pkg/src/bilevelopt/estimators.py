"""Gradient estimators for the bilevel objective.

Five estimators, all returning a :class:`~bilevelopt.core.GradientEstimate`
with exact interface-call tallies:

* ``fo_grad``: first-order: outer gradient at the rolled-out state, all
  second-order terms dropped; constant memory.
* ``exact_grad_stored``: full chain rule through the rollout, storing all
  inner states for the backward HVP sweep; memory linear in ``r``.
* ``exact_grad_rerun``: same gradient, but each backward state is
  recomputed from scratch; constant memory, quadratic time.
* ``exact_grad_checkpointed``: same gradient via evenly spaced
  checkpoints and segment replay; memory ~ ``sqrt(r)`` at the default
  checkpoint count.
* ``ufo_grad``: the first-order gradient plus a Bernoulli(q)-gated,
  importance-weighted exact correction, making the estimate unbiased.

The three exact variants produce bitwise-identical gradients on
deterministic problems because they apply the same operations to the
same states in the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import (
    BilevelProblem,
    GradientEstimate,
    InnerLoopConfig,
    InvalidCheckpointCount,
    NonFiniteState,
    rollout,
)

__all__ = [
    "EstimatorKind",
    "estimate",
    "exact_grad_checkpointed",
    "exact_grad_rerun",
    "exact_grad_stored",
    "fo_grad",
    "ufo_grad",
]


@dataclass(frozen=True)
class EstimatorKind:
    """Identifier for one estimator, with its estimator-specific knobs."""

    name: str
    q: Union[float, None] = None
    num_checkpoints: Union[int, None] = None

    _NAMES = ("fo", "exact_stored", "exact_rerun", "exact_checkpointed", "ufo")

    def __post_init__(self):
        if self.name not in self._NAMES:
            raise ValueError(f"unknown estimator {self.name!r}; expected one of {self._NAMES}")
        if self.name == "ufo":
            if self.q is None or not 0.0 < self.q <= 1.0:
                raise ValueError(f"ufo requires 0 < q <= 1, got {self.q}")
        elif self.q is not None:
            raise ValueError(f"q is only meaningful for ufo, got q={self.q} for {self.name}")

    @classmethod
    def fo(cls):
        return cls("fo")

    @classmethod
    def exact_stored(cls):
        return cls("exact_stored")

    @classmethod
    def exact_rerun(cls):
        return cls("exact_rerun")

    @classmethod
    def exact_checkpointed(cls, num_checkpoints: Union[int, None] = None):
        return cls("exact_checkpointed", num_checkpoints=num_checkpoints)

    @classmethod
    def ufo(cls, q: float):
        return cls("ufo", q=q)

    @property
    def is_stochastic(self) -> bool:
        return self.name == "ufo"

    def label(self) -> str:
        if self.name == "ufo":
            return f"ufo(q={self.q:g})"
        return self.name


class _Tally:
    """Counting proxy: forwards evaluations, tallying every interface call."""

    __slots__ = ("problem", "inner_grads", "outer_grads", "hvps")

    def __init__(self, problem: BilevelProblem):
        self.problem = problem
        self.inner_grads = 0
        self.outer_grads = 0
        self.hvps = 0

    def param_dim(self, task):
        return self.problem.param_dim(task)

    def inner_grad(self, phi, task):
        self.inner_grads += 1
        return self.problem.inner_grad(phi, task)

    def outer_grad(self, phi, task):
        self.outer_grads += 1
        return self.problem.outer_grad(phi, task)

    def inner_hvp(self, phi, task, vec):
        self.hvps += 1
        return self.problem.inner_hvp(phi, task, vec)


def fo_grad(problem, task, theta, cfg: InnerLoopConfig) -> GradientEstimate:
    """First-order estimate: outer gradient at the final rollout state."""
    tally = _Tally(problem)
    phi = rollout(tally, task, theta, cfg, keep_states=False)
    grad = tally.outer_grad(phi, task)
    return GradientEstimate(
        gradient=grad,
        inner_grad_evals=tally.inner_grads,
        outer_grad_evals=tally.outer_grads,
        hvp_evals=tally.hvps,
        peak_cached_states=2,  # working state + returned gradient
    )


def _backward(tally, task, cfg, states_rev, b):
    """Apply the chain-rule HVP sweep over ``states_rev`` (later states first)."""
    for phi in states_rev:
        b = b - cfg.alpha * tally.inner_hvp(phi, task, b)
    return b


def exact_grad_stored(problem, task, theta, cfg: InnerLoopConfig) -> GradientEstimate:
    """Exact gradient with all inner states stored for the backward sweep."""
    tally = _Tally(problem)
    traj = rollout(tally, task, theta, cfg, keep_states=True)
    b = tally.outer_grad(traj.final, task)
    # The backward pass revisits phi_{r-1} ... phi_0.
    b = _backward(tally, task, cfg, traj.states[cfg.r - 1 :: -1], b)
    return GradientEstimate(
        gradient=b,
        inner_grad_evals=tally.inner_grads,
        outer_grad_evals=tally.outer_grads,
        hvp_evals=tally.hvps,
        peak_cached_states=cfg.r,  # the revisited state array; registers are O(1)
    )


def exact_grad_rerun(problem, task, theta, cfg: InnerLoopConfig) -> GradientEstimate:
    """Exact gradient recomputing each backward state from scratch.

    Bitwise-equal to :func:`exact_grad_stored` on deterministic problems;
    costs ``r + r*(r-1)/2`` inner-gradient evaluations in exchange for
    constant memory.
    """
    tally = _Tally(problem)
    phi = rollout(tally, task, theta, cfg, keep_states=False)
    b = tally.outer_grad(phi, task)
    for j1 in range(cfg.r, 0, -1):
        phi = theta
        for _ in range(j1 - 1):
            phi = phi - cfg.alpha * tally.inner_grad(phi, task)
        if not np.all(np.isfinite(phi)):
            raise NonFiniteState("non-finite recomputed inner state")
        b = b - cfg.alpha * tally.inner_hvp(phi, task, b)
    return GradientEstimate(
        gradient=b,
        inner_grad_evals=tally.inner_grads,
        outer_grad_evals=tally.outer_grads,
        hvp_evals=tally.hvps,
        peak_cached_states=3,  # recompute register + accumulator + HVP temp
    )


def _checkpoint_positions(r: int, num_checkpoints: int) -> list:
    # floor(j*r/m) for j < m: strictly increasing, all within [0, r).
    return [(j * r) // num_checkpoints for j in range(num_checkpoints)]


def default_checkpoint_count(r: int) -> int:
    """The memory-optimal default, ``ceil(sqrt(r))``."""
    root = math.isqrt(r)
    return root if root * root == r else root + 1


def exact_grad_checkpointed(
    problem,
    task,
    theta,
    cfg: InnerLoopConfig,
    num_checkpoints: Union[int, None] = None,
) -> GradientEstimate:
    """Exact gradient with evenly spaced checkpoints and segment replay.

    The default ``ceil(sqrt(r))`` checkpoints cap the retained states at
    about ``2*sqrt(r)`` while recomputing each state at most once, so the
    inner-gradient count at most doubles relative to the stored variant.
    The gradient itself is bitwise-equal to the stored variant.
    """
    if num_checkpoints is None:
        num_checkpoints = default_checkpoint_count(cfg.r)
    if not 1 <= num_checkpoints <= cfg.r:
        raise InvalidCheckpointCount(
            f"need 1 <= num_checkpoints <= r={cfg.r}, got {num_checkpoints}"
        )
    tally = _Tally(problem)
    positions = _checkpoint_positions(cfg.r, num_checkpoints)
    position_set = set(positions)
    saved = {}
    phi = theta
    peak = 0
    for j in range(cfg.r):
        if j in position_set:
            saved[j] = phi
            peak = max(peak, len(saved))
        phi = phi - cfg.alpha * tally.inner_grad(phi, task)
        if not np.all(np.isfinite(phi)):
            raise NonFiniteState(f"non-finite inner state after step {j + 1}")
    b = tally.outer_grad(phi, task)

    bounds = positions + [cfg.r]
    for seg in range(num_checkpoints - 1, -1, -1):
        start, end = bounds[seg], bounds[seg + 1]
        segment = [saved[start]]
        phi = saved[start]
        for _ in range(start + 1, end):
            phi = phi - cfg.alpha * tally.inner_grad(phi, task)
            segment.append(phi)
        # Replayed states count on top of the checkpoints still held.
        peak = max(peak, len(saved) + len(segment) - 1)
        for phi in reversed(segment):
            b = b - cfg.alpha * tally.inner_hvp(phi, task, b)
        del saved[start]
    return GradientEstimate(
        gradient=b,
        inner_grad_evals=tally.inner_grads,
        outer_grad_evals=tally.outer_grads,
        hvp_evals=tally.hvps,
        peak_cached_states=peak,
    )


def ufo_grad(
    problem,
    task,
    theta,
    cfg: InnerLoopConfig,
    q: float,
    rng: np.random.Generator,
    fuse_forward: bool = False,
) -> GradientEstimate:
    """Unbiased first-order estimate with Bernoulli(q)-gated exact correction.

    Draws the coin from ``rng`` after the first-order pass; consumes
    exactly one uniform.  Averaged over the coin, the estimate equals the
    exact gradient.

    By default the correction pass recomputes its own forward rollout (so
    its tallies stand alone for complexity audits); ``fuse_forward=True``
    reuses the first-order pass's final state instead, saving ``r`` inner
    gradients per correction without changing any output bit.
    """
    return ufo_grad_from_uniform(
        problem, task, theta, cfg, q, float(rng.random()), fuse_forward=fuse_forward
    )


def ufo_grad_from_uniform(
    problem, task, theta, cfg, q, u: float, fuse_forward: bool = False
) -> GradientEstimate:
    """UFO estimate with a pre-drawn uniform (outer-loop substream cell)."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"need 0 < q <= 1, got {q}")
    tally = _Tally(problem)
    phi = rollout(tally, task, theta, cfg, keep_states=False)
    base = tally.outer_grad(phi, task)
    if not u < q:
        return GradientEstimate(
            gradient=base,
            inner_grad_evals=tally.inner_grads,
            outer_grad_evals=tally.outer_grads,
            hvp_evals=tally.hvps,
            peak_cached_states=2,
            correction_taken=False,
        )
    if fuse_forward:
        # A standalone correction pass would recompute the forward rollout
        # and the outer gradient bit-for-bit; reuse both.
        b = base
        for j1 in range(cfg.r, 0, -1):
            phi_j = theta
            for _ in range(j1 - 1):
                phi_j = phi_j - cfg.alpha * tally.inner_grad(phi_j, task)
            if not np.all(np.isfinite(phi_j)):
                raise NonFiniteState("non-finite recomputed inner state")
            b = b - cfg.alpha * tally.inner_hvp(phi_j, task, b)
        corr_grad = b
    else:
        corr = exact_grad_rerun(problem, task, theta, cfg)
        corr_grad = corr.gradient
        tally.inner_grads += corr.inner_grad_evals
        tally.outer_grads += corr.outer_grad_evals
        tally.hvps += corr.hvp_evals
    if q == 1.0:
        grad = corr_grad  # b + (c - b) is exactly c only in real arithmetic
    else:
        grad = base + (corr_grad - base) / q
    return GradientEstimate(
        gradient=grad,
        inner_grad_evals=tally.inner_grads,
        outer_grad_evals=tally.outer_grads,
        hvp_evals=tally.hvps,
        peak_cached_states=3,
        correction_taken=True,
    )


def estimate(
    kind: EstimatorKind,
    problem,
    task,
    theta,
    cfg: InnerLoopConfig,
    rng: Union[np.random.Generator, None] = None,
    xi_uniform: Union[float, None] = None,
) -> GradientEstimate:
    """Dispatch to the estimator selected by ``kind``.

    The unbiased estimator needs either ``rng`` (a dedicated stream) or a
    pre-drawn ``xi_uniform``; the deterministic estimators accept neither.
    """
    if kind.name == "fo":
        return fo_grad(problem, task, theta, cfg)
    if kind.name == "exact_stored":
        return exact_grad_stored(problem, task, theta, cfg)
    if kind.name == "exact_rerun":
        return exact_grad_rerun(problem, task, theta, cfg)
    if kind.name == "exact_checkpointed":
        return exact_grad_checkpointed(problem, task, theta, cfg, kind.num_checkpoints)
    if xi_uniform is None:
        if rng is None:
            raise ValueError("ufo estimator requires rng or xi_uniform")
        xi_uniform = float(rng.random())
    return ufo_grad_from_uniform(problem, task, theta, cfg, kind.q, xi_uniform)
