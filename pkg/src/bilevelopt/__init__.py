"""Gradient estimation for bilevel optimization, with resource accounting.

The package provides the inner gradient-descent rollout, five outer-level
gradient estimators (first-order, three bitwise-equivalent exact variants
with different memory/time trade-offs, and an unbiased first-order
estimator), analytic problem families that make the estimators' behavior
checkable in closed form, a mini-batch outer loop, finite-difference and
enumeration oracles, and convergence/resource diagnostics.
"""

from .core import (
    BilevelProblem,
    DegenerateProblem,
    DimensionMismatch,
    EmptyDistribution,
    FiniteTaskDistribution,
    GradientEstimate,
    InnerLoopConfig,
    InvalidCheckpointCount,
    NonFiniteEvaluation,
    NonFiniteState,
    ProbabilityMismatch,
    ScheduleMismatch,
    StateTrajectory,
    as_param_vector,
    clip_entries,
    rollout,
    sample_tasks,
    substream,
)
from .diagnostics import (
    RegularityConstants,
    grad_sq_bound,
    lipschitz_bound,
    meta_grad_exact,
    rate_check,
    resource_report,
    sgd_constant,
)
from .estimators import (
    EstimatorKind,
    estimate,
    exact_grad_checkpointed,
    exact_grad_rerun,
    exact_grad_stored,
    fo_grad,
    ufo_grad,
)
from .oracle import FDConfig, enumerate_expected_grad, fd_grad, fd_hvp, mc_mean_test
from .outer_loop import (
    RunConfig,
    StepSchedule,
    Trajectory,
    UniformThetaInit,
    run_minibatch_gd,
    validate_schedule,
)
from .problems import (
    CounterexampleConstants,
    CounterexampleProblem,
    CounterexampleSpec,
    FewShotLogisticProblem,
    FewShotLogisticTask,
    FewShotTaskSampler,
    PiecewiseTask,
    QuadraticProblem,
    QuadraticTask,
    cce_loss,
    counterexample_constants,
    derive_b2,
    make_counterexample,
    piecewise_grad,
    piecewise_hess,
    piecewise_value,
    softmax,
)

__version__ = "0.1.0"
