"""Estimator gradients, equivalences, coin handling and resource tallies."""

import numpy as np
import pytest

from bilevelopt import (
    EstimatorKind,
    InnerLoopConfig,
    InvalidCheckpointCount,
    QuadraticProblem,
    QuadraticTask,
    estimate,
    exact_grad_checkpointed,
    exact_grad_rerun,
    exact_grad_stored,
    fo_grad,
    make_counterexample,
    substream,
    ufo_grad,
)
from bilevelopt.estimators import ufo_grad_from_uniform

from conftest import AffineInnerProblem, AffineTask, all_family_instances

QUAD = QuadraticProblem()
TASK = QuadraticTask(a=np.array([0.5]), b=np.array([0.0]))
CFG = InnerLoopConfig(alpha=0.1, r=10)
THETA = np.array([1.0])

# Closed forms for the 1-D quadratic: first-order a(1-alpha*a)^r (theta - b/a),
# exact a(1-alpha*a)^{2r} (theta - b/a).
FO_CLOSED = 0.5 * 0.95**10
EXACT_CLOSED = 0.5 * 0.95**20


class TestFirstOrder:
    def test_closed_form(self):
        est = fo_grad(QUAD, TASK, THETA, CFG)
        assert abs(est.gradient[0] - FO_CLOSED) <= 1e-12 * FO_CLOSED
        assert abs(est.gradient[0] - 0.2993685) < 1e-7

    def test_inner_fixed_point_gives_zero(self):
        task = QuadraticTask(a=np.array([0.8, 1.1]), b=np.array([0.4, -2.2]))
        theta = task.b / task.a
        est = fo_grad(QUAD, task, theta, InnerLoopConfig(alpha=0.2, r=4))
        assert np.array_equal(est.gradient, np.zeros(2))

    def test_tallies(self):
        est = fo_grad(QUAD, TASK, THETA, CFG)
        assert est.inner_grad_evals == CFG.r
        assert est.outer_grad_evals == 1
        assert est.hvp_evals == 0
        assert est.peak_cached_states <= 2
        assert est.correction_taken is None


class TestExactStored:
    def test_closed_form(self):
        est = exact_grad_stored(QUAD, TASK, THETA, CFG)
        assert abs(est.gradient[0] - EXACT_CLOSED) <= 1e-12 * EXACT_CLOSED
        assert abs(est.gradient[0] - 0.1792430) < 1e-7

    def test_counterexample_quadratic_segment_form(self):
        # Inside the all-quadratic segment the exact per-task gradient is
        # a_i (1 - alpha a_i)^{2r} (theta - b_i/a_i).
        spec, problem, _ = make_counterexample()
        cfg = InnerLoopConfig(alpha=spec.alpha, r=spec.r)
        theta = np.array([3.0])
        task = spec.tasks[0]
        est = exact_grad_stored(problem, task, theta, cfg)
        closed = spec.a1 * (1 - spec.alpha * spec.a1) ** (2 * spec.r) * (3.0 - spec.b1 / spec.a1)
        assert abs(est.gradient[0] - closed) <= 1e-12 * abs(closed)

    def test_zero_hessian_collapses_to_first_order(self):
        problem = AffineInnerProblem()
        task = AffineTask(slope=[0.3, -0.7], a=[1.0, 2.0], b=[0.5, 0.0])
        theta = np.array([1.5, -0.5])
        cfg = InnerLoopConfig(alpha=0.2, r=6)
        first = fo_grad(problem, task, theta, cfg)
        for fn in (exact_grad_stored, exact_grad_rerun, exact_grad_checkpointed):
            assert np.array_equal(fn(problem, task, theta, cfg).gradient, first.gradient)
        coin = ufo_grad(problem, task, theta, cfg, 0.5, substream(1))
        assert np.array_equal(coin.gradient, first.gradient)

    def test_tallies(self):
        est = exact_grad_stored(QUAD, TASK, THETA, CFG)
        assert est.inner_grad_evals == CFG.r
        assert est.outer_grad_evals == 1
        assert est.hvp_evals == CFG.r
        assert est.peak_cached_states == CFG.r


class TestExactRerun:
    def test_bitwise_equal_to_stored(self, rng):
        for problem, task, theta, cfg in all_family_instances(rng, 100):
            stored = exact_grad_stored(problem, task, theta, cfg)
            rerun = exact_grad_rerun(problem, task, theta, cfg)
            assert np.array_equal(stored.gradient, rerun.gradient)

    def test_single_step_has_no_recomputation(self):
        cfg = InnerLoopConfig(alpha=0.1, r=1)
        est = exact_grad_rerun(QUAD, TASK, THETA, cfg)
        assert est.inner_grad_evals == 1
        assert est.hvp_evals == 1

    def test_eval_count_formula(self):
        est = exact_grad_rerun(QUAD, TASK, THETA, CFG)
        assert est.inner_grad_evals == 10 + 45
        assert est.peak_cached_states <= 3


class TestCheckpointed:
    def test_full_checkpointing_behaves_as_stored(self):
        est = exact_grad_checkpointed(QUAD, TASK, THETA, CFG, num_checkpoints=CFG.r)
        stored = exact_grad_stored(QUAD, TASK, THETA, CFG)
        assert np.array_equal(est.gradient, stored.gradient)
        assert est.inner_grad_evals == CFG.r  # nothing replayed
        assert est.peak_cached_states == CFG.r

    def test_single_checkpoint_replays_whole_rollout(self):
        est = exact_grad_checkpointed(QUAD, TASK, THETA, CFG, num_checkpoints=1)
        stored = exact_grad_stored(QUAD, TASK, THETA, CFG)
        assert np.array_equal(est.gradient, stored.gradient)
        assert est.peak_cached_states == CFG.r  # one checkpoint + replayed segment

    def test_segment_accounting(self):
        cfg = InnerLoopConfig(alpha=0.05, r=16)
        est = exact_grad_checkpointed(QUAD, TASK, THETA, cfg, num_checkpoints=4)
        assert est.peak_cached_states <= 4 + 4
        assert est.inner_grad_evals <= 2 * 16

    def test_bitwise_equal_across_counts(self, rng):
        for problem, task, theta, cfg in all_family_instances(rng, 30):
            stored = exact_grad_stored(problem, task, theta, cfg).gradient
            for m in {1, 2, cfg.r, max(1, cfg.r // 2)}:
                if m > cfg.r:
                    continue
                ckpt = exact_grad_checkpointed(problem, task, theta, cfg, num_checkpoints=m)
                assert np.array_equal(ckpt.gradient, stored)

    def test_default_count_gives_sqrt_memory(self):
        # The default ceil(sqrt(r)) checkpoints keep peak retained states
        # within about 2*sqrt(r) while at most doubling inner gradients.
        for r in (1, 2, 5, 9, 16, 25, 40, 64, 100):
            cfg = InnerLoopConfig(alpha=0.01, r=r)
            est = exact_grad_checkpointed(QUAD, TASK, THETA, cfg)
            root = int(np.ceil(np.sqrt(r)))
            assert est.peak_cached_states <= root + -(-r // root)
            assert est.inner_grad_evals <= 2 * r

    def test_rejects_bad_counts(self):
        with pytest.raises(InvalidCheckpointCount):
            exact_grad_checkpointed(QUAD, TASK, THETA, CFG, num_checkpoints=0)
        with pytest.raises(InvalidCheckpointCount):
            exact_grad_checkpointed(QUAD, TASK, THETA, CFG, num_checkpoints=CFG.r + 1)


class TestUnbiasedFirstOrder:
    def test_q_one_bitwise_equals_rerun(self):
        est = ufo_grad(QUAD, TASK, THETA, CFG, 1.0, substream(0))
        rerun = exact_grad_rerun(QUAD, TASK, THETA, CFG)
        assert np.array_equal(est.gradient, rerun.gradient)
        assert est.correction_taken is True

    def test_two_point_outcomes(self):
        # With q = 0.5 the two possible outputs are the first-order value
        # and its importance-weighted correction; their mean is exact.
        skipped = ufo_grad_from_uniform(QUAD, TASK, THETA, CFG, 0.5, u=0.9)
        taken = ufo_grad_from_uniform(QUAD, TASK, THETA, CFG, 0.5, u=0.1)
        assert skipped.correction_taken is False
        assert taken.correction_taken is True
        assert abs(skipped.gradient[0] - FO_CLOSED) <= 1e-12
        corrected = FO_CLOSED + 2.0 * (EXACT_CLOSED - FO_CLOSED)
        assert abs(taken.gradient[0] - corrected) <= 1e-12
        assert abs(taken.gradient[0] - 0.0591175) < 1e-7
        mean = 0.5 * skipped.gradient[0] + 0.5 * taken.gradient[0]
        assert abs(mean - EXACT_CLOSED) <= 1e-12

    def test_coin_consumes_one_draw(self):
        rng = substream(123)
        ufo_grad(QUAD, TASK, THETA, CFG, 0.3, rng)
        after = rng.random()
        reference = substream(123)
        reference.random()  # the single coin uniform
        assert after == reference.random()

    def test_tallies_with_and_without_correction(self):
        skipped = ufo_grad_from_uniform(QUAD, TASK, THETA, CFG, 0.5, u=0.99)
        assert skipped.inner_grad_evals == CFG.r
        assert skipped.hvp_evals == 0
        taken = ufo_grad_from_uniform(QUAD, TASK, THETA, CFG, 0.5, u=0.0)
        assert taken.inner_grad_evals == CFG.r + (CFG.r + CFG.r * (CFG.r - 1) // 2)
        assert taken.hvp_evals == CFG.r
        assert taken.peak_cached_states <= 3

    def test_rejects_bad_q(self):
        with pytest.raises(ValueError):
            ufo_grad_from_uniform(QUAD, TASK, THETA, CFG, 0.0, u=0.5)
        with pytest.raises(ValueError):
            EstimatorKind.ufo(1.5)


class TestGradientNormBounds:
    def test_first_order_and_exact_bounds(self, rng):
        # Assumption-style constants for the piecewise family:
        # l1 = max a(1/2 + A), l2 = max a.
        spec, problem, _ = make_counterexample()
        cfg = InnerLoopConfig(alpha=spec.alpha, r=spec.r)
        l1 = max(spec.a1, spec.a2) * (0.5 + spec.big_a)
        l2 = max(spec.a1, spec.a2)
        growth = (1.0 + cfg.alpha * l2) ** cfg.r
        for _ in range(60):
            theta = np.array([rng.uniform(-30.0, 50.0)])
            task = spec.tasks[int(rng.integers(0, 2))]
            fo_norm = abs(fo_grad(problem, task, theta, cfg).gradient[0])
            exact_norm = abs(exact_grad_stored(problem, task, theta, cfg).gradient[0])
            assert fo_norm <= l1 * (1.0 + 1e-12)
            assert exact_norm <= growth * l1 * (1.0 + 1e-12)


class TestDispatch:
    def test_estimate_routes_by_kind(self):
        cases = [
            (EstimatorKind.fo(), fo_grad(QUAD, TASK, THETA, CFG)),
            (EstimatorKind.exact_stored(), exact_grad_stored(QUAD, TASK, THETA, CFG)),
            (EstimatorKind.exact_rerun(), exact_grad_rerun(QUAD, TASK, THETA, CFG)),
            (EstimatorKind.exact_checkpointed(3), exact_grad_checkpointed(QUAD, TASK, THETA, CFG, 3)),
        ]
        for kind, reference in cases:
            est = estimate(kind, QUAD, TASK, THETA, CFG)
            assert np.array_equal(est.gradient, reference.gradient)

    def test_ufo_requires_randomness(self):
        with pytest.raises(ValueError):
            estimate(EstimatorKind.ufo(0.5), QUAD, TASK, THETA, CFG)

    def test_kind_validation(self):
        with pytest.raises(ValueError):
            EstimatorKind("bogus")
        with pytest.raises(ValueError):
            EstimatorKind("fo", q=0.5)


class TestFusedCorrection:
    def test_fused_pass_same_gradient_fewer_evals(self):
        # Fusing reuses the first-order pass's forward state: the gradient
        # is unchanged bit-for-bit, the correction saves r inner gradients
        # and one outer gradient.
        plain = ufo_grad_from_uniform(QUAD, TASK, THETA, CFG, 0.5, u=0.0)
        fused = ufo_grad_from_uniform(QUAD, TASK, THETA, CFG, 0.5, u=0.0, fuse_forward=True)
        assert np.array_equal(plain.gradient, fused.gradient)
        assert plain.inner_grad_evals == CFG.r + CFG.r + CFG.r * (CFG.r - 1) // 2
        assert fused.inner_grad_evals == CFG.r + CFG.r * (CFG.r - 1) // 2
        assert plain.outer_grad_evals == 2
        assert fused.outer_grad_evals == 1
        assert fused.hvp_evals == plain.hvp_evals == CFG.r

    def test_fused_skip_branch_unchanged(self):
        plain = ufo_grad_from_uniform(QUAD, TASK, THETA, CFG, 0.5, u=0.9)
        fused = ufo_grad_from_uniform(QUAD, TASK, THETA, CFG, 0.5, u=0.9, fuse_forward=True)
        assert np.array_equal(plain.gradient, fused.gradient)
        assert plain.inner_grad_evals == fused.inner_grad_evals == CFG.r
