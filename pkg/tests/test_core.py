"""Rollout, clipping, task sampling and RNG stream contracts."""

import numpy as np
import pytest

from bilevelopt import (
    EmptyDistribution,
    FiniteTaskDistribution,
    InnerLoopConfig,
    NonFiniteState,
    QuadraticProblem,
    QuadraticTask,
    as_param_vector,
    clip_entries,
    make_counterexample,
    rollout,
    sample_tasks,
    substream,
)
from bilevelopt.core import DimensionMismatch


class TestRollout:
    def test_quadratic_closed_form(self):
        # phi_r = (1 - alpha*a)^r * (theta - b/a) + b/a, cross-checked
        # against the iterative loop.
        problem = QuadraticProblem()
        task = QuadraticTask(a=np.array([0.5]), b=np.array([0.0]))
        cfg = InnerLoopConfig(alpha=0.1, r=10)
        final = rollout(problem, task, np.array([1.0]), cfg)
        expected = (1.0 - 0.1 * 0.5) ** 10 * 1.0
        assert abs(final[0] - expected) < 1e-15
        assert abs(final[0] - 0.5987369392) < 1e-9

    def test_stationary_point_is_fixed(self):
        problem = QuadraticProblem()
        task = QuadraticTask(a=np.array([2.0, 0.7]), b=np.array([1.0, -0.7]))
        theta = task.b / task.a  # inner gradient vanishes here
        cfg = InnerLoopConfig(alpha=0.3, r=1)
        final = rollout(problem, task, theta, cfg)
        assert np.array_equal(final, theta)

    def test_keep_states_matches_final(self):
        problem = QuadraticProblem()
        task = QuadraticTask(a=np.array([0.5, 1.5]), b=np.array([0.2, -1.0]))
        cfg = InnerLoopConfig(alpha=0.2, r=7)
        theta = np.array([3.0, -2.0])
        traj = rollout(problem, task, theta, cfg, keep_states=True)
        final = rollout(problem, task, theta, cfg, keep_states=False)
        assert len(traj) == cfg.r + 1
        assert np.array_equal(traj.initial, theta)
        assert np.array_equal(traj.final, final)

    def test_states_satisfy_update_recursion(self):
        problem = QuadraticProblem()
        task = QuadraticTask(a=np.array([1.2]), b=np.array([0.4]))
        cfg = InnerLoopConfig(alpha=0.15, r=6)
        traj = rollout(problem, task, np.array([2.0]), cfg, keep_states=True)
        for j in range(1, cfg.r + 1):
            step = traj.states[j - 1] - cfg.alpha * problem.inner_grad(traj.states[j - 1], task)
            assert np.array_equal(traj.states[j], step)

    def test_counterexample_iterates_stay_in_interval(self):
        # Inside the all-quadratic segment the inner update is a convex
        # combination of the iterate and the task minimizer.
        from bilevelopt import counterexample_constants

        spec, problem, _ = make_counterexample()
        lo, hi = counterexample_constants(spec).interval
        cfg = InnerLoopConfig(alpha=spec.alpha, r=spec.r)
        rng = np.random.default_rng(5)
        for task in spec.tasks:
            for _ in range(20):
                theta = np.array([rng.uniform(lo, hi)])
                traj = rollout(problem, task, theta, cfg, keep_states=True)
                for state in traj.states:
                    assert lo <= state[0] <= hi

    def test_divergent_rollout_raises(self):
        problem = QuadraticProblem()
        task = QuadraticTask(a=np.array([1.0]), b=np.array([0.0]))
        cfg = InnerLoopConfig(alpha=1e300, r=5)  # step overflows in two iterations
        with np.errstate(over="ignore"), pytest.raises(NonFiniteState):
            rollout(problem, task, np.array([1.0]), cfg)

    def test_dimension_mismatch(self):
        problem = QuadraticProblem()
        task = QuadraticTask(a=np.array([1.0]), b=np.array([0.0]))
        with pytest.raises(DimensionMismatch):
            rollout(problem, task, np.array([1.0, 2.0]), InnerLoopConfig(0.1, 1))


class TestConfigValidation:
    def test_rejects_zero_length_loop(self):
        with pytest.raises(ValueError):
            InnerLoopConfig(alpha=0.1, r=0)

    def test_rejects_nonpositive_alpha(self):
        with pytest.raises(ValueError):
            InnerLoopConfig(alpha=0.0, r=1)
        with pytest.raises(ValueError):
            InnerLoopConfig(alpha=-0.1, r=1)

    def test_param_vector_validation(self):
        with pytest.raises(NonFiniteState):
            as_param_vector([1.0, np.nan])
        with pytest.raises(ValueError):
            as_param_vector([])


class TestClipEntries:
    def test_mixed_saturation(self):
        out = clip_entries(np.array([0.5, -0.05]), 0.1)
        assert np.array_equal(out, np.array([0.1, -0.05]))

    def test_zero_vector_fixed_point(self):
        out = clip_entries(np.zeros(2), 0.731)
        assert np.array_equal(out, np.zeros(2))

    def test_both_entries_saturate(self):
        out = clip_entries(np.array([-3.0, 7.0]), 1.0)
        assert np.array_equal(out, np.array([-1.0, 1.0]))

    def test_idempotent(self, rng):
        v = rng.normal(0, 5, size=40)
        once = clip_entries(v, 0.8)
        assert np.array_equal(clip_entries(once, 0.8), once)

    def test_rejects_bad_bound(self):
        with pytest.raises(ValueError):
            clip_entries(np.zeros(2), 0.0)


class TestSampleTasks:
    def test_two_task_frequency(self):
        # Binomial 3-sigma band around 0.5 for 1e4 draws: +-0.015.
        dist = FiniteTaskDistribution(["t1", "t2"], (0.5, 0.5))
        tasks = sample_tasks(dist, 10_000, substream(42))
        freq = sum(1 for t in tasks if t == "t1") / 10_000
        assert 0.485 <= freq <= 0.515

    def test_singleton(self):
        dist = FiniteTaskDistribution(["only"])
        assert sample_tasks(dist, 3, substream(0)) == ["only", "only", "only"]

    def test_same_seed_same_tasks(self):
        dist = FiniteTaskDistribution(["a", "b", "c"], (0.2, 0.3, 0.5))
        first = sample_tasks(dist, 100, substream(7, 1))
        second = sample_tasks(dist, 100, substream(7, 1))
        assert first == second

    def test_empty_distribution(self):
        with pytest.raises(EmptyDistribution):
            FiniteTaskDistribution([])

    def test_count_validation(self):
        dist = FiniteTaskDistribution(["x"])
        with pytest.raises(ValueError):
            sample_tasks(dist, 0, substream(0))


class TestStreams:
    def test_distinct_paths_differ(self):
        a = substream(3, 1).random(4)
        b = substream(3, 2).random(4)
        assert not np.array_equal(a, b)

    def test_same_path_reproduces(self):
        a = substream(3, 5, 9).random(4)
        b = substream(3, 5, 9).random(4)
        assert np.array_equal(a, b)
