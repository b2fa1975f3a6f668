"""Engine/generic parity and the JIT/fallback twin contract."""

import os
import subprocess
import sys

import numpy as np
import pytest

from bilevelopt import (
    EstimatorKind,
    FiniteTaskDistribution,
    InnerLoopConfig,
    QuadraticProblem,
    QuadraticTask,
    StepSchedule,
    UniformThetaInit,
    make_counterexample,
    run_minibatch_gd,
    substream,
)
from bilevelopt.engine import ScalarTaskFamily, run_scalar_experiment, supports, ufo_sample_batch
from bilevelopt.estimators import ufo_grad_from_uniform
from bilevelopt.outer_loop import RunConfig


def _counterexample_setup():
    spec, problem, dist = make_counterexample()
    return spec, problem, dist, ScalarTaskFamily.from_distribution(dist)


def _traj_fields_equal(a, b):
    assert np.array_equal(a.thetas, b.thetas)
    assert np.array_equal(a.gammas, b.gammas, equal_nan=True)
    assert np.array_equal(a.batch_grads, b.batch_grads, equal_nan=True)
    assert np.array_equal(a.meta_grads, b.meta_grads, equal_nan=True)
    assert np.array_equal(a.corrections, b.corrections)
    assert np.array_equal(a.inner_grad_evals, b.inner_grad_evals)
    assert np.array_equal(a.outer_grad_evals, b.outer_grad_evals)
    assert np.array_equal(a.hvp_evals, b.hvp_evals)
    assert a.fail_iter == b.fail_iter


class TestEngineGenericParity:
    @pytest.mark.parametrize(
        "kind",
        [
            EstimatorKind.fo(),
            EstimatorKind.exact_stored(),
            EstimatorKind.exact_rerun(),
            EstimatorKind.ufo(0.15),
        ],
        ids=lambda k: k.label(),
    )
    def test_counterexample_trajectories_bitwise_equal(self, kind):
        spec, problem, dist, family = _counterexample_setup()
        cfg = RunConfig(
            tau=200,
            v=2,
            inner=InnerLoopConfig(alpha=spec.alpha, r=spec.r),
            estimator=kind,
            schedule=StepSchedule.harmonic(10.0),
            seed=4,
            theta0=UniformThetaInit(-10.0, 30.0),
        )
        _traj_fields_equal(run_scalar_experiment(family, cfg), run_minibatch_gd(problem, dist, cfg))

    def test_quadratic_with_clipping_and_inverse_sqrt(self):
        problem = QuadraticProblem()
        task = QuadraticTask(a=np.array([1.0]), b=np.array([0.0]))
        dist = FiniteTaskDistribution([task], [1.0])
        family = ScalarTaskFamily.from_distribution(dist)
        cfg = RunConfig(
            tau=300,
            v=1,
            inner=InnerLoopConfig(alpha=0.1, r=5),
            estimator=EstimatorKind.exact_stored(),
            schedule=StepSchedule.inverse_sqrt(),
            seed=0,
            theta0=np.array([10.0]),
            clip_bound=0.5,
        )
        _traj_fields_equal(run_scalar_experiment(family, cfg), run_minibatch_gd(problem, dist, cfg))

    def test_zero_iterations(self):
        spec, problem, dist, family = _counterexample_setup()
        cfg = RunConfig(
            tau=0,
            v=1,
            inner=InnerLoopConfig(alpha=spec.alpha, r=spec.r),
            estimator=EstimatorKind.fo(),
            schedule=StepSchedule.harmonic(10.0),
            seed=2,
            theta0=UniformThetaInit(-10.0, 30.0),
        )
        _traj_fields_equal(run_scalar_experiment(family, cfg), run_minibatch_gd(problem, dist, cfg))


class TestEngineValidation:
    def test_unsupported_estimator(self):
        spec, problem, dist, family = _counterexample_setup()
        cfg = RunConfig(
            tau=1,
            v=1,
            inner=InnerLoopConfig(alpha=spec.alpha, r=spec.r),
            estimator=EstimatorKind.exact_checkpointed(),
            schedule=StepSchedule.harmonic(10.0),
            seed=0,
            theta0=np.array([0.0]),
        )
        assert not supports(cfg)
        with pytest.raises(ValueError):
            run_scalar_experiment(family, cfg)

    def test_requires_one_dimensional_theta(self):
        spec, problem, dist, family = _counterexample_setup()
        cfg = RunConfig(
            tau=1,
            v=1,
            inner=InnerLoopConfig(alpha=spec.alpha, r=spec.r),
            estimator=EstimatorKind.fo(),
            schedule=StepSchedule.harmonic(10.0),
            seed=0,
            theta0=np.zeros(3),
        )
        with pytest.raises(ValueError):
            run_scalar_experiment(family, cfg)

    def test_mixed_task_types_rejected(self):
        with pytest.raises(TypeError):
            ScalarTaskFamily.from_tasks(["not a task"], [1.0])


class TestUfoSampleBatch:
    def test_matches_generic_calls_on_same_uniforms(self):
        spec, problem, dist, family = _counterexample_setup()
        cfg = InnerLoopConfig(alpha=spec.alpha, r=spec.r)
        theta = 5.0
        us = substream(77).random(64)
        samples = ufo_sample_batch(family, 0, theta, spec.alpha, spec.r, 0.3, us)
        for i in range(us.size):
            generic = ufo_grad_from_uniform(
                problem, spec.tasks[0], np.array([theta]), cfg, 0.3, us[i]
            )
            assert samples[i] == generic.gradient[0]


class TestFallbackTwin:
    def test_pure_python_path_is_bitwise_identical(self, tmp_path):
        # Re-run one UFO trajectory in a subprocess with the JIT disabled
        # via the env flag; results must match the compiled path bit-for-bit.
        script = f"""
import numpy as np
from bilevelopt import EstimatorKind, InnerLoopConfig, StepSchedule, UniformThetaInit, make_counterexample
from bilevelopt.engine import ScalarTaskFamily, run_scalar_experiment
from bilevelopt.outer_loop import RunConfig
from bilevelopt.kernels import NUMBA_ENABLED
spec, problem, dist = make_counterexample()
family = ScalarTaskFamily.from_distribution(dist)
cfg = RunConfig(tau=150, v=1, inner=InnerLoopConfig(alpha=spec.alpha, r=spec.r),
                estimator=EstimatorKind.ufo(0.1), schedule=StepSchedule.harmonic(10.0),
                seed=9, theta0=UniformThetaInit(-10.0, 30.0))
traj = run_scalar_experiment(family, cfg)
np.savez("{tmp_path}/out_" + ("jit" if NUMBA_ENABLED else "py") + ".npz",
         thetas=traj.thetas, meta=traj.meta_grads, corr=traj.corrections)
"""
        for env_flag in ("0", "1"):
            env = dict(os.environ, BILEVELOPT_NO_NUMBA=env_flag)
            subprocess.run([sys.executable, "-c", script], check=True, env=env)
        jit = np.load(tmp_path / "out_jit.npz")
        py = np.load(tmp_path / "out_py.npz")
        assert np.array_equal(jit["thetas"].view(np.uint64), py["thetas"].view(np.uint64))
        assert np.array_equal(jit["meta"].view(np.uint64), py["meta"].view(np.uint64))
        assert np.array_equal(jit["corr"], py["corr"])
