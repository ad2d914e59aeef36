"""Tests for the deterministic job queue: ordering, retries, parallelism."""

import numpy as np
import pytest

from pddsparse.assembly import AssemblyParams, assemble_system
from pddsparse.geometry import GridSpec, build_discretisation
from pddsparse.jobs import (
    Job,
    JobFailedError,
    fault_roll,
    schedule_jobs,
)
from pddsparse.problems import laplace_const


def _square(job):
    return job.job_id * job.job_id


def _jobs(n):
    return [Job(job_id=i, knot=0, mode="plain", h=0.1, n_traj=10)
            for i in range(n)]


def test_serial_results_follow_submission_order():
    out = schedule_jobs(_jobs(5), _square)
    assert out == [0, 1, 4, 9, 16]


def test_fault_rolls_are_deterministic():
    a = [fault_roll(7, j, 0, 0.5) for j in range(200)]
    b = [fault_roll(7, j, 0, 0.5) for j in range(200)]
    assert a == b
    assert 40 < sum(a) < 160  # the rate is actually applied
    assert not any(fault_roll(7, j, 0, 0.0) for j in range(50))
    # different attempts reroll independently
    assert any(fault_roll(7, j, 0, 0.5) != fault_roll(7, j, 1, 0.5)
               for j in range(50))


def test_injected_faults_retry_to_identical_results():
    clean = schedule_jobs(_jobs(40), _square, fault_rate=0.0, base_seed=3)
    faulty = schedule_jobs(_jobs(40), _square, fault_rate=0.4,
                           retry_budget=20, base_seed=3)
    assert clean == faulty


def test_retry_budget_exhaustion_names_the_job():
    with pytest.raises(JobFailedError, match="job 0"):
        schedule_jobs(_jobs(1), _square, fault_rate=1.0, retry_budget=2,
                      base_seed=1)


def test_validation():
    jobs = _jobs(2) + [_jobs(1)[0]]  # duplicate id 0
    with pytest.raises(ValueError, match="unique"):
        schedule_jobs(jobs, _square)
    with pytest.raises(ValueError, match="worker_count"):
        schedule_jobs(_jobs(1), _square, workers=0)


@pytest.mark.slow
def test_worker_count_and_faults_leave_bytes_unchanged():
    plan = build_discretisation(GridSpec(origin=(0.0, 0.0), square_side=1.0,
                                         nx=3, ny=3, knots_per_interface=2))
    problem = laplace_const(3.0)
    params = AssemblyParams.uniform(plan.n, h=0.05, n_traj=200)

    base = assemble_system(plan, problem, params, n_job=100, base_seed=11,
                           workers=1)
    par = assemble_system(plan, problem, params, n_job=100, base_seed=11,
                          workers=2)
    noisy = assemble_system(plan, problem, params, n_job=100, base_seed=11,
                            workers=2, fault_rate=0.2, retry_budget=10)

    for other in (par, noisy):
        np.testing.assert_array_equal(base.rows, other.rows)
        np.testing.assert_array_equal(base.cols, other.cols)
        np.testing.assert_array_equal(base.vals, other.vals)
        np.testing.assert_array_equal(base.rhs, other.rhs)
