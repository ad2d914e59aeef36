"""Deterministic job queue: retries, fault injection, canonical ordering.

A job is a pure function of (runner state, job descriptor): re-running it —
after a simulated worker fault or on a different worker count — reproduces
the result bitwise, because all randomness derives from (base_seed, job_id)
and fault rolls use a separate seed tuple (base_seed, job_id, attempt, tag)
that never touches the trajectory streams.

``schedule_jobs`` returns results in the order of the submitted job list
regardless of completion order; callers reduce in that canonical order.
"""

from __future__ import annotations

import os
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass

import numpy as np

_FAULT_TAG = 0xFA11  # seed-tuple marker keeping fault rolls off the SDE streams

PLAIN = "plain"
MIXED = "mixed"
PRODUCTION_CV = "production_cv"


@dataclass(frozen=True)
class Job:
    """One unit of Monte Carlo work: N_job trajectories from one knot."""

    job_id: int
    knot: int
    mode: str
    h: float
    n_traj: int


class JobFailedError(RuntimeError):
    """A job exhausted its retry budget."""


class SimulatedWorkerFault(RuntimeError):
    """Injected fault standing in for a lost worker (testing only)."""


def fault_roll(base_seed: int, job_id: int, attempt: int, rate: float) -> bool:
    """Deterministic Bernoulli draw deciding whether this attempt 'dies'."""
    if rate <= 0.0:
        return False
    seq = np.random.SeedSequence((base_seed, job_id, attempt, _FAULT_TAG))
    gen = np.random.Generator(np.random.Philox(seq))
    return bool(gen.uniform() < rate)


def _attempt(runner, job: Job, base_seed: int, fault_rate: float, attempt: int):
    if fault_roll(base_seed, job.job_id, attempt, fault_rate):
        raise SimulatedWorkerFault(
            f"injected fault on job {job.job_id} attempt {attempt}"
        )
    return runner(job)


_WORKER_RUNNER = None


def _init_worker(runner):
    global _WORKER_RUNNER
    _WORKER_RUNNER = runner
    # keep worker maths on one thread so per-job results are bitwise stable
    os.environ.setdefault("OMP_NUM_THREADS", "1")


def _worker_attempt(job: Job, base_seed: int, fault_rate: float, attempt: int):
    return _attempt(_WORKER_RUNNER, job, base_seed, fault_rate, attempt)


def schedule_jobs(jobs, runner, *, workers: int = 1, retry_budget: int = 3,
                  fault_rate: float = 0.0, base_seed: int = 0) -> list:
    """Run all jobs, retrying simulated faults, and return results in the
    submitted order.

    ``runner`` is a picklable callable Job -> result; with ``workers > 1`` it
    is shipped once per worker process and jobs are pulled from a shared
    queue. Each re-issued attempt replaces the failed one, so every job
    contributes exactly once.
    """
    jobs = list(jobs)
    if workers < 1:
        raise ValueError(f"worker_count must be >= 1, got {workers}")
    ids = [j.job_id for j in jobs]
    if len(set(ids)) != len(ids):
        raise ValueError("job ids must be unique within a schedule")

    if workers == 1:
        results = {}
        for job in jobs:
            attempt = 0
            while True:
                try:
                    results[job.job_id] = _attempt(runner, job, base_seed,
                                                   fault_rate, attempt)
                    break
                except SimulatedWorkerFault:
                    attempt += 1
                    if attempt > retry_budget:
                        raise JobFailedError(
                            f"job {job.job_id} (knot {job.knot}) failed "
                            f"{attempt} times, retry budget {retry_budget} "
                            f"exhausted"
                        ) from None
        return [results[j.job_id] for j in jobs]

    results = {}
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=(runner,)) as pool:
        pending = {}
        for job in jobs:
            fut = pool.submit(_worker_attempt, job, base_seed, fault_rate, 0)
            pending[fut] = (job, 0)
        while pending:
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                job, attempt = pending.pop(fut)
                exc = fut.exception()
                if exc is None:
                    results[job.job_id] = fut.result()
                elif isinstance(exc, SimulatedWorkerFault):
                    attempt += 1
                    if attempt > retry_budget:
                        raise JobFailedError(
                            f"job {job.job_id} (knot {job.knot}) failed "
                            f"{attempt} times, retry budget {retry_budget} "
                            f"exhausted"
                        ) from exc
                    nxt = pool.submit(_worker_attempt, job, base_seed,
                                      fault_rate, attempt)
                    pending[nxt] = (job, attempt)
                else:
                    raise exc
    return [results[j.job_id] for j in jobs]
