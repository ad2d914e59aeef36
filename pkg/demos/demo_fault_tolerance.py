"""Determinism under worker counts, faults, and retries.

Assembly jobs are pure functions of (base_seed, job_id): each job draws
its trajectories from counter-based generator streams spawned from that
pair, and results are reduced in a canonical order. So the assembled
system is byte-identical no matter how many workers run, how jobs are
scheduled, or how many times a job dies and is retried. This script
assembles the same system three ways and compares the raw bytes.
"""

import numpy as np

from pddsparse import (
    AssemblyParams,
    GridSpec,
    assemble_system,
    build_discretisation,
    laplace_const,
)

plan = build_discretisation(GridSpec(origin=(0.0, 0.0), square_side=1.0,
                                     nx=3, ny=3, knots_per_interface=4))
problem = laplace_const(7.0)
params = AssemblyParams.uniform(plan.n, h=0.02, n_traj=200)

runs = {
    "1 worker": dict(workers=1),
    "4 workers": dict(workers=4),
    "4 workers + 20% faults": dict(workers=4, fault_rate=0.2,
                                   retry_budget=10),
}

systems = {}
for name, kw in runs.items():
    systems[name] = assemble_system(plan, problem, params, n_job=100,
                                    base_seed=2024, **kw)
    print(f"assembled with {name}: {systems[name].jobs_used} jobs")

ref = systems["1 worker"]
for name, system in systems.items():
    same = (np.array_equal(system.vals, ref.vals)
            and np.array_equal(system.rows, ref.rows)
            and np.array_equal(system.cols, ref.cols)
            and np.array_equal(system.rhs, ref.rhs))
    print(f"  {name:24s} byte-identical to reference: {same}")

failed = sum(st.n_failed for st in systems["4 workers + 20% faults"].stats)
print(f"\nwith faults injected, every job still produced its exact result")
print(f"after retries (trajectories discarded: {failed}); a fault-tolerant")
print(f"scheduler never changes the numbers, only the wall time.")
