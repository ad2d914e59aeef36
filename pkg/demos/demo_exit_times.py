"""Integrator statistics against closed forms.

Three short experiments with the stopped-diffusion engine:

1. the mean first-exit time of a disk against its closed form,
2. exit times scaling with the area of the region,
3. the boundary-shift rule beating the naive first-overshoot rule.

All three use the same scoring path as production assembly runs.
"""

import numpy as np

from pddsparse import (
    GOBET_MENOZZI,
    MIXED,
    DiskRegion,
    IntegratorConfig,
    RectRegion,
    exit_time_problem,
    make_streams,
    run_batch,
)


def scores_of(problem, region, *, h, n, rule=GOBET_MENOZZI, seed=0):
    streams = make_streams((seed, 0), n)
    cfg = IntegratorConfig(h=h, stopping_rule=rule)
    out = run_batch(region, (0.0, 0.0), problem, cfg, streams)
    return out


# --- 1: disk exit time ---------------------------------------------------
problem = exit_time_problem("disk", size=1.0)
out = scores_of(problem, DiskRegion((0.0, 0.0), 1.0), h=1e-3, n=20000)
sc = problem.g(0, 0) * out.primary.y + out.primary.z
mean, se = sc.mean(), sc.std(ddof=1) / np.sqrt(len(sc))
exact = problem.u_exact(0.0, 0.0)
print("disk radius 1, started at the centre:")
print(f"  mean exit time {mean:.5f} +- {se:.5f}  (exact {exact:.5f})")

# --- 2: area scaling -----------------------------------------------------
print("\nexit time scales with the region's area:")
means = {}
for side in (1.0, 2.0):
    problem = exit_time_problem("square", size=side)
    region = RectRegion.box((0.0, side, 0.0, side))
    streams = make_streams((1, 0), 4000)
    cfg = IntegratorConfig(h=2e-4 * side * side)
    centre = (side / 2.0, side / 2.0)
    out = run_batch(region, centre, problem, cfg, streams)
    means[side] = float(out.primary.z.mean())
    print(f"  side {side:.0f}: mean exit time {means[side]:.5f} "
          f"(exact {float(problem.u_exact(*centre)):.5f})")
print(f"  ratio side-2/side-1: {means[2.0] / means[1.0]:.3f} (areas: 4.0)")

# --- 3: the boundary-shift rule ------------------------------------------
# In mixed mode each trajectory records two exits: the inward-shifted
# boundary (first order weak) and the naive first overshoot (order 1/2).
problem = exit_time_problem("disk", size=1.0)
out = scores_of(problem, DiskRegion((0.0, 0.0), 1.0), h=0.01, n=20000,
                rule=MIXED)
exact = float(problem.u_exact(0.0, 0.0))
for name, payload in (("shifted boundary", out.primary), ("naive", out.em)):
    sc = payload.z
    bias = sc.mean() - exact
    se = sc.std(ddof=1) / np.sqrt(len(sc))
    print(f"\n  {name:16s} h=0.01: bias {bias:+.5f} +- {se:.5f}")
print("\nthe shifted-boundary bias is an order of magnitude smaller at the")
print("same timestep, which is what makes coarse warm-up phases viable.")
