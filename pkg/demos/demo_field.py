"""Chebyshev subdomain solves and the assembled global field.

Given interfacial nodal values (here: taken from the known solution, so
the Monte Carlo stage is bypassed), each square subdomain is solved on a
Chebyshev-Gauss-Lobatto tensor grid with interface traces interpolated
from the nodal values, and the per-square grids combine into one global
field with values and gradients anywhere in the domain.
"""

import numpy as np

from pddsparse import GridSpec, build_discretisation, build_global_field, \
    poisson_manufactured

problem = poisson_manufactured()
plan = build_discretisation(GridSpec(origin=(-100.0, -100.0),
                                     square_side=50.0, nx=4, ny=4,
                                     knots_per_interface=16))
print(f"4x4 side-50 squares, {plan.n} interfacial knots")

# exact nodal values stand in for a Monte Carlo solve
x, y = plan.xy[:plan.n, 0], plan.xy[:plan.n, 1]
u_nodal = np.asarray(problem.u_exact(x, y), dtype=float)

for p in (8, 16, 24):
    field = build_global_field(plan, problem, u_nodal, p=p)
    gx = np.linspace(-99.0, 99.0, 41)
    X, Y = np.meshgrid(gx, gx)
    err = np.abs(field.value(X, Y) - problem.u_exact(X, Y))
    print(f"  collocation order p = {p:2d}: max field error {err.max():.2e} "
          f"(interface mismatch {field.interface_mismatch:.1e})")

field = build_global_field(plan, problem, u_nodal, p=24)
gxv, gyv = field.gradient(12.5, -37.5)
ex, ey = problem.grad_u_exact(12.5, -37.5)
print(f"\ngradient at (12.5, -37.5): ({gxv:+.6f}, {gyv:+.6f})")
print(f"exact:                     ({float(ex):+.6f}, {float(ey):+.6f})")

# errors concentrate where the interpolated interface traces are least
# accurate, not in the spectral interiors: raise the knot density and the
# field follows.
for m in (8, 32):
    plan_m = build_discretisation(GridSpec(origin=(-100.0, -100.0),
                                           square_side=50.0, nx=4, ny=4,
                                           knots_per_interface=m))
    xm, ym = plan_m.xy[:plan_m.n, 0], plan_m.xy[:plan_m.n, 1]
    field_m = build_global_field(plan_m, problem,
                                 np.asarray(problem.u_exact(xm, ym)), p=24)
    gx = np.linspace(-99.0, 99.0, 41)
    X, Y = np.meshgrid(gx, gx)
    err = np.abs(field_m.value(X, Y) - problem.u_exact(X, Y))
    print(f"  m = {m:2d} knots per interface: max field error {err.max():.2e}")
