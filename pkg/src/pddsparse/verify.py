"""Self-contained oracle suites behind ``pddsparse verify``.

Each suite checks the stochastic and spectral machinery against quantities
known in closed form (cardinal-function deltas, first-exit times of simple
regions, weak-order bias ordering, spectral convergence, bitwise
determinism). They are sized for interactive runtimes; the test suite
carries the full-strength versions.
"""

from __future__ import annotations

import numpy as np

from .assembly import AssemblyParams, assemble_system
from .geometry import GridSpec, build_discretisation
from .problems import exit_time_problem, laplace_const, poisson_manufactured
from .rbf import cardinal_values, tuned_stencil
from .sde import (
    DiskRegion,
    IntegratorConfig,
    MIXED,
    RectRegion,
    estimate_statistics,
    make_streams,
    run_batch,
)
from .spectral import cgl_nodes, solve_subdomain

Check = tuple[str, bool, str]


def _disk_scores(n, h, seed, rule) -> np.ndarray:
    problem = exit_time_problem("disk", 1.0)
    region = DiskRegion((0.0, 0.0), 1.0)
    cfg = IntegratorConfig(h=h, stopping_rule=rule)
    out = run_batch(region, np.array([0.0, 0.0]), problem, cfg,
                    make_streams((seed,), n))
    return out


def suite_cardinal_delta() -> list[Check]:
    spec = GridSpec(origin=(0.0, 0.0), square_side=1.0, nx=3, ny=3,
                    knots_per_interface=32)
    plan = build_discretisation(spec)
    worst = 0.0
    for key in ("v", 1, 0, 1), ("h", 1, 0, 1):
        gst = plan.interface_stencil(*key)
        interp = tuned_stencil(gst.coords)
        h_mat = cardinal_values(interp, gst.coords)
        worst = max(worst,
                    float(np.abs(h_mat - np.eye(len(gst.coords))).max()))
    return [("cardinal_delta_max_1e-6", worst <= 1e-6,
             f"max|H(z_i) - delta_ij| = {worst:.3e}")]


def suite_exit_time(n: int = 20000, h: float = 1e-3,
                    seed: int = 2024) -> list[Check]:
    out = _disk_scores(n, h, seed, "gobet_menozzi")
    scores = out.primary.dirichlet_scores(exit_time_problem("disk", 1.0))
    stats = estimate_statistics(scores)
    se = np.sqrt(stats.variance / stats.n)
    err = abs(stats.mean - 0.25)
    checks = [
        ("disk_mean_exit_time", err <= 0.01,
         f"|{stats.mean:.5f} - 0.25| = {err:.5f} (<= 0.01)"),
        ("analytic_inside_3_sigma", err <= 3 * se,
         f"error {err:.5f} vs 3*SE {3 * se:.5f}"),
    ]
    return checks


def suite_area_scaling(n: int = 4000, h: float = 5e-4,
                       seed: int = 7) -> list[Check]:
    means = {}
    for side in (1.0, 2.0):
        problem = exit_time_problem("square", side)
        region = RectRegion.box((0.0, side, 0.0, side))
        cfg = IntegratorConfig(h=h * side * side, stopping_rule="gobet_menozzi")
        out = run_batch(region, np.array([side / 2, side / 2]), problem, cfg,
                        make_streams((seed, int(side)), n))
        means[side] = float(np.nanmean(
            out.primary.dirichlet_scores(problem)))
    ratio = means[2.0] / means[1.0]
    return [("exit_time_scales_with_area", 3.6 <= ratio <= 4.4,
             f"mean exit time ratio side-2/side-1 = {ratio:.3f}")]


def suite_weak_order(n: int = 40000, h: float = 0.01,
                     seed: int = 11) -> list[Check]:
    out = _disk_scores(n, h, seed, MIXED)
    problem = exit_time_problem("disk", 1.0)
    gm = out.primary.dirichlet_scores(problem)
    em = out.em.dirichlet_scores(problem)
    gm_bias = float(np.nanmean(gm)) - 0.25
    em_bias = float(np.nanmean(em)) - 0.25
    se = float(np.nanstd(gm, ddof=1) / np.sqrt(n))
    ordered = abs(gm_bias) < abs(em_bias)
    separated = abs(em_bias - gm_bias) > 2 * 1.96 * se
    return [
        ("gm_bias_below_em_bias", ordered,
         f"|GM bias| {abs(gm_bias):.5f} < |EM bias| {abs(em_bias):.5f}"),
        ("bias_gap_beyond_ci", separated,
         f"gap {abs(em_bias - gm_bias):.5f} vs CI width {2 * 1.96 * se:.5f}"),
    ]


def suite_spectral() -> list[Check]:
    problem = poisson_manufactured()
    bounds = (0.0, 10.0, 0.0, 10.0)

    def trace(side):
        xl, xh, yl, yh = bounds
        fixed = {"E": xh, "W": xl, "N": yh, "S": yl}[side]
        if side in ("E", "W"):
            return lambda t: problem.u_exact(
                np.full_like(np.asarray(t, float), fixed), t)
        return lambda t: problem.u_exact(
            t, np.full_like(np.asarray(t, float), fixed))

    traces = {s: trace(s) for s in "ENWS"}
    errs = {}
    for p in (8, 16):
        grid = solve_subdomain(problem, bounds, traces, p)
        ref = cgl_nodes(p)
        xx, yy = np.meshgrid(bounds[0] + 10 * ref, bounds[2] + 10 * ref)
        errs[p] = float(np.abs(grid - problem.u_exact(xx, yy)).max())
    ratio = errs[8] / max(errs[16], 1e-300)
    return [("doubling_p_cuts_error_100x", ratio >= 100.0,
             f"err(p=8)/err(p=16) = {ratio:.1f}")]


def suite_determinism(seed: int = 3) -> list[Check]:
    spec = GridSpec(origin=(0.0, 0.0), square_side=1.0, nx=2, ny=2,
                    knots_per_interface=2)
    plan = build_discretisation(spec)
    problem = laplace_const(5.0)
    params = AssemblyParams.uniform(plan.n, 0.02, 100)

    def build(workers, fault_rate):
        return assemble_system(plan, problem, params, n_job=100,
                               base_seed=seed, workers=workers,
                               fault_rate=fault_rate, retry_budget=10)

    ref = build(1, 0.0)
    rerun = build(1, 0.0)
    multi = build(2, 0.0)
    faulty = build(2, 0.2)

    def same(a, b):
        return (np.array_equal(a.vals, b.vals)
                and np.array_equal(a.rhs, b.rhs)
                and np.array_equal(a.rows, b.rows)
                and np.array_equal(a.cols, b.cols))

    return [
        ("same_seed_bitwise_equal", same(ref, rerun), "serial re-run"),
        ("worker_count_invariant", same(ref, multi), "1 vs 2 workers"),
        ("fault_injection_invariant", same(ref, faulty),
         "2 workers, 20% injected faults with retries"),
    ]


SUITES = {
    "cardinal_delta": suite_cardinal_delta,
    "exit_time": suite_exit_time,
    "area_scaling": suite_area_scaling,
    "weak_order": suite_weak_order,
    "spectral": suite_spectral,
    "determinism": suite_determinism,
}


def run_suite(name: str) -> list[Check]:
    """Run one named suite (or 'all'); returns (check, passed, detail)."""
    if name == "all":
        checks = []
        for key in SUITES:
            checks.extend(run_suite(key))
        return checks
    try:
        fn = SUITES[name]
    except KeyError:
        raise ValueError(
            f"unknown suite {name!r}; available: {sorted(SUITES)} + ['all']"
        ) from None
    return [(f"{name}/{check}", ok, detail) for check, ok, detail in fn()]
