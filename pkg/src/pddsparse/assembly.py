"""Monte Carlo assembly of the sparse interfacial system G u = b.

Each interior knot i owns one row: trajectories launched at the knot and
stopped on the patch boundary score cardinal-function values H_j at the exit
into per-stencil-node sums (the off-diagonal weights), while source terms,
Dirichlet data met on the domain boundary, Dirichlet stencil endpoints, and
control-variate increments accumulate into the right-hand side. Rows are
G_ii = 1, G_ij = -(sum of Y H_j)/N_i, b_i = (b-sum [+ xi-sum])/N_i.

Work is split into jobs of N_job trajectories; every job's result is a pure
function of (base_seed, job_id), and the reducer merges accumulators in
canonical (knot, job) order, so the assembled bytes do not depend on worker
count, scheduling, or injected faults.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse

from .geometry import SIDES, DiscretisationPlan, GridSpec, build_discretisation
from .jobs import PLAIN, PRODUCTION_CV, Job, schedule_jobs
from .problems import EllipticProblem
from .rbf import DEFAULT_CONDITION_TARGET, Stencil1D, tuned_stencil
from .sde import GOBET_MENOZZI, IntegratorConfig, RectRegion, RuleOutcome, \
    TrajectoryOutcome, make_streams, run_batch

MAX_FAILURE_FRACTION = 1e-4  # a run losing more trajectories than this aborts


@dataclass(frozen=True)
class SideScoring:
    """Scoring data for one patch side: either a Dirichlet wall or a stencil."""

    on_boundary: bool
    interp: Stencil1D | None = None
    node_ids: np.ndarray | None = None  # global knot ids, interior entries
    interior_cols: np.ndarray | None = None
    dirichlet_cols: np.ndarray | None = None
    dirichlet_values: np.ndarray | None = None  # g at stencil endpoint knots


@dataclass(frozen=True)
class RowContext:
    """Everything needed to launch and score trajectories for one row."""

    knot: int
    start: np.ndarray
    region: RectRegion
    sides: tuple[SideScoring, SideScoring, SideScoring, SideScoring]

    def interior_columns(self) -> np.ndarray:
        cols = [s.node_ids[s.interior_cols] for s in self.sides
                if not s.on_boundary]
        return np.unique(np.concatenate(cols)) if cols else np.empty(0, int)


_INTERP_CACHE: dict[tuple, Stencil1D] = {}


def build_row_context(plan: DiscretisationPlan, problem: EllipticProblem,
                      knot: int,
                      condition_target: float = DEFAULT_CONDITION_TARGET
                      ) -> RowContext:
    patch = plan.patches[knot]
    sides = []
    for side in patch.sides:
        if side.on_domain_boundary:
            sides.append(SideScoring(on_boundary=True))
            continue
        gst = plan.stencils[side.stencil_key]
        # keyed by the actual knot coordinates: stencil keys are only unique
        # within one plan, and this cache outlives any single plan
        cache_key = (gst.coords.tobytes(), condition_target)
        interp = _INTERP_CACHE.get(cache_key)
        if interp is None:
            interp = tuned_stencil(gst.coords, condition_target)
            _INTERP_CACHE[cache_key] = interp
        interior = np.nonzero(~gst.dirichlet)[0]
        dirichlet = np.nonzero(gst.dirichlet)[0]
        if gst.dirichlet.any():
            pts = plan.xy[gst.ids[dirichlet]]
            g_vals = np.asarray(problem.g(pts[:, 0], pts[:, 1]), dtype=float)
        else:
            g_vals = np.empty(0)
        sides.append(SideScoring(on_boundary=False, interp=interp,
                                 node_ids=gst.ids, interior_cols=interior,
                                 dirichlet_cols=dirichlet,
                                 dirichlet_values=g_vals))
    return RowContext(knot=knot, start=plan.xy[knot],
                      region=RectRegion.from_patch(patch), sides=tuple(sides))


@dataclass
class RowAccumulator:
    """Mergeable per-(knot, job) sums behind one row of G and b.

    Per-trajectory score s_t is the trajectory's full right-hand-side
    contribution (Z + Dirichlet parts); xi sums are kept separate so the
    plain and variance-reduced estimates are both reportable.
    """

    knot: int
    side_sums: tuple  # per side: None (Dirichlet wall) or array over stencil
    count: int = 0
    b_sum: float = 0.0
    b_sq: float = 0.0
    xi_sum: float = 0.0
    xi_sq: float = 0.0
    b_xi: float = 0.0
    mass_sum: float = 0.0
    mass_sq: float = 0.0
    extrapolated: int = 0
    n_failed: int = 0
    n_resampled: int = 0

    @classmethod
    def for_context(cls, ctx: RowContext) -> "RowAccumulator":
        sums = tuple(None if s.on_boundary else np.zeros(len(s.node_ids))
                     for s in ctx.sides)
        return cls(knot=ctx.knot, side_sums=sums)

    def merge(self, other: "RowAccumulator") -> "RowAccumulator":
        if other.knot != self.knot:
            raise ValueError(
                f"cannot merge accumulators of knots {self.knot} and {other.knot}"
            )
        for mine, theirs in zip(self.side_sums, other.side_sums):
            if mine is not None:
                mine += theirs
        self.count += other.count
        self.b_sum += other.b_sum
        self.b_sq += other.b_sq
        self.xi_sum += other.xi_sum
        self.xi_sq += other.xi_sq
        self.b_xi += other.b_xi
        self.mass_sum += other.mass_sum
        self.mass_sq += other.mass_sq
        self.extrapolated += other.extrapolated
        self.n_failed += other.n_failed
        self.n_resampled += other.n_resampled
        return self


def score_batch_into_row(acc: RowAccumulator, rule: RuleOutcome,
                         ctx: RowContext, problem: EllipticProblem
                         ) -> RowAccumulator:
    """Vectorized scoring of one job's exits into the accumulator."""
    valid = rule.side >= 0
    b_contrib = np.where(valid, rule.z, 0.0)
    mass = np.zeros(len(rule.side))
    for s_idx, side in enumerate(ctx.sides):
        m = valid & (rule.side == s_idx)
        if not m.any():
            continue
        yv = rule.y[m]
        if side.on_boundary:
            b_contrib[m] += yv * problem.g(rule.x[m], rule.y_coord[m])
            mass[m] = 1.0
            continue
        arcs = rule.arc[m]
        h_vals = side.interp.cardinal_values(arcs)
        mass[m] = h_vals.sum(axis=1)
        acc.extrapolated += int(side.interp.extrapolation_mask(arcs).sum())
        if len(side.dirichlet_cols):
            acc.side_sums[s_idx][side.interior_cols] += \
                yv @ h_vals[:, side.interior_cols]
            b_contrib[m] += yv * (h_vals[:, side.dirichlet_cols]
                                  @ side.dirichlet_values)
        else:
            acc.side_sums[s_idx][:] += yv @ h_vals
    b = b_contrib[valid]
    xi = rule.xi[valid]
    mv = mass[valid]
    acc.count += int(valid.sum())
    acc.b_sum += float(b.sum())
    acc.b_sq += float((b * b).sum())
    acc.xi_sum += float(xi.sum())
    acc.xi_sq += float((xi * xi).sum())
    acc.b_xi += float((b * xi).sum())
    acc.mass_sum += float(mv.sum())
    acc.mass_sq += float((mv * mv).sum())
    acc.n_failed += int((~valid).sum())
    return acc


def score_trajectory_into_row(acc: RowAccumulator, outcome: TrajectoryOutcome,
                              ctx: RowContext, problem: EllipticProblem
                              ) -> RowAccumulator:
    """Single-trajectory scoring; the batch path is the production interface."""
    s_idx = SIDES.index(outcome.exit.side)
    side = ctx.sides[s_idx]
    b_contrib = outcome.z_final
    if side.on_boundary:
        if not outcome.exit.on_domain_boundary:
            raise ValueError(
                f"exit on side {outcome.exit.side} of knot {ctx.knot} has no "
                f"stencil but is not on the domain boundary (discretisation bug)"
            )
        px, py = outcome.exit.point
        b_contrib += outcome.y_final * float(problem.g(px, py))
        mass = 1.0
    else:
        h_vals = side.interp.cardinal_values(outcome.exit.arc)
        mass = float(h_vals.sum())
        acc.extrapolated += int(side.interp.extrapolation_mask(outcome.exit.arc))
        if len(side.dirichlet_cols):
            acc.side_sums[s_idx][side.interior_cols] += \
                outcome.y_final * h_vals[side.interior_cols]
            b_contrib += outcome.y_final * float(
                h_vals[side.dirichlet_cols] @ side.dirichlet_values)
        else:
            acc.side_sums[s_idx][:] += outcome.y_final * h_vals
    acc.count += 1
    acc.b_sum += b_contrib
    acc.b_sq += b_contrib * b_contrib
    acc.xi_sum += outcome.xi
    acc.xi_sq += outcome.xi * outcome.xi
    acc.b_xi += b_contrib * outcome.xi
    acc.mass_sum += mass
    acc.mass_sq += mass * mass
    return acc


@dataclass(frozen=True)
class RowStats:
    variance: float  # per-trajectory score variance (with xi when CV active)
    variance_plain: float  # same without the control-variate term
    b_plain: float  # mean score without the control-variate term
    n: int
    h: float
    extrapolated: int
    mass_mean: float
    mass_se: float
    n_failed: int
    n_resampled: int


def finalize_row(acc: RowAccumulator, ctx: RowContext, h: float,
                 use_control_variate: bool = False):
    """Reduce an accumulator to (columns, values, b_i, stats)."""
    n = acc.count
    if n < 1:
        raise ValueError(f"row {acc.knot} finalized with zero trajectories")
    col_sums: dict[int, float] = {}
    for side, sums in zip(ctx.sides, acc.side_sums):
        if side.on_boundary:
            continue
        for col in side.interior_cols:
            j = int(side.node_ids[col])
            col_sums[j] = col_sums.get(j, 0.0) + sums[col]
    cols = np.array(sorted(col_sums), dtype=int)
    vals = np.array([-col_sums[j] / n for j in cols])
    b_total = acc.b_sum + (acc.xi_sum if use_control_variate else 0.0)
    b_i = b_total / n
    mean_plain = acc.b_sum / n
    variance_plain = max(acc.b_sq - n * mean_plain * mean_plain, 0.0) \
        / max(n - 1, 1)
    if use_control_variate:
        sq = acc.b_sq + 2.0 * acc.b_xi + acc.xi_sq
        variance = max(sq - n * b_i * b_i, 0.0) / max(n - 1, 1)
    else:
        variance = variance_plain
    mass_mean = acc.mass_sum / n
    mass_var = max(acc.mass_sq - n * mass_mean * mass_mean, 0.0) / max(n - 1, 1)
    stats = RowStats(variance=variance, variance_plain=variance_plain,
                     b_plain=mean_plain, n=n, h=h,
                     extrapolated=acc.extrapolated, mass_mean=mass_mean,
                     mass_se=float(np.sqrt(mass_var / n)),
                     n_failed=acc.n_failed, n_resampled=acc.n_resampled)
    return cols, vals, b_i, stats


@dataclass(frozen=True)
class AssemblyParams:
    """Per-knot Monte Carlo parameters: timestep h_i and trajectory count N_i."""

    h: np.ndarray
    n_traj: np.ndarray

    @classmethod
    def uniform(cls, n_rows: int, h: float, n_traj: int) -> "AssemblyParams":
        return cls(h=np.full(n_rows, float(h)),
                   n_traj=np.full(n_rows, int(n_traj)))

    def validate(self, n_rows: int, n_job: int) -> None:
        if len(self.h) != n_rows or len(self.n_traj) != n_rows:
            raise ValueError(
                f"params cover {len(self.h)} rows, plan has {n_rows}"
            )
        if not (self.h > 0).all():
            raise ValueError("all h_i must be positive")
        if not (self.n_traj > 0).all():
            raise ValueError("all N_i must be positive")
        off = np.nonzero(self.n_traj % n_job)[0]
        if len(off):
            raise ValueError(
                f"N_i must be a multiple of N_job={n_job}; "
                f"offending knots {off[:5].tolist()}"
            )


@dataclass
class InterfacialSystem:
    """Sparse interfacial system with per-row Monte Carlo statistics."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    rhs: np.ndarray
    stats: list[RowStats]
    jobs_used: int = 0

    def to_csr(self) -> scipy.sparse.csr_matrix:
        mat = scipy.sparse.coo_matrix(
            (self.vals, (self.rows, self.cols)), shape=(self.n, self.n))
        out = mat.tocsr()
        out.sum_duplicates()
        return out

    @property
    def nonzero_fraction(self) -> float:
        return self.to_csr().nnz / float(self.n * self.n)


class AssemblyContext:
    """Picklable job runner: rebuilds plan and row caches lazily per process."""

    def __init__(self, spec: GridSpec, problem: EllipticProblem, n_job: int,
                 base_seed: int, stopping_rule: str = GOBET_MENOZZI,
                 control_variate=None, max_steps: int | None = None,
                 condition_target: float = DEFAULT_CONDITION_TARGET):
        self.spec = spec
        self.problem = problem
        self.n_job = n_job
        self.base_seed = base_seed
        self.stopping_rule = stopping_rule
        self.control_variate = control_variate
        self.max_steps = max_steps
        self.condition_target = condition_target
        self._plan = None
        self._rows = {}

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_plan"] = None
        state["_rows"] = {}
        return state

    @property
    def plan(self) -> DiscretisationPlan:
        if self._plan is None:
            self._plan = build_discretisation(self.spec)
        return self._plan

    def row_context(self, knot: int) -> RowContext:
        ctx = self._rows.get(knot)
        if ctx is None:
            ctx = build_row_context(self.plan, self.problem, knot,
                                    self.condition_target)
            self._rows[knot] = ctx
        return ctx

    def __call__(self, job: Job) -> RowAccumulator:
        ctx = self.row_context(job.knot)
        streams = make_streams((self.base_seed, job.job_id), job.n_traj)
        cfg = IntegratorConfig(h=job.h, stopping_rule=self.stopping_rule,
                               control_variate=self.control_variate,
                               max_steps=self.max_steps)
        out = run_batch(ctx.region, ctx.start, self.problem, cfg, streams)
        acc = RowAccumulator.for_context(ctx)
        score_batch_into_row(acc, out.primary, ctx, self.problem)
        acc.n_resampled += out.resampled
        return acc


def build_jobs(params: AssemblyParams, n_job: int, job_id_start: int,
               mode: str = PLAIN) -> list[Job]:
    """Canonical job list: knots ascending, then job index; ids consecutive."""
    jobs = []
    next_id = job_id_start
    for knot in range(len(params.h)):
        for _ in range(int(params.n_traj[knot]) // n_job):
            jobs.append(Job(job_id=next_id, knot=knot, mode=mode,
                            h=float(params.h[knot]), n_traj=n_job))
            next_id += 1
    return jobs


def assemble_system(plan: DiscretisationPlan, problem: EllipticProblem,
                    params: AssemblyParams, *, n_job: int, base_seed: int,
                    job_id_start: int = 0, control_variate=None,
                    stopping_rule: str = GOBET_MENOZZI, workers: int = 1,
                    fault_rate: float = 0.0, retry_budget: int = 3,
                    max_steps: int | None = None,
                    condition_target: float = DEFAULT_CONDITION_TARGET
                    ) -> InterfacialSystem:
    """Assemble G and b over all interior knots.

    Bitwise reproducible for fixed (plan, problem, params, n_job, base_seed,
    job_id_start) regardless of worker count and injected faults.
    """
    params.validate(plan.n, n_job)
    mode = PRODUCTION_CV if control_variate is not None else PLAIN
    jobs = build_jobs(params, n_job, job_id_start, mode)
    runner = AssemblyContext(plan.spec, problem, n_job, base_seed,
                             stopping_rule=stopping_rule,
                             control_variate=control_variate,
                             max_steps=max_steps,
                             condition_target=condition_target)
    runner._plan = plan  # reuse the caller's plan in-process (not pickled)
    results = schedule_jobs(jobs, runner, workers=workers,
                            retry_budget=retry_budget, fault_rate=fault_rate,
                            base_seed=base_seed)

    merged: dict[int, RowAccumulator] = {}
    for job, acc in zip(jobs, results):  # canonical (knot, job) order
        if job.knot in merged:
            merged[job.knot].merge(acc)
        else:
            merged[job.knot] = acc

    total_traj = int(params.n_traj.sum())
    total_failed = sum(acc.n_failed for acc in merged.values())
    if total_failed > MAX_FAILURE_FRACTION * total_traj:
        raise RuntimeError(
            f"{total_failed} of {total_traj} trajectories "
            f"({total_failed / total_traj:.2%}) exceeded the step cap twice; "
            f"limit is {MAX_FAILURE_FRACTION:.2%} — decrease h or raise "
            f"max_steps"
        )

    use_cv = control_variate is not None
    rows_l, cols_l, vals_l = [], [], []
    rhs = np.zeros(plan.n)
    stats: list[RowStats] = []
    for knot in range(plan.n):
        ctx = runner.row_context(knot)
        acc = merged[knot]
        cols, vals, b_i, st = finalize_row(acc, ctx, float(params.h[knot]),
                                           use_control_variate=use_cv)
        rows_l.append(np.full(len(cols) + 1, knot))
        cols_l.append(np.concatenate(([knot], cols)))
        vals_l.append(np.concatenate(([1.0], vals)))
        rhs[knot] = b_i
        stats.append(st)
    return InterfacialSystem(
        n=plan.n,
        rows=np.concatenate(rows_l), cols=np.concatenate(cols_l),
        vals=np.concatenate(vals_l), rhs=rhs, stats=stats,
        jobs_used=len(jobs),
    )


def stencil_columns(plan: DiscretisationPlan, knot: int) -> np.ndarray:
    """Interior knot ids appearing in any stencil of ``knot``'s patch —
    the expected sparsity pattern of row ``knot`` (diagonal excluded)."""
    cols = []
    for side in plan.patches[knot].sides:
        if side.on_domain_boundary:
            continue
        gst = plan.stencils[side.stencil_key]
        cols.append(gst.ids[~gst.dirichlet])
    return np.unique(np.concatenate(cols)) if cols else np.empty(0, int)


def write_matrix_market(system: InterfacialSystem, path) -> None:
    """G in Matrix Market coordinate format at full float64 precision."""
    mat = scipy.sparse.coo_matrix(
        (system.vals, (system.rows, system.cols)),
        shape=(system.n, system.n)).tocsr()
    mat.sum_duplicates()
    scipy.io.mmwrite(path, mat.tocoo(), precision=17)


def write_row_stats(system: InterfacialSystem, path) -> None:
    """b and per-row stats as CSV, one row per knot."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["knot", "b", "variance", "n_trajectories",
                         "h", "extrapolation_count", "variance_plain",
                         "b_plain", "mass_mean", "mass_se", "n_failed",
                         "n_resampled"])
        for i, st in enumerate(system.stats):
            writer.writerow([i, repr(float(system.rhs[i])),
                             repr(float(st.variance)), st.n,
                             repr(float(st.h)), st.extrapolated,
                             repr(float(st.variance_plain)),
                             repr(float(st.b_plain)),
                             repr(float(st.mass_mean)),
                             repr(float(st.mass_se)),
                             st.n_failed, st.n_resampled])


def read_row_stats(path) -> tuple[np.ndarray, list[RowStats]]:
    """Load (rhs, stats) back from a row-stats CSV."""
    rhs = []
    stats = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rhs.append(float(row["b"]))
            stats.append(RowStats(
                variance=float(row["variance"]),
                variance_plain=float(row["variance_plain"]),
                b_plain=float(row["b_plain"]),
                n=int(row["n_trajectories"]),
                h=float(row["h"]),
                extrapolated=int(row["extrapolation_count"]),
                mass_mean=float(row["mass_mean"]),
                mass_se=float(row["mass_se"]),
                n_failed=int(row["n_failed"]),
                n_resampled=int(row["n_resampled"])))
    return np.asarray(rhs), stats
