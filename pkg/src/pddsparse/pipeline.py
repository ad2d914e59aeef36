"""Three-phase pipeline: warm-up assembly, calibration, production run.

Phase I assembles and solves the interfacial system with uniform (h0, N0),
then solves every subdomain to obtain the warm-up field u0. Phase II runs
mixed-rule trajectories per knot, scored through u0, to set per-knot
timesteps h_i and trajectory counts N_i and to build the control variate
F = sigma^T grad(u0). Phase III re-assembles with those parameters and the
control variate, solves, and produces the final field.

Every phase writes its artifacts under the output directory (Matrix Market
system, CSV solutions and row statistics, JSON calibration report and
metrics document); phases can be re-run individually against the artifacts
of earlier phases. Job ids are globally unique across phases and derived
only from the configuration, so any subset of phases is bitwise
reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import (
    AssemblyParams,
    InterfacialSystem,
    assemble_system,
    read_row_stats,
    write_matrix_market,
    write_row_stats,
)
from .calibration import (
    CalibrationReport,
    ClampedFieldValue,
    control_variate_from_field,
    read_calibration_json,
    run_calibration,
    score_through_surrogate,
    write_calibration_json,
)
from .geometry import DiscretisationPlan, GridSpec, build_discretisation, \
    write_plan_json
from .linear_solver import SolveReport, solve, write_solution_csv
from .problems import EllipticProblem, make_problem
from .rbf import DEFAULT_CONDITION_TARGET
from .sde import GOBET_MENOZZI, NAIVE_EM, IntegratorConfig, RectRegion, \
    make_streams, run_batch
from .spectral import GlobalField, build_global_field, sample_field_csv

PHASE_NAMES = {1: "I", 2: "II", 3: "III"}


class PhaseError(RuntimeError):
    """A pipeline phase failed; carries the phase name and the cause."""

    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"Phase {phase} failed: {cause}")
        self.phase = phase
        self.cause = cause


@dataclass
class RunConfig:
    """Validated run configuration; mirrors the JSON config file.

    The config file is a single JSON object with these keys (defaults in
    parentheses):

      problem:   registered problem name, e.g. "poisson43"
      problem_params: keyword arguments for the problem factory ({})
      grid:      {"origin": [x, y], "square_side": s, "nx": int, "ny": int,
                  "knots_per_interface": m}
      eps:       accuracy target, > 0
      n0:        warm-up trajectories per knot, a multiple of n_job
      h0:        warm-up timestep
      n_cal:     calibration trajectories per knot (n0)
      h_cal:     calibration timestep (h0)
      n_job:     trajectories per job (200)
      base_seed: 64-bit reproducibility seed (0)
      workers:   worker processes, >= 1 (1)
      phases:    "I" | "II" | "III" | "all" ("all")
      out_dir:   artifact directory ("pddsparse_out")
      fault_rate, retry_budget: fault-injection testing knobs (0.0, 3)
      stopping_rule: "gobet_menozzi" | "naive_em" ("gobet_menozzi")
      p_warm, p_final: collocation order per subdomain (16, 32)
      cv_mode:   control-variate gradient source, "table" | "spectral"
      cv_cells:  look-up-table cells per square side (64)
      solver_method: "sparse_lu" | "dense_lu" | "gmres" ("sparse_lu")
      max_steps: per-trajectory step cap (None = area-scaled default)
      field_resolution: sample grid for field CSV output (101)
    """

    problem: str
    grid: GridSpec
    eps: float
    n0: int
    h0: float
    problem_params: dict = field(default_factory=dict)
    n_cal: int | None = None
    h_cal: float | None = None
    n_job: int = 200
    base_seed: int = 0
    workers: int = 1
    phases: str = "all"
    out_dir: str = "pddsparse_out"
    fault_rate: float = 0.0
    retry_budget: int = 3
    stopping_rule: str = GOBET_MENOZZI
    p_warm: int = 16
    p_final: int = 32
    cv_mode: str = "table"
    cv_cells: int = 64
    solver_method: str = "sparse_lu"
    max_steps: int | None = None
    field_resolution: int = 101
    condition_target: float = DEFAULT_CONDITION_TARGET

    def __post_init__(self):
        if self.n_cal is None:
            self.n_cal = self.n0
        if self.h_cal is None:
            self.h_cal = self.h0
        self.validate()

    def validate(self) -> None:
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.n_job <= 0:
            raise ValueError("n_job must be positive")
        if self.n0 <= 0 or self.n0 % self.n_job:
            raise ValueError(
                f"n0={self.n0} must be a positive multiple of n_job={self.n_job}"
            )
        if self.n_cal <= 0 or self.n_cal % self.n_job:
            raise ValueError(
                f"n_cal={self.n_cal} must be a positive multiple of "
                f"n_job={self.n_job}"
            )
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.h0 <= 0 or self.h_cal <= 0:
            raise ValueError("timesteps must be positive")
        if self.phases not in ("I", "II", "III", "all"):
            raise ValueError(f"unknown phase selection {self.phases!r}")
        if self.stopping_rule not in (GOBET_MENOZZI, NAIVE_EM):
            raise ValueError(
                f"stopping_rule must be {GOBET_MENOZZI!r} or {NAIVE_EM!r}"
            )

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        grid_doc = doc.pop("grid", None)
        if grid_doc is None:
            raise ValueError("config needs a 'grid' object")
        grid = GridSpec(origin=tuple(grid_doc.get("origin", (0.0, 0.0))),
                        square_side=float(grid_doc["square_side"]),
                        nx=int(grid_doc["nx"]), ny=int(grid_doc["ny"]),
                        knots_per_interface=int(grid_doc["knots_per_interface"]))
        known = {f for f in cls.__dataclass_fields__} - {"grid"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        missing = {"problem", "eps", "n0", "h0"} - set(doc)
        if missing:
            raise ValueError(f"config missing required keys: {sorted(missing)}")
        return cls(grid=grid, **doc)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__
               if k != "grid"}
        g = self.grid
        doc["grid"] = {"origin": list(g.origin), "square_side": g.square_side,
                       "nx": g.nx, "ny": g.ny,
                       "knots_per_interface": g.knots_per_interface}
        return doc

    def make_problem(self) -> EllipticProblem:
        return make_problem(self.problem, **self.problem_params)

    def phase_set(self, override: str | None = None) -> set[int]:
        sel = override or self.phases
        if sel == "all":
            return {1, 2, 3}
        return {{"I": 1, "II": 2, "III": 3}[sel]}

    def jobs_per_knot_warmup(self) -> int:
        return self.n0 // self.n_job

    def phase2_job_start(self, n_knots: int) -> int:
        return n_knots * self.jobs_per_knot_warmup()

    def phase3_job_start(self, n_knots: int) -> int:
        return self.phase2_job_start(n_knots) \
            + n_knots * (self.n_cal // self.n_job)


@dataclass
class PhaseReport:
    """One assembly phase: system, solve report, nodal solution, field."""

    system: InterfacialSystem
    solve: SolveReport
    u: np.ndarray
    field: GlobalField
    timings: dict

    @property
    def total_trajectories(self) -> int:
        return int(sum(st.n for st in self.system.stats))

    def rhs_plain(self) -> np.ndarray:
        """Row means without the control-variate correction term."""
        return np.array([st.b_plain for st in self.system.stats])

    def stat_array(self, name: str) -> np.ndarray:
        """Per-row statistic as an array, e.g. ``stat_array("variance")``."""
        return np.array([getattr(st, name) for st in self.system.stats])


@dataclass
class PipelineResult:
    config: RunConfig
    plan: DiscretisationPlan
    problem: EllipticProblem
    phase1: PhaseReport | None = None
    calibration: CalibrationReport | None = None
    phase3: PhaseReport | None = None
    metrics: dict = field(default_factory=dict)


def _phase_dir(out: Path, phase: int) -> Path:
    d = out / f"phase{phase}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_phase_artifacts(cfg: RunConfig, plan, problem, report: PhaseReport,
                           out: Path, phase: int) -> None:
    d = _phase_dir(out, phase)
    write_matrix_market(report.system, d / "system.mtx")
    write_row_stats(report.system, d / "row_stats.csv")
    write_solution_csv(plan, report.u, d / "solution.csv",
                       u_exact=problem.u_exact)
    if phase == 3:
        sample_field_csv(report.field, d / "field.csv",
                         resolution=cfg.field_resolution,
                         u_exact=problem.u_exact)


def _load_phase1_solution(out: Path, plan) -> np.ndarray:
    path = out / "phase1" / "solution.csv"
    if not path.exists():
        raise FileNotFoundError(
            f"phase I artifact {path} not found; run phase I first"
        )
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[0] != plan.n:
        raise ValueError(
            f"{path} holds {rows.shape[0]} knots, plan has {plan.n}"
        )
    return rows[:, 3]


def _load_calibration_params(out: Path, plan) -> AssemblyParams:
    path = out / "phase2" / "calibration.json"
    if not path.exists():
        raise FileNotFoundError(
            f"phase II artifact {path} not found; run phase II first"
        )
    with open(path) as fh:
        doc = json.load(fh)
    h = np.asarray(doc["knots"]["h"], dtype=float)
    n_traj = np.asarray(doc["knots"]["n_traj"], dtype=np.int64)
    if len(h) != plan.n:
        raise ValueError(f"{path} holds {len(h)} knots, plan has {plan.n}")
    return AssemblyParams(h=h, n_traj=n_traj)


def _run_assembly_phase(cfg: RunConfig, plan, problem, params, *, phase: int,
                        job_id_start: int, control_variate, p: int
                        ) -> PhaseReport:
    timings = {}
    t0 = time.perf_counter()
    system = assemble_system(
        plan, problem, params, n_job=cfg.n_job, base_seed=cfg.base_seed,
        job_id_start=job_id_start, control_variate=control_variate,
        stopping_rule=cfg.stopping_rule, workers=cfg.workers,
        fault_rate=cfg.fault_rate, retry_budget=cfg.retry_budget,
        max_steps=cfg.max_steps, condition_target=cfg.condition_target)
    timings["assembly"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    report = solve(system, method=cfg.solver_method)
    timings["solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fld = build_global_field(plan, problem, report.u, p=p,
                             condition_target=cfg.condition_target)
    timings["subdomains"] = time.perf_counter() - t0
    return PhaseReport(system=system, solve=report, u=report.u, field=fld,
                       timings=timings)


def run_pipeline(config: RunConfig, phase_override: str | None = None
                 ) -> PipelineResult:
    """Run the selected phases and write their artifacts.

    Later phases read earlier phases' results from memory when run in the
    same call, or from the artifact directory otherwise.
    """
    phases = config.phase_set(phase_override)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = build_discretisation(config.grid)
    problem = config.make_problem()
    result = PipelineResult(config=config, plan=plan, problem=problem)

    with open(out / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")
    write_plan_json(plan, out / "plan.json")

    u0 = None
    if 1 in phases:
        try:
            params0 = AssemblyParams.uniform(plan.n, config.h0, config.n0)
            result.phase1 = _run_assembly_phase(
                config, plan, problem, params0, phase=1, job_id_start=0,
                control_variate=None, p=config.p_warm)
        except Exception as exc:
            raise PhaseError("I", exc) from exc
        _write_phase_artifacts(config, plan, problem, result.phase1, out, 1)
        u0 = result.phase1.u

    warm_field = result.phase1.field if result.phase1 is not None else None
    cv = None

    def _warmup(p_order):
        nonlocal u0, warm_field, cv
        if u0 is None:
            u0 = _load_phase1_solution(out, plan)
        if warm_field is None:
            warm_field = build_global_field(
                plan, problem, u0, p=p_order,
                condition_target=config.condition_target)
        if cv is None:
            cv = control_variate_from_field(
                warm_field, problem, mode=config.cv_mode,
                cells_per_square=config.cv_cells)
        return warm_field, cv

    if 2 in phases:
        try:
            fld, cv = _warmup(config.p_warm)
            t0 = time.perf_counter()
            result.calibration = run_calibration(
                plan, problem, ClampedFieldValue(fld), eps=config.eps,
                h_cal=config.h_cal,
                n_cal=config.n_cal, n_job=config.n_job,
                base_seed=config.base_seed,
                job_id_start=config.phase2_job_start(plan.n),
                h_cap=config.h0, control_variate=cv, workers=config.workers,
                fault_rate=config.fault_rate,
                retry_budget=config.retry_budget, max_steps=config.max_steps)
            cal_time = time.perf_counter() - t0
        except PhaseError:
            raise
        except Exception as exc:
            raise PhaseError("II", exc) from exc
        d = _phase_dir(out, 2)
        write_calibration_json(result.calibration, d / "calibration.json")
        result.metrics.setdefault("wall_times", {})["phase_II"] = {
            "calibration": cal_time}

    if 3 in phases:
        try:
            _, cv = _warmup(config.p_warm)
            if result.calibration is not None:
                params3 = result.calibration.params()
            else:
                params3 = _load_calibration_params(out, plan)
            result.phase3 = _run_assembly_phase(
                config, plan, problem, params3, phase=3,
                job_id_start=config.phase3_job_start(plan.n),
                control_variate=cv, p=config.p_final)
        except PhaseError:
            raise
        except Exception as exc:
            raise PhaseError("III", exc) from exc
        _write_phase_artifacts(config, plan, problem, result.phase3, out, 3)

    result.metrics = report_run(result)
    with open(out / "metrics.json", "w") as fh:
        json.dump(result.metrics, fh, indent=2)
        fh.write("\n")
    return result


def _load_phase_report(cfg: RunConfig, plan, problem, out: Path, phase: int,
                       p: int, jobs_used: int) -> PhaseReport:
    import scipy.io

    d = out / f"phase{phase}"
    mat = scipy.io.mmread(d / "system.mtx").tocoo()
    rhs, stats = read_row_stats(d / "row_stats.csv")
    system = InterfacialSystem(n=plan.n, rows=mat.row.astype(np.int64),
                               cols=mat.col.astype(np.int64), vals=mat.data,
                               rhs=rhs, stats=stats, jobs_used=jobs_used)
    report = solve(system, method=cfg.solver_method)
    fld = build_global_field(plan, problem, report.u, p=p,
                             condition_target=cfg.condition_target)
    return PhaseReport(system=system, solve=report, u=report.u, field=fld,
                       timings={})


def load_pipeline_result(out_dir) -> PipelineResult:
    """Reconstruct a finished run from its artifact directory.

    The sparse system, row statistics, calibration report, and metrics are
    read back as written; the linear solve and the global field are recomputed
    deterministically from them. Phase wall times are only available through
    the metrics document.
    """
    out = Path(out_dir)
    config = RunConfig.from_file(out / "config.json")
    plan = build_discretisation(config.grid)
    problem = config.make_problem()
    result = PipelineResult(config=config, plan=plan, problem=problem)
    metrics_path = out / "metrics.json"
    if metrics_path.exists():
        with open(metrics_path) as fh:
            result.metrics = json.load(fh)
    if (out / "phase1" / "system.mtx").exists():
        jobs = result.metrics.get("phase_I", {}).get("jobs", 0)
        result.phase1 = _load_phase_report(config, plan, problem, out, 1,
                                           config.p_warm, jobs)
    if (out / "phase2" / "calibration.json").exists():
        result.calibration = read_calibration_json(
            out / "phase2" / "calibration.json")
    if (out / "phase3" / "system.mtx").exists():
        jobs = result.metrics.get("phase_III", {}).get("jobs", 0)
        result.phase3 = _load_phase_report(config, plan, problem, out, 3,
                                           config.p_final, jobs)
    return result


def measure_realized_reduction(result: PipelineResult,
                               base_seed: int | None = None,
                               knots=None) -> np.ndarray:
    """Measured per-knot variance-reduction factor at production parameters.

    For each knot, an independent batch of shifted-rule trajectories is run
    with the calibrated timestep and trajectory count, scored through the
    warm-up surrogate, and the realized drop var(score) / var(score + xi) is
    returned. The calibration report's ``reduction`` column holds the
    corresponding predicted floor per knot, so the two arrays compare
    directly. Requires the warm-up field and calibration report; cost is
    comparable to re-running the production assembly.
    """
    if result.phase1 is None or result.calibration is None:
        raise ValueError("measuring the realized reduction needs the warm-up "
                         "field and the calibration report")
    cfg = result.config
    plan, problem, cal = result.plan, result.problem, result.calibration
    u0 = ClampedFieldValue(result.phase1.field)
    cv = control_variate_from_field(result.phase1.field, problem)
    if base_seed is None:
        base_seed = cfg.base_seed
    if knots is None:
        knots = range(plan.n)
    realized = np.full(plan.n, np.nan)
    for knot in knots:
        region = RectRegion.from_patch(plan.patches[knot])
        n_i = int(cal.n_traj[knot])
        icfg = IntegratorConfig(h=float(cal.h[knot]),
                                stopping_rule=GOBET_MENOZZI,
                                control_variate=cv)
        streams = make_streams((base_seed, knot, 0xD1A6), n_i)
        out = run_batch(region, plan.xy[knot], problem, icfg, streams)
        scores, valid = score_through_surrogate(out.primary, problem, u0)
        xi = out.primary.xi[valid]
        if len(scores) < 2:
            continue
        denom = (scores + xi).var(ddof=1)
        if denom > 0.0:
            realized[knot] = scores.var(ddof=1) / denom
    return realized


def _nodal_error_block(plan, u, problem, eps) -> dict | None:
    if problem.u_exact is None:
        return None
    x = plan.xy[:plan.n, 0]
    y = plan.xy[:plan.n, 1]
    err = np.abs(u - np.asarray(problem.u_exact(x, y), dtype=float))
    counts, edges = np.histogram(err, bins=10)
    return {
        "max_abs_error": float(err.max()),
        "rmse": float(np.sqrt(np.mean(err * err))),
        "fraction_under_eps": float(np.mean(err < eps)),
        "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
    }


def _phase_block(cfg: RunConfig, plan, problem, report: PhaseReport) -> dict:
    stats = report.system.stats
    return {
        "n": report.system.n,
        "nodal_errors": _nodal_error_block(plan, report.u, problem, cfg.eps),
        "total_trajectories": report.total_trajectories,
        "jobs": report.system.jobs_used,
        "nonzero_fraction": report.system.nonzero_fraction,
        "condition": report.solve.condition,
        "solver": {
            "method": report.solve.method,
            "residual_inf": report.solve.residual_inf,
            "iterations": report.solve.iterations,
        },
        "mean_row_variance": float(np.mean([st.variance for st in stats])),
        "failures": int(sum(st.n_failed for st in stats)),
        "resampled": int(sum(st.n_resampled for st in stats)),
        "extrapolated_exits": int(sum(st.extrapolated for st in stats)),
        "interface_mismatch": report.field.interface_mismatch,
        "wall_times": report.timings,
    }


def report_run(result: PipelineResult) -> dict:
    """Metrics document for the executed phases."""
    cfg = result.config
    plan = result.plan
    m_dofs = cfg.p_final ** 2 * cfg.grid.nx * cfg.grid.ny
    doc = {
        "problem": cfg.problem,
        "eps": cfg.eps,
        "base_seed": cfg.base_seed,
        "n_interfacial": plan.n,
        "subdomain_dofs": m_dofs,
        "shrinkage": 1.0 - plan.n / m_dofs,
        "wall_times": dict(result.metrics.get("wall_times", {})),
    }
    if result.phase1 is not None:
        doc["phase_I"] = _phase_block(cfg, plan, result.problem, result.phase1)
        doc["wall_times"]["phase_I"] = result.phase1.timings
    if result.calibration is not None:
        cal = result.calibration
        doc["phase_II"] = {
            "mean_bias": cal.mean_bias,
            "max_bias": float(cal.bias.max()),
            "mean_variance_reduction": cal.mean_reduction,
            "mean_h": float(cal.h.mean()),
            "min_h": float(cal.h.min()),
            "total_trajectories_planned": int(cal.n_traj.sum()),
            "jobs": cal.jobs_used,
        }
    if result.phase3 is not None:
        doc["phase_III"] = _phase_block(cfg, plan, result.problem,
                                        result.phase3)
        doc["wall_times"]["phase_III"] = result.phase3.timings
    return doc
