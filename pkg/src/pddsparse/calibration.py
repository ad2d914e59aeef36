"""Per-knot calibration of timestep and trajectory count, plus the
variance-cancelling control variate built from a warm-up field.

Calibration runs a modest number of trajectories per knot under the mixed
stopping rule: each trajectory records both its boundary-shift (GM) payload
and, continuing along the same path, its first-crossing (EM) payload. Exits
are scored through the warm-up surrogate u0 (the Dirichlet data g on the
true boundary), giving per-knot estimates of

  * the timestep bias, half the mean GM-EM score gap,
  * the plain score variance V and the score/control-variate correlation rho,

from which the production parameters follow: h_i is shrunk until the
extrapolated bias meets its share of the error budget eps, and N_i covers
the residual variance V (1 - rho^2) at a three-sigma confidence, rounded to
whole jobs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .assembly import MAX_FAILURE_FRACTION, AssemblyParams
from .geometry import DiscretisationPlan, GridSpec
from .jobs import MIXED as MIXED_MODE
from .jobs import Job, schedule_jobs
from .problems import EllipticProblem
from .sde import (
    IntegratorConfig,
    MIXED,
    RectRegion,
    RuleOutcome,
    SampleStats,
    estimate_statistics,
    make_streams,
    run_batch,
)
from .spectral import GlobalField, build_gradient_table

RHO2_CAP = 1.0 - 1e-6  # keeps the variance-reduction factor finite


def estimate_bias(stats) -> float:
    """Timestep bias estimate: half the mean paired EM-GM score gap.

    The first-crossing rule overshoots and the boundary-shift rule corrects
    most of that overshoot, so the paired gap between the two scores is a
    direct measure of the timestep-induced exit error; half the gap is the
    bias attributed to the production estimate. Requires mixed-rule
    statistics.
    """
    if isinstance(stats, SampleStats):
        gap = stats.mean_em_minus_gm
    else:
        gap = estimate_statistics(stats).mean_em_minus_gm
    if gap is None:
        raise ValueError(
            "bias estimation needs mixed-rule outcomes carrying both the "
            "shifted-boundary and first-crossing scores"
        )
    return 0.5 * abs(gap)


def set_timestep(mean_diff: float, *, eps: float, h_cal: float,
                 h_cap: float | None = None) -> float:
    """Production timestep for one knot.

    The observed mean score gap shrinks linearly in h, so scaling the
    calibration step by (2 eps / 3) / |mean_diff| brings the bias within its
    budget; the result never exceeds ``h_cap`` (default: the calibration
    step itself). A zero gap keeps the cap.
    """
    if eps <= 0 or h_cal <= 0:
        raise ValueError("eps and h_cal must be positive")
    cap = h_cal if h_cap is None else h_cap
    if mean_diff == 0.0:
        return cap
    return min(cap, 2.0 * h_cal * eps / (3.0 * abs(mean_diff)))


def set_trajectory_count(variance: float, rho2: float, *, eps: float,
                         n_job: int) -> int:
    """Production trajectory count: 9 V (1 - rho^2) / eps^2, in whole jobs.

    Rounded to the nearest positive multiple of ``n_job`` (half rounds up),
    never below one job. rho^2 is capped just under 1 so a perfect control
    variate still leaves a finite count.
    """
    if eps <= 0 or n_job <= 0:
        raise ValueError("eps and n_job must be positive")
    rho2 = min(max(float(rho2), 0.0), RHO2_CAP)
    raw = 9.0 * max(float(variance), 0.0) * (1.0 - rho2) / (eps * eps)
    # the tiny relative nudge keeps exact half-way counts rounding up even
    # when the product above lands a few ulp under the boundary
    k = int(np.floor(raw / n_job * (1.0 + 1e-12) + 0.5))
    return max(k, 1) * n_job


class SigmaTGradient:
    """Control variate F = sigma^T grad(u0) from a gradient source.

    ``source`` maps point arrays to gradient component arrays; the constant
    lower-triangular diffusion factor is folded in. Picklable whenever the
    source is.
    """

    __slots__ = ("source", "s11", "s21", "s22")

    def __init__(self, source, sigma: np.ndarray):
        self.source = source
        self.s11 = float(sigma[0, 0])
        self.s21 = float(sigma[1, 0])
        self.s22 = float(sigma[1, 1])

    def __call__(self, x, y):
        gx, gy = self.source(x, y)
        return self.s11 * gx + self.s21 * gy, self.s22 * gy


class _Clamped:
    """Field queries clamped into the closed domain. Exit points may overlie
    an interface line slightly past its domain end (diagonal overshoots score
    on the extended stencil), and batch rows keep stepping after their exit;
    neither may raise."""

    __slots__ = ("field", "x_lo", "x_hi", "y_lo", "y_hi")

    def __init__(self, field: GlobalField):
        self.field = field
        ox, oy = field.origin
        self.x_lo, self.x_hi = ox, ox + field.nx * field.square_side
        self.y_lo, self.y_hi = oy, oy + field.ny * field.square_side

    def _clip(self, x, y):
        return (np.clip(x, self.x_lo, self.x_hi),
                np.clip(y, self.y_lo, self.y_hi))


class _ClampedGradient(_Clamped):
    def __call__(self, x, y):
        return self.field.gradient(*self._clip(x, y))


class ClampedFieldValue(_Clamped):
    """Nearest-point field values: the u0 surrogate handed to calibration."""

    def __call__(self, x, y):
        return self.field.value(*self._clip(x, y))


def control_variate_from_field(field: GlobalField, problem: EllipticProblem,
                               mode: str = "table",
                               cells_per_square: int = 64) -> SigmaTGradient:
    """Build F = sigma^T grad(u0) from a warm-up field.

    ``mode`` selects the gradient source: "table" samples the field onto a
    bilinear look-up table (cheap per step, the default), "spectral"
    evaluates the Chebyshev interpolant directly.
    """
    sigma = problem.constant_diffusion()
    if sigma is None:
        raise ValueError(
            "control variates require a constant diffusion matrix "
            "(the batch integrator's supported class)"
        )
    if mode == "table":
        source = build_gradient_table(field, cells_per_square)
    elif mode == "spectral":
        source = _ClampedGradient(field)
    else:
        raise ValueError(f"unknown gradient mode {mode!r}")
    return SigmaTGradient(source, sigma)


@dataclass
class KnotSamples:
    """Mixed-rule score samples for one knot, merged across its jobs."""

    knot: int
    score_gm: np.ndarray
    score_em: np.ndarray
    xi: np.ndarray
    n_failed: int = 0
    n_resampled: int = 0

    def merge(self, other: "KnotSamples") -> None:
        if other.knot != self.knot:
            raise ValueError(f"cannot merge knot {other.knot} into {self.knot}")
        self.score_gm = np.concatenate([self.score_gm, other.score_gm])
        self.score_em = np.concatenate([self.score_em, other.score_em])
        self.xi = np.concatenate([self.xi, other.xi])
        self.n_failed += other.n_failed
        self.n_resampled += other.n_resampled


def score_through_surrogate(out: RuleOutcome, problem: EllipticProblem,
                            u0) -> tuple[np.ndarray, np.ndarray]:
    """Scores Y u(exit) + Z with u taken as g on the true boundary and the
    surrogate u0 on interfaces. Returns (scores, valid mask)."""
    valid = out.side >= 0
    x = out.x[valid]
    y = out.y_coord[valid]
    dirich = out.dirichlet[valid]
    u_exit = np.empty(len(x))
    if dirich.any():
        u_exit[dirich] = np.asarray(problem.g(x[dirich], y[dirich]), float)
    interface = ~dirich
    if interface.any():
        u_exit[interface] = np.asarray(u0(x[interface], y[interface]), float)
    return out.y[valid] * u_exit + out.z[valid], valid


class CalibrationContext:
    """Picklable mixed-rule job runner scoring through the u0 surrogate."""

    def __init__(self, spec: GridSpec, problem: EllipticProblem,
                 base_seed: int, u0, control_variate=None,
                 max_steps: int | None = None):
        self.spec = spec
        self.problem = problem
        self.base_seed = base_seed
        self.u0 = u0
        self.control_variate = control_variate
        self.max_steps = max_steps
        self._plan = None
        self._regions = {}

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_plan"] = None
        state["_regions"] = {}
        return state

    @property
    def plan(self) -> DiscretisationPlan:
        if self._plan is None:
            from .geometry import build_discretisation
            self._plan = build_discretisation(self.spec)
        return self._plan

    def _region(self, knot: int) -> RectRegion:
        reg = self._regions.get(knot)
        if reg is None:
            reg = RectRegion.from_patch(self.plan.patches[knot])
            self._regions[knot] = reg
        return reg

    def __call__(self, job: Job) -> KnotSamples:
        region = self._region(job.knot)
        start = self.plan.xy[job.knot]
        streams = make_streams((self.base_seed, job.job_id), job.n_traj)
        cfg = IntegratorConfig(h=job.h, stopping_rule=MIXED,
                               control_variate=self.control_variate,
                               max_steps=self.max_steps)
        out = run_batch(region, start, self.problem, cfg, streams)
        gm, valid = score_through_surrogate(out.primary, self.problem, self.u0)
        em, _ = score_through_surrogate(out.em, self.problem, self.u0)
        return KnotSamples(
            knot=job.knot, score_gm=gm, score_em=em,
            xi=out.primary.xi[valid],
            n_failed=int((~valid).sum()), n_resampled=out.resampled,
        )


@dataclass
class CalibrationReport:
    """Per-knot calibration results and the derived production parameters."""

    eps: float
    h_cal: float
    h_cap: float
    n_cal: int
    n_job: int
    bias: np.ndarray
    variance: np.ndarray
    rho2: np.ndarray
    mean_diff: np.ndarray  # signed mean(score_em - score_gm), diagnostic
    h: np.ndarray
    n_traj: np.ndarray
    n_failed: np.ndarray
    n_resampled: np.ndarray
    jobs_used: int = 0

    @property
    def reduction(self) -> np.ndarray:
        """Projected variance-reduction factor 1 / (1 - rho^2) per knot."""
        return 1.0 / (1.0 - np.minimum(self.rho2, RHO2_CAP))

    @property
    def mean_reduction(self) -> float:
        return float(self.reduction.mean())

    @property
    def mean_bias(self) -> float:
        return float(self.bias.mean())

    def params(self) -> AssemblyParams:
        return AssemblyParams(h=self.h.copy(), n_traj=self.n_traj.copy())

    def to_json(self) -> dict:
        return {
            "eps": self.eps,
            "h_cal": self.h_cal,
            "h_cap": self.h_cap,
            "n_cal": self.n_cal,
            "n_job": self.n_job,
            "jobs_used": self.jobs_used,
            "knots": {
                "bias": self.bias.tolist(),
                "variance": self.variance.tolist(),
                "rho2": self.rho2.tolist(),
                "reduction": self.reduction.tolist(),
                "mean_diff": self.mean_diff.tolist(),
                "h": self.h.tolist(),
                "n_traj": self.n_traj.tolist(),
                "n_failed": self.n_failed.tolist(),
                "n_resampled": self.n_resampled.tolist(),
            },
            "aggregates": {
                "mean_bias": self.mean_bias,
                "max_bias": float(self.bias.max()),
                "mean_reduction": self.mean_reduction,
                "min_h": float(self.h.min()),
                "total_trajectories": int(self.n_traj.sum()),
            },
        }


def write_calibration_json(report: CalibrationReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")


def read_calibration_json(path) -> CalibrationReport:
    """Load a calibration report back from its JSON artifact."""
    with open(path) as fh:
        doc = json.load(fh)
    k = doc["knots"]
    arr = lambda name: np.asarray(k[name], dtype=float)  # noqa: E731
    iarr = lambda name: np.asarray(k[name], dtype=np.int64)  # noqa: E731
    return CalibrationReport(
        eps=doc["eps"], h_cal=doc["h_cal"], h_cap=doc["h_cap"],
        n_cal=doc["n_cal"], n_job=doc["n_job"],
        bias=arr("bias"), variance=arr("variance"), rho2=arr("rho2"),
        mean_diff=arr("mean_diff"), h=arr("h"), n_traj=iarr("n_traj"),
        n_failed=iarr("n_failed"), n_resampled=iarr("n_resampled"),
        jobs_used=doc["jobs_used"])


def run_calibration(plan: DiscretisationPlan, problem: EllipticProblem, u0,
                    *, eps: float, h_cal: float, n_cal: int, n_job: int,
                    base_seed: int, job_id_start: int = 0,
                    h_cap: float | None = None, control_variate=None,
                    workers: int = 1, fault_rate: float = 0.0,
                    retry_budget: int = 3, max_steps: int | None = None
                    ) -> CalibrationReport:
    """Mixed-rule calibration pass over every interior knot.

    Runs ``n_cal`` trajectories per knot (a whole number of jobs of
    ``n_job``), scores them through ``u0``, and derives per-knot production
    parameters. Job results are pure functions of (base_seed, job_id), so
    reports are independent of worker count and injected faults.
    """
    if n_cal <= 0 or n_cal % n_job:
        raise ValueError(
            f"n_cal={n_cal} must be a positive multiple of n_job={n_job}"
        )
    cap = h_cal if h_cap is None else h_cap
    jobs = []
    next_id = job_id_start
    for knot in range(plan.n):
        for _ in range(n_cal // n_job):
            jobs.append(Job(job_id=next_id, knot=knot, mode=MIXED_MODE,
                            h=h_cal, n_traj=n_job))
            next_id += 1
    runner = CalibrationContext(plan.spec, problem, base_seed, u0,
                                control_variate, max_steps)
    runner._plan = plan
    results = schedule_jobs(jobs, runner, workers=workers,
                            retry_budget=retry_budget, fault_rate=fault_rate,
                            base_seed=base_seed)

    merged: dict[int, KnotSamples] = {}
    for job, samples in sorted(zip(jobs, results),
                               key=lambda p: (p[0].knot, p[0].job_id)):
        if job.knot in merged:
            merged[job.knot].merge(samples)
        else:
            merged[job.knot] = samples

    total = plan.n * n_cal
    total_failed = sum(s.n_failed for s in merged.values())
    if total_failed > MAX_FAILURE_FRACTION * total:
        raise RuntimeError(
            f"{total_failed} of {total} calibration trajectories hit the "
            f"step cap after a resample (> {MAX_FAILURE_FRACTION:.2%})"
        )

    n = plan.n
    bias = np.empty(n)
    variance = np.empty(n)
    rho2 = np.empty(n)
    mean_diff = np.empty(n)
    h_arr = np.empty(n)
    n_arr = np.empty(n, dtype=np.int64)
    failed = np.empty(n, dtype=np.int64)
    resampled = np.empty(n, dtype=np.int64)
    for knot in range(n):
        s = merged[knot]
        stats = estimate_statistics(s.score_gm, s.xi, s.score_em)
        r2 = 0.0 if stats.degenerate else stats.rho ** 2
        bias[knot] = estimate_bias(stats)
        variance[knot] = stats.variance
        rho2[knot] = r2
        mean_diff[knot] = stats.mean_em_minus_gm
        h_arr[knot] = set_timestep(stats.mean_em_minus_gm, eps=eps,
                                   h_cal=h_cal, h_cap=cap)
        n_arr[knot] = set_trajectory_count(stats.variance, r2, eps=eps,
                                           n_job=n_job)
        failed[knot] = s.n_failed
        resampled[knot] = s.n_resampled

    return CalibrationReport(
        eps=eps, h_cal=h_cal, h_cap=cap, n_cal=n_cal, n_job=n_job,
        bias=bias, variance=variance, rho2=rho2, mean_diff=mean_diff,
        h=h_arr, n_traj=n_arr, n_failed=failed, n_resampled=resampled,
        jobs_used=len(jobs),
    )
