"""Stopped-diffusion integrator for patch-confined Feynman-Kac trajectories.

Integrates the Euler-Maruyama system

    X' = X + d(X) h + sigma(X) sqrt(h) zeta
    Y' = Y (1 + c(X) h)
    Z' = Z - f(X) Y h
    xi' = xi - Y F(X).zeta sqrt(h)

(coefficients evaluated at the pre-step state) until X leaves the confinement
region, under one of three stopping rules: ``naive_em`` stops at the first
crossing of the true boundary, ``gobet_menozzi`` stops as soon as the distance
to the nearest side drops below the inward shift 0.5826 ||sigma^T N||_2
sqrt(h), and ``mixed_gm_em`` records the shifted stop first and then resumes
the same trajectory (same noise stream) to the true-boundary crossing,
yielding paired outcomes for bias estimation.

Trajectories are stepped in batches as flat arrays, but every trajectory owns
its own counter-based RNG stream and consumes it in a fixed chunk schedule
(128, 256, 512, then 1024-step chunks) keyed to its own consumed-draw count,
so a batch member is bit-identical to a solo run and to any other batch
composition containing it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ExitRecord, Patch, distance_to_patch_boundary
from .problems import ConstField, EllipticProblem, diffusion_factor

GM_CONSTANT = 0.5826  # inward-shift constant restoring linear weak order

_CHUNK_SCHEDULE = (128, 256, 512)
_CHUNK_MAX = 1024

NAIVE_EM = "naive_em"
GOBET_MENOZZI = "gobet_menozzi"
MIXED = "mixed_gm_em"

# side indices in the fixed order shared with geometry
_E, _N, _W, _S = 0, 1, 2, 3
_SIDE_NAMES = ("E", "N", "W", "S")


@dataclass(frozen=True)
class IntegratorConfig:
    h: float
    stopping_rule: str = GOBET_MENOZZI
    control_variate: object | None = None  # callable (x, y) -> (Fx, Fy)
    max_steps: int | None = None  # None: 100 * area / (lambda_min(A) * h)

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"timestep must be positive, got {self.h}")
        if self.stopping_rule not in (NAIVE_EM, GOBET_MENOZZI, MIXED):
            raise ValueError(f"unknown stopping rule {self.stopping_rule!r}")


class RectRegion:
    """Axis-aligned rectangular confinement region (a patch or a test box)."""

    __slots__ = ("bounds", "dirichlet", "side_lo", "side_hi", "area")

    def __init__(self, bounds, dirichlet_sides):
        xl, xh, yl, yh = bounds
        if not (xh > xl and yh > yl):
            raise ValueError(f"degenerate rectangle bounds {bounds}")
        self.bounds = (float(xl), float(xh), float(yl), float(yh))
        self.dirichlet = np.asarray(dirichlet_sides, dtype=bool)
        # spans per side in E,N,W,S order, for clamping boundary-side arcs
        self.side_lo = np.array([yl, xl, yl, xl])
        self.side_hi = np.array([yh, xh, yh, xh])
        self.area = (xh - xl) * (yh - yl)

    @classmethod
    def from_patch(cls, patch: Patch) -> "RectRegion":
        return cls(patch.bounds, [s.on_domain_boundary for s in patch.sides])

    @classmethod
    def box(cls, bounds) -> "RectRegion":
        """Whole boundary Dirichlet: oracle problems posed on one rectangle."""
        return cls(bounds, [True, True, True, True])

    def min_distance(self, xx, yy):
        xl, xh, yl, yh = self.bounds
        d4 = (xh - xx, yh - yy, xx - xl, yy - yl)
        dmin = np.minimum(np.minimum(d4[_E], d4[_W]), np.minimum(d4[_N], d4[_S]))
        return dmin, d4

    def shift_norms(self, a_xx, a_yy):
        """||sigma^T N||_2 per side = sqrt(N^T A N): E/W see a_xx, N/S a_yy."""
        return np.array([np.sqrt(a_xx), np.sqrt(a_yy), np.sqrt(a_xx), np.sqrt(a_yy)])

    def nearest_side(self, d4, idx):
        return np.stack([d[idx] for d in d4], axis=1).argmin(axis=1)

    def classify(self, xx, yy, d4, idx):
        """Vectorized exit-side assignment matching geometry.classify_exit:
        the nearest crossed grid line if any side was overshot, else the
        nearest side (shifted-boundary stops)."""
        d = np.stack([dd[idx] for dd in d4], axis=1)
        neg = d < 0
        has_neg = neg.any(axis=1)
        crossed_pick = np.where(neg, d, -np.inf).argmax(axis=1)
        inside_pick = d.argmin(axis=1)
        side = np.where(has_neg, crossed_pick, inside_pick).astype(np.int8)
        xl, xh, yl, yh = self.bounds
        line = np.array([xh, yh, xl, yl])[side]
        ew = (side == _E) | (side == _W)
        arc = np.where(ew, yy, xx)
        is_dir = self.dirichlet[side]
        arc = np.where(is_dir, np.clip(arc, self.side_lo[side], self.side_hi[side]), arc)
        px = np.where(ew, line, arc)
        py = np.where(ew, arc, line)
        return side, px, py, arc, is_dir


class DiskRegion:
    """Disk with fully Dirichlet boundary, for first-exit-time oracles."""

    __slots__ = ("center", "radius", "area")

    def __init__(self, center=(0.0, 0.0), radius=1.0):
        self.center = (float(center[0]), float(center[1]))
        self.radius = float(radius)
        self.area = np.pi * radius * radius

    def min_distance(self, xx, yy):
        cx, cy = self.center
        r = np.hypot(xx - cx, yy - cy)
        return self.radius - r, r

    def shift_norms(self, a_xx, a_yy):
        if a_xx != a_yy:
            raise NotImplementedError("disk regions support isotropic diffusion only")
        return np.array([np.sqrt(a_xx)])

    def nearest_side(self, r, idx):
        return np.zeros(len(idx), dtype=np.intp)

    def classify(self, xx, yy, r, idx):
        cx, cy = self.center
        scale = self.radius / np.maximum(r[idx], 1e-300)
        px = cx + (xx - cx) * scale
        py = cy + (yy - cy) * scale
        arc = np.arctan2(py - cy, px - cx)
        side = np.zeros(len(xx), dtype=np.int8)
        return side, px, py, arc, np.ones(len(xx), dtype=bool)


@dataclass
class RuleOutcome:
    """Per-trajectory exit payload for one stopping rule, as arrays."""

    side: np.ndarray
    x: np.ndarray
    y_coord: np.ndarray
    arc: np.ndarray
    dirichlet: np.ndarray
    y: np.ndarray
    z: np.ndarray
    xi: np.ndarray
    steps: np.ndarray

    @classmethod
    def empty(cls, k):
        return cls(
            side=np.full(k, -1, dtype=np.int8),
            x=np.zeros(k), y_coord=np.zeros(k), arc=np.zeros(k),
            dirichlet=np.zeros(k, dtype=bool),
            y=np.ones(k), z=np.zeros(k), xi=np.zeros(k),
            steps=np.zeros(k, dtype=np.int64),
        )

    def dirichlet_scores(self, problem) -> np.ndarray:
        """Y g(exit) + Z where the exit lies on a Dirichlet side, else NaN."""
        s = np.full(len(self.side), np.nan)
        m = self.dirichlet & (self.side >= 0)
        if m.any():
            s[m] = self.y[m] * problem.g(self.x[m], self.y_coord[m]) + self.z[m]
        return s


@dataclass
class BatchOutcome:
    primary: RuleOutcome  # GM payload under gobet_menozzi/mixed, EM under naive
    em: RuleOutcome | None  # the resumed true-boundary payload in mixed mode
    resampled: int
    failed: np.ndarray  # bool mask of trajectories discarded at the step cap

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())


@dataclass(frozen=True)
class TrajectoryOutcome:
    """Single-trajectory view (the batch path is the production interface)."""

    exit: ExitRecord
    y_final: float
    z_final: float
    xi: float
    steps: int
    score_gm: float | None = None
    score_em: float | None = None
    em_exit: ExitRecord | None = None


class _Coeffs:
    """Preprocessed coefficient access with constant fast paths."""

    def __init__(self, problem: EllipticProblem):
        self.problem = problem
        self.sigma_const = problem.constant_diffusion()
        self.c_zero = problem.c == ConstField(0.0)
        self.f_const = problem.f.value if isinstance(problem.f, ConstField) else None
        self.d_zero = (problem.d_x == ConstField(0.0)
                       and problem.d_y == ConstField(0.0))

    def lambda_min(self, point) -> float:
        if self.sigma_const is not None:
            sig = self.sigma_const
        else:
            sig = diffusion_factor(self.problem, point)
        a = sig @ sig.T
        tr, det = a[0, 0] + a[1, 1], a[0, 0] * a[1, 1] - a[0, 1] ** 2
        return 0.5 * (tr - np.sqrt(max(tr * tr - 4.0 * det, 0.0)))


def default_max_steps(region, problem: EllipticProblem, h: float, start) -> int:
    lam = _Coeffs(problem).lambda_min(start)
    return int(np.ceil(100.0 * region.area / (lam * h)))


def gm_shift(problem: EllipticProblem, patch: Patch, point_on_boundary, h: float) -> float:
    """Inward shift 0.5826 ||sigma^T N||_2 sqrt(h) at a patch-side point."""
    _, normal = distance_to_patch_boundary(patch, point_on_boundary)
    sig = diffusion_factor(problem, point_on_boundary)
    return GM_CONSTANT * float(np.linalg.norm(sig.T @ normal)) * np.sqrt(h)


def make_streams(seed_material, count: int) -> list[np.random.Generator]:
    """One Philox stream per trajectory, spawned from the given seed material
    (typically (base_seed, job_id)); a pure function of its inputs."""
    root = np.random.SeedSequence(seed_material)
    return [np.random.Generator(np.random.Philox(s)) for s in root.spawn(count)]


def _chunk_sizes():
    yield from _CHUNK_SCHEDULE
    while True:
        yield _CHUNK_MAX


def _refill(gens, size):
    # layout (size, rows, 2) so each step reads a contiguous slab
    buf = np.empty((len(gens), size, 2))
    for i, g in enumerate(gens):
        buf[i] = g.standard_normal((size, 2))
    return np.ascontiguousarray(buf.transpose(1, 0, 2))


def run_batch(region, start, problem: EllipticProblem, config: IntegratorConfig,
              streams: list[np.random.Generator]) -> BatchOutcome:
    """Integrate one trajectory per stream from ``start`` until exit.

    ``start`` is a single (x, y) (all trajectories launch there) or a (k, 2)
    array. Capped trajectories are restarted once, reusing their own stream,
    and counted as failures if they hit the cap again.
    """
    k = len(streams)
    start = np.asarray(start, dtype=float)
    if start.ndim == 1:
        sx, sy = np.full(k, start[0]), np.full(k, start[1])
    else:
        sx, sy = start[:, 0].copy(), start[:, 1].copy()

    co = _Coeffs(problem)
    if co.sigma_const is None:
        raise NotImplementedError(
            "spatially varying diffusion is not wired into the batch engine; "
            "all built-in problems use a constant diffusion matrix"
        )
    h = config.h
    sqh = np.sqrt(h)
    mixed = config.stopping_rule == MIXED
    use_gm = config.stopping_rule in (GOBET_MENOZZI, MIXED)
    F = config.control_variate

    sig = co.sigma_const
    a_xx = sig[0, 0] ** 2
    a_yy = sig[1, 0] ** 2 + sig[1, 1] ** 2
    s11, s21, s22 = sig[0, 0] * sqh, sig[1, 0] * sqh, sig[1, 1] * sqh
    diag_sigma = s21 == 0.0

    shift_tab = None
    shift_scalar = None
    if use_gm:
        shift_tab = GM_CONSTANT * region.shift_norms(a_xx, a_yy) * sqh
        if shift_tab.max() == shift_tab.min():
            shift_scalar = float(shift_tab[0])

    max_steps = config.max_steps
    if max_steps is None:
        max_steps = default_max_steps(region, problem, h, (sx[0], sy[0]))

    # per-step Z updates are skipped when Y stays 1 and f is constant;
    # Z is then exactly -f h steps, reconstructed after the loop
    lazy_z = co.f_const is not None and co.c_zero

    prim = RuleOutcome.empty(k)
    emo = RuleOutcome.empty(k) if mixed else None
    failed = np.zeros(k, dtype=bool)
    resampled_flag = np.zeros(k, dtype=bool)
    resampled_count = 0

    # Live state stays at full width between compactions: finished rows keep
    # stepping harmlessly (their payload is already extracted) so per-step
    # work needs no masking. Compaction happens at chunk boundaries -- where
    # the noise buffer is rebuilt anyway -- and mid-chunk once the live
    # fraction drops below a quarter. orig maps live rows to output slots.
    orig = np.arange(k)
    xx, yy = sx.copy(), sy.copy()
    Y = np.ones(k)
    Z = np.zeros(k)
    XI = np.zeros(k)
    active = np.ones(k, dtype=bool)
    gm_pending = np.ones(k, dtype=bool) if use_gm else None
    gens = list(streams)
    start_x, start_y = sx, sy
    steps = np.zeros(k, dtype=np.int64)

    chunk_iter = _chunk_sizes()
    cur = next(chunk_iter)
    buf = _refill(gens, cur)
    pos = 0

    while active.any():
        if pos == cur:
            keep = active
            orig = orig[keep]
            xx, yy = xx[keep], yy[keep]
            Y, Z, XI = Y[keep], Z[keep], XI[keep]
            steps = steps[keep]
            start_x, start_y = start_x[keep], start_y[keep]
            gens = [g for g, kf in zip(gens, keep) if kf]
            if gm_pending is not None:
                gm_pending = gm_pending[keep]
            active = np.ones(len(orig), dtype=bool)
            cur = next(chunk_iter)
            buf = _refill(gens, cur)
            pos = 0
        elif len(orig) >= 64 and active.sum() * 4 < len(orig):
            keep = active
            orig = orig[keep]
            xx, yy = xx[keep], yy[keep]
            Y, Z, XI = Y[keep], Z[keep], XI[keep]
            steps = steps[keep]
            start_x, start_y = start_x[keep], start_y[keep]
            gens = [g for g, kf in zip(gens, keep) if kf]
            if gm_pending is not None:
                gm_pending = gm_pending[keep]
            active = np.ones(len(orig), dtype=bool)
            buf = np.ascontiguousarray(buf[pos:, keep, :])
            cur -= pos
            pos = 0
        z0 = buf[pos, :, 0]
        z1 = buf[pos, :, 1]
        pos += 1

        # functional coefficients see the pre-step state
        if F is not None:
            Fx, Fy = F(xx, yy)
            XI -= Y * (Fx * z0 + Fy * z1) * sqh
        if co.f_const is None:
            Z -= problem.f(xx, yy) * Y * h
        elif not lazy_z and co.f_const != 0.0:
            Z -= co.f_const * Y * h
        if not co.c_zero:
            ch = problem.c(xx, yy) * h
            if np.any(ch[active] <= -1.0):
                raise ValueError(
                    "timestep too large for the reaction coefficient: "
                    "c*h must stay above -1"
                )
            Y *= 1.0 + ch

        if co.d_zero:
            dx_drift = dy_drift = None
        else:
            dx_drift = problem.d_x(xx, yy) * h
            dy_drift = problem.d_y(xx, yy) * h
        if diag_sigma:
            xx = xx + s11 * z0
            yy = yy + s22 * z1
        else:
            xx = xx + s11 * z0
            yy = yy + s21 * z0 + s22 * z1
        if dx_drift is not None:
            xx += dx_drift
            yy += dy_drift
        steps += 1

        dmin, daux = region.min_distance(xx, yy)

        if use_gm:
            if shift_scalar is not None:
                gm_hit = dmin < shift_scalar
            else:
                near = region.nearest_side(daux, np.arange(len(orig)))
                gm_hit = dmin < shift_tab[near]
            new_gm = gm_hit & gm_pending & active
            if new_gm.any():
                idx = np.nonzero(new_gm)[0]
                _record(prim, region, orig[idx], xx[idx], yy[idx], daux, idx,
                        Y[idx], Z[idx], XI[idx], steps[idx])
                gm_pending[idx] = False
            if mixed:
                em_hit = (dmin < 0.0) & active
                if em_hit.any():
                    idx = np.nonzero(em_hit)[0]
                    _record(emo, region, orig[idx], xx[idx], yy[idx], daux, idx,
                            Y[idx], Z[idx], XI[idx], steps[idx])
                    active[idx] = False
            else:
                active &= gm_pending
        else:
            em_hit = (dmin < 0.0) & active
            if em_hit.any():
                idx = np.nonzero(em_hit)[0]
                _record(prim, region, orig[idx], xx[idx], yy[idx], daux, idx,
                        Y[idx], Z[idx], XI[idx], steps[idx])
                active[idx] = False

        capped = active & (steps >= max_steps)
        if capped.any():
            idx = np.nonzero(capped)[0]
            first = ~resampled_flag[orig[idx]]
            refresh = idx[first]
            resampled_flag[orig[refresh]] = True
            resampled_count += len(refresh)
            xx[refresh] = start_x[refresh]
            yy[refresh] = start_y[refresh]
            Y[refresh] = 1.0
            Z[refresh] = 0.0
            XI[refresh] = 0.0
            steps[refresh] = 0
            if gm_pending is not None:
                gm_pending[refresh] = True
            dead = idx[~first]
            if len(dead):
                failed[orig[dead]] = True
                active[dead] = False

    if lazy_z and co.f_const != 0.0:
        prim.z = -co.f_const * h * prim.steps.astype(float)
        if emo is not None:
            emo.z = -co.f_const * h * emo.steps.astype(float)
    if failed.any():
        prim.side[failed] = -1
        if emo is not None:
            emo.side[failed] = -1

    return BatchOutcome(primary=prim, em=emo, resampled=resampled_count,
                        failed=failed)


def _record(out, region, out_idx, xx, yy, daux, idx, Y, Z, XI, steps):
    side, px, py, arc, is_dir = region.classify(xx, yy, daux, idx)
    out.side[out_idx] = side
    out.x[out_idx] = px
    out.y_coord[out_idx] = py
    out.arc[out_idx] = arc
    out.dirichlet[out_idx] = is_dir
    out.y[out_idx] = Y
    out.z[out_idx] = Z
    out.xi[out_idx] = XI
    out.steps[out_idx] = steps


def _exit_record(region, rule: RuleOutcome, i: int) -> ExitRecord:
    name = (_SIDE_NAMES[rule.side[i]] if isinstance(region, RectRegion)
            else "boundary")
    return ExitRecord(name, bool(rule.dirichlet[i]),
                      (float(rule.x[i]), float(rule.y_coord[i])),
                      float(rule.arc[i]))


def run_trajectory(knot, region, problem: EllipticProblem,
                   config: IntegratorConfig, rng_stream) -> TrajectoryOutcome:
    """Single-trajectory wrapper around the batch integrator."""
    out = run_batch(region, np.asarray(knot, dtype=float), problem, config,
                    [rng_stream])
    if out.failed[0]:
        raise RuntimeError(
            "trajectory exceeded the step cap twice (max_steps guard)"
        )
    p = out.primary
    score_gm = score_em = None
    em_rec = None
    s = p.dirichlet_scores(problem)
    if np.isfinite(s[0]):
        score_gm = float(s[0])
    if out.em is not None:
        em_rec = _exit_record(region, out.em, 0)
        se = out.em.dirichlet_scores(problem)
        if np.isfinite(se[0]):
            score_em = float(se[0])
    return TrajectoryOutcome(
        exit=_exit_record(region, p, 0), y_final=float(p.y[0]),
        z_final=float(p.z[0]), xi=float(p.xi[0]), steps=int(p.steps[0]),
        score_gm=score_gm, score_em=score_em, em_exit=em_rec,
    )


@dataclass(frozen=True)
class SampleStats:
    mean: float
    variance: float  # unbiased
    mean_em_minus_gm: float | None
    rho: float
    degenerate: bool
    n: int


def estimate_statistics(scores, xi=None, scores_em=None) -> SampleStats:
    """Mean, unbiased variance, paired EM-GM gap and Pearson rho(score, xi).

    Accepts arrays, or a list of TrajectoryOutcome (scores pulled from the
    Dirichlet-exit score fields).
    """
    if len(scores) and isinstance(scores[0], TrajectoryOutcome):
        outs = scores
        scores = np.array([o.score_gm for o in outs], dtype=float)
        xi = np.array([o.xi for o in outs])
        if all(o.score_em is not None for o in outs):
            scores_em = np.array([o.score_em for o in outs])
    scores = np.asarray(scores, dtype=float)
    n = len(scores)
    if n < 2:
        raise ValueError(f"need at least 2 outcomes, got {n}")
    mean = float(scores.mean())
    var = float(scores.var(ddof=1))
    gap = None
    if scores_em is not None:
        gap = float(np.mean(np.asarray(scores_em) - scores))
    rho, degenerate = 0.0, False
    if xi is not None:
        xi = np.asarray(xi, dtype=float)
        vx = xi.var(ddof=1)
        if var <= 0.0 or vx <= 0.0:
            degenerate = True
        else:
            cov = float(np.sum((scores - mean) * (xi - xi.mean()))) / (n - 1)
            rho = float(np.clip(cov / np.sqrt(var * vx), -1.0, 1.0))
    else:
        degenerate = var <= 0.0
    return SampleStats(mean=mean, variance=var, mean_em_minus_gm=gap,
                       rho=rho, degenerate=degenerate, n=n)
