"""Chebyshev pseudospectral subdomain solves and the stitched global field.

Once the interfacial nodal values are known, every grid square carries a
well-posed Dirichlet problem: boundary traces come from RBF interpolation of
the nodal values along each interface (domain-boundary edges use g directly),
and the interior is solved by tensor-product Chebyshev-Gauss-Lobatto
collocation with boundary-row replacement. The per-square solution grids are
stitched into a GlobalField supporting value and gradient queries everywhere
in the closed domain — the gradient source for control variates — plus an
optional sampled bilinear look-up-table mode for cheap bulk evaluation.

Shared interface points are owned by the lowest square index (row-major from
the south-west corner).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .geometry import DiscretisationPlan
from .problems import ConstField, EllipticProblem
from .rbf import DEFAULT_CONDITION_TARGET, tuned_stencil

RESIDUAL_TOL = 1e-10  # relative collocation residual bound


def cgl_nodes(p: int) -> np.ndarray:
    """Chebyshev-Gauss-Lobatto nodes on [0, 1], ascending."""
    if p < 2:
        raise ValueError(f"need at least 2 collocation nodes, got {p}")
    return (1.0 - np.cos(np.pi * np.arange(p) / (p - 1))) / 2.0


def bary_weights(p: int) -> np.ndarray:
    """Barycentric weights of the ascending CGL nodes (up to scale)."""
    w = np.ones(p)
    w[1::2] = -1.0
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def diff_matrix(nodes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """First-derivative collocation matrix for arbitrary distinct nodes."""
    d = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(d, 1.0)
    mat = (weights[None, :] / weights[:, None]) / d
    np.fill_diagonal(mat, 0.0)
    np.fill_diagonal(mat, -mat.sum(axis=1))
    return mat


def _eval_field(f, x, y):
    return np.asarray(f(np.asarray(x, float), np.asarray(y, float)), float)


_OPERATOR_CACHE: dict[tuple, tuple] = {}


def _collocation_operator(problem: EllipticProblem, bounds, p: int):
    """(A, lu) for the square; LU cached for constant-coefficient problems."""
    xl, xh, yl, yh = bounds
    coeffs = (problem.a_xx, problem.a_xy, problem.a_yy,
              problem.d_x, problem.d_y, problem.c)
    const = all(isinstance(cf, ConstField) for cf in coeffs)
    key = None
    if const:
        key = (p, xh - xl, yh - yl) + tuple(cf.value for cf in coeffs)
        hit = _OPERATOR_CACHE.get(key)
        if hit is not None:
            return hit

    ref = cgl_nodes(p)
    w = bary_weights(p)
    dref = diff_matrix(ref, w)
    dx_mat = dref / (xh - xl)
    dy_mat = dref / (yh - yl)
    xg = xl + (xh - xl) * ref
    yg = yl + (yh - yl) * ref
    xx, yy = np.meshgrid(xg, yg)  # [iy, ix]

    eye = np.eye(p)
    ddx = np.kron(eye, dx_mat)
    ddy = np.kron(dy_mat, eye)
    ddxx = np.kron(eye, dx_mat @ dx_mat)
    ddyy = np.kron(dy_mat @ dy_mat, eye)
    ddxy = np.kron(dy_mat, dx_mat)

    def diag(fld):
        return _eval_field(fld, xx, yy).ravel()[:, None]

    a = (0.5 * diag(problem.a_xx) * ddxx + diag(problem.a_xy) * ddxy
         + 0.5 * diag(problem.a_yy) * ddyy + diag(problem.d_x) * ddx
         + diag(problem.d_y) * ddy)
    a[np.arange(p * p), np.arange(p * p)] += _eval_field(
        problem.c, xx, yy).ravel()

    # Dirichlet boundary-row replacement
    iy, ix = np.divmod(np.arange(p * p), p)
    boundary = (ix == 0) | (ix == p - 1) | (iy == 0) | (iy == p - 1)
    a[boundary, :] = 0.0
    a[np.nonzero(boundary)[0], np.nonzero(boundary)[0]] = 1.0

    lu = scipy.linalg.lu_factor(a)
    result = (a, lu, boundary)
    if key is not None:
        _OPERATOR_CACHE[key] = result
    return result


def solve_subdomain(problem: EllipticProblem, bounds, traces, p: int,
                    corner_tol: float = 1e-4) -> np.ndarray:
    """Collocation solve on one square with Dirichlet traces on its sides.

    ``traces`` maps side name E/N/W/S to a callable of the arc coordinate
    (y for E/W, x for N/S) returning boundary values. Returns the (p, p)
    solution grid U[iy, ix] on ascending CGL nodes.
    """
    if p < 8:
        raise ValueError(f"collocation order must be >= 8, got {p}")
    xl, xh, yl, yh = bounds
    ref = cgl_nodes(p)
    xg = xl + (xh - xl) * ref
    yg = yl + (yh - yl) * ref

    ect, nct, wct, sct = (np.asarray(traces[s](arc), dtype=float)
                          for s, arc in zip("ENWS", (yg, xg, yg, xg)))
    corners = [
        ("SW", sct[0], wct[0]), ("SE", sct[-1], ect[0]),
        ("NW", nct[0], wct[-1]), ("NE", nct[-1], ect[-1]),
    ]
    for name, a_val, b_val in corners:
        if abs(a_val - b_val) > corner_tol:
            raise ValueError(
                f"boundary traces disagree at the {name} corner of "
                f"{bounds}: {a_val} vs {b_val} (tolerance {corner_tol})"
            )

    a, lu, boundary = _collocation_operator(problem, bounds, p)
    xx, yy = np.meshgrid(xg, yg)
    rhs = _eval_field(problem.f, xx, yy)
    # E/W columns take precedence at corners (fixed, documented order)
    rhs[0, :] = sct
    rhs[-1, :] = nct
    rhs[:, 0] = wct
    rhs[:, -1] = ect
    flat = scipy.linalg.lu_solve(lu, rhs.ravel())

    resid = a @ flat - rhs.ravel()
    scale = np.abs(a).max() * max(np.abs(flat).max(), 1e-300) \
        + np.abs(rhs).max()
    if np.abs(resid).max() > RESIDUAL_TOL * scale:
        raise RuntimeError(
            f"collocation residual {np.abs(resid).max():.3e} exceeds "
            f"{RESIDUAL_TOL:.0e} relative on square {bounds}"
        )
    return flat.reshape(p, p)


def nodal_with_dirichlet(plan: DiscretisationPlan, problem: EllipticProblem,
                         interior_values: np.ndarray) -> np.ndarray:
    """Nodal vector over all knots: interior solution + g at boundary knots."""
    if len(interior_values) != plan.n:
        raise ValueError(
            f"expected {plan.n} interior values, got {len(interior_values)}"
        )
    full = np.empty(plan.n_total)
    full[:plan.n] = interior_values
    bx = plan.xy[plan.n:, 0]
    by = plan.xy[plan.n:, 1]
    full[plan.n:] = _eval_field(problem.g, bx, by)
    return full


@dataclass
class GlobalField:
    """Per-square Chebyshev solution grids with global value/gradient queries."""

    origin: tuple[float, float]
    square_side: float
    nx: int
    ny: int
    p: int
    values: np.ndarray  # (nx*ny, p, p) as U[s, iy, ix]
    grad_x: np.ndarray
    grad_y: np.ndarray
    interface_mismatch: float = 0.0

    def __post_init__(self):
        self._nodes = cgl_nodes(self.p)
        self._bw = bary_weights(self.p)

    def square_index(self, x, y):
        """Row-major square index; shared points go to the lowest index."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ox, oy = self.origin
        s = self.square_side
        tol = 1e-12 * s * max(self.nx, self.ny)
        tx = (x - ox) / s
        ty = (y - oy) / s
        if (tx < -tol).any() or (tx > self.nx + tol).any() \
                or (ty < -tol).any() or (ty > self.ny + tol).any():
            raise ValueError("point outside the global domain")
        ix = np.clip(np.floor(tx).astype(int), 0, self.nx - 1)
        iy = np.clip(np.floor(ty).astype(int), 0, self.ny - 1)
        ix = np.where((tx <= ix) & (ix > 0), ix - 1, ix)
        iy = np.where((ty <= iy) & (iy > 0), iy - 1, iy)
        return iy * self.nx + ix, ix, iy

    def _bary_rows(self, t):
        """Normalized barycentric evaluation rows for reference coords t."""
        d = t[:, None] - self._nodes[None, :]
        exact = np.abs(d) < 1e-14
        with np.errstate(divide="ignore", invalid="ignore"):
            rows = self._bw[None, :] / d
        bad = exact.any(axis=1)
        if bad.any():
            rows[bad] = exact[bad]
        return rows / rows.sum(axis=1, keepdims=True)

    def _interp(self, grids, x, y):
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
        sq, ix, iy = self.square_index(x, y)
        ox, oy = self.origin
        s = self.square_side
        tx = (x - ox) / s - ix
        ty = (y - oy) / s - iy
        rx = self._bary_rows(np.clip(tx, 0.0, 1.0))
        ry = self._bary_rows(np.clip(ty, 0.0, 1.0))
        return np.einsum("kij,ki,kj->k", grids[sq], ry, rx)

    def value(self, x, y):
        scalar = np.isscalar(x) or np.asarray(x).ndim == 0
        out = self._interp(self.values, x, y)
        return float(out[0]) if scalar else out.reshape(np.shape(x))

    __call__ = value

    def gradient(self, x, y):
        scalar = np.isscalar(x) or np.asarray(x).ndim == 0
        gx = self._interp(self.grad_x, x, y)
        gy = self._interp(self.grad_y, x, y)
        if scalar:
            return float(gx[0]), float(gy[0])
        shape = np.shape(x)
        return gx.reshape(shape), gy.reshape(shape)


def _trace_from_stencil(plan, interp_cache, nodal, axis, line_index,
                        lo_square, hi_square, condition_target):
    gst = plan.interface_stencil(axis, line_index, lo_square, hi_square)
    key = (gst.key, condition_target)
    interp = interp_cache.get(key)
    if interp is None:
        interp = tuned_stencil(gst.coords, condition_target)
        interp_cache[key] = interp
    vals = nodal[gst.ids]

    def trace(arc, _interp=interp, _vals=vals):
        return _interp.interpolate(_vals, arc)

    return trace


def build_global_field(plan: DiscretisationPlan, problem: EllipticProblem,
                       interior_values: np.ndarray, p: int = 16, *,
                       condition_target: float = DEFAULT_CONDITION_TARGET,
                       corner_tol: float = 1e-4) -> GlobalField:
    """Solve every subdomain with RBF-interpolated traces and stitch."""
    spec = plan.spec
    nodal = nodal_with_dirichlet(plan, problem, interior_values)
    nxq, nyq = spec.nx, spec.ny
    values = np.empty((nxq * nyq, p, p))
    interp_cache: dict = {}

    def g_trace(side_name, bounds):
        xl, xh, yl, yh = bounds
        fixed = {"E": xh, "W": xl, "N": yh, "S": yl}[side_name]
        vertical = side_name in ("E", "W")

        def trace(arc, _fixed=fixed, _vertical=vertical):
            arc = np.asarray(arc, dtype=float)
            line = np.full_like(arc, _fixed)
            if _vertical:
                return _eval_field(problem.g, line, arc)
            return _eval_field(problem.g, arc, line)

        return trace

    for iyq in range(nyq):
        for ixq in range(nxq):
            bounds = plan.square_bounds(ixq, iyq)
            traces = {}
            for side_name, line, interior, axis, lo in (
                ("E", ixq + 1, ixq + 1 < nxq, "v", iyq),
                ("W", ixq, ixq > 0, "v", iyq),
                ("N", iyq + 1, iyq + 1 < nyq, "h", ixq),
                ("S", iyq, iyq > 0, "h", ixq),
            ):
                if interior:
                    traces[side_name] = _trace_from_stencil(
                        plan, interp_cache, nodal, axis, line, lo, lo + 1,
                        condition_target)
                else:
                    traces[side_name] = g_trace(side_name, bounds)
            values[iyq * nxq + ixq] = solve_subdomain(
                problem, bounds, traces, p, corner_tol=corner_tol)

    ref = cgl_nodes(p)
    dref = diff_matrix(ref, bary_weights(p)) / spec.square_side
    grad_x = values @ dref.T
    grad_y = np.einsum("ij,sjk->sik", dref, values)

    field = GlobalField(origin=spec.origin, square_side=spec.square_side,
                        nx=nxq, ny=nyq, p=p, values=values,
                        grad_x=grad_x, grad_y=grad_y)
    field.interface_mismatch = _measure_interface_mismatch(field)
    return field


def _measure_interface_mismatch(field: GlobalField, samples: int = 17) -> float:
    """Max |left - right| of the two squares' interpolants on shared edges."""
    ox, oy = field.origin
    s = field.square_side
    t = np.linspace(0.02, 0.98, samples)
    worst = 0.0
    rows = field._bary_rows(t)
    edge_hi = field._bary_rows(np.array([1.0]))
    edge_lo = field._bary_rows(np.array([0.0]))
    for iy in range(field.ny):
        for ix in range(1, field.nx):  # vertical interfaces
            left = field.values[iy * field.nx + ix - 1]
            right = field.values[iy * field.nx + ix]
            lv = np.einsum("ki,ij,lj->k", rows, left, edge_hi)
            rv = np.einsum("ki,ij,lj->k", rows, right, edge_lo)
            worst = max(worst, np.abs(lv - rv).max())
    for iy in range(1, field.ny):  # horizontal interfaces
        for ix in range(field.nx):
            below = field.values[(iy - 1) * field.nx + ix]
            above = field.values[iy * field.nx + ix]
            lv = np.einsum("li,ij,kj->k", edge_hi, below, rows)
            rv = np.einsum("li,ij,kj->k", edge_lo, above, rows)
            worst = max(worst, np.abs(lv - rv).max())
    return float(worst)


@dataclass
class LookupTable:
    """Bilinear samples of (grad u) on a uniform grid: the cheap, picklable
    gradient source for the SDE hot loop (look-up-table field mode)."""

    origin: tuple[float, float]
    step: float
    shape: tuple[int, int]  # (ny_points, nx_points)
    fx: np.ndarray
    fy: np.ndarray

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ny, nx = self.shape
        tx = np.clip((x - self.origin[0]) / self.step, 0.0, nx - 1 - 1e-12)
        ty = np.clip((y - self.origin[1]) / self.step, 0.0, ny - 1 - 1e-12)
        ix = tx.astype(int)
        iy = ty.astype(int)
        fx_loc = tx - ix
        fy_loc = ty - iy
        out = []
        for grid in (self.fx, self.fy):
            v00 = grid[iy, ix]
            v01 = grid[iy, ix + 1]
            v10 = grid[iy + 1, ix]
            v11 = grid[iy + 1, ix + 1]
            top = v00 + (v01 - v00) * fx_loc
            bot = v10 + (v11 - v10) * fx_loc
            out.append(top + (bot - top) * fy_loc)
        return out[0], out[1]


def build_gradient_table(field: GlobalField, cells_per_square: int = 64
                         ) -> LookupTable:
    """Sample the field gradient on a uniform grid for bilinear lookup."""
    ox, oy = field.origin
    s = field.square_side
    step = s / cells_per_square
    nx_pts = field.nx * cells_per_square + 1
    ny_pts = field.ny * cells_per_square + 1
    xs = ox + step * np.arange(nx_pts)
    ys = oy + step * np.arange(ny_pts)
    fx = np.empty((ny_pts, nx_pts))
    fy = np.empty((ny_pts, nx_pts))
    chunk = max(1, 8192 // nx_pts)
    for j0 in range(0, ny_pts, chunk):
        j1 = min(j0 + chunk, ny_pts)
        xx, yy = np.meshgrid(xs, ys[j0:j1])
        gx, gy = field.gradient(xx.ravel(), yy.ravel())
        fx[j0:j1] = gx.reshape(j1 - j0, nx_pts)
        fy[j0:j1] = gy.reshape(j1 - j0, nx_pts)
    return LookupTable(origin=(ox, oy), step=step, shape=(ny_pts, nx_pts),
                       fx=fx, fy=fy)


def sample_field_csv(field: GlobalField, path, resolution: int = 101,
                     u_exact=None) -> None:
    """Uniform-grid samples as CSV (x, y, u[, error]) for plotting."""
    ox, oy = field.origin
    xs = np.linspace(ox, ox + field.nx * field.square_side, resolution)
    ys = np.linspace(oy, oy + field.ny * field.square_side, resolution)
    xx, yy = np.meshgrid(xs, ys)
    uu = field.value(xx.ravel(), yy.ravel())
    header = "x,y,u"
    cols = [xx.ravel(), yy.ravel(), uu]
    if u_exact is not None:
        err = uu - _eval_field(u_exact, xx.ravel(), yy.ravel())
        header += ",error"
        cols.append(err)
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header,
               comments="", fmt="%.17g")
