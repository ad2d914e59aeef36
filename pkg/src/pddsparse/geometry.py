"""Grid geometry: knots, patches, segments and stencils on a square-tiled domain.

The domain is an nx-by-ny tiling of equal squares. Interior grid lines are the
artificial interfaces; every interface carries m_int equispaced knots strictly
between consecutive crossings, and the crossings themselves carry knots too.
Interior-line endpoints that land on the domain boundary are Dirichlet knots:
they are kept (their boundary value folds into the right-hand side) but they
are not unknowns.

Each interior knot owns a patch: the union of the two squares adjacent to its
interface (edge-interior knots) or the four squares around it (crossings),
clipped to the domain. Patch sides that are not part of the domain boundary
carry a stencil: the ordered, gap-free, collinear set of knots on that side's
grid line spanning the side, extended past each end by half an interface's
knot count wherever the line continues.

All coordinates are built from one indexing function so that a crossing gets
bit-identical floats whether it is reached through a line table, a patch bound
or a stencil coordinate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

KIND_EDGE = 0
KIND_CROSSING = 1

# fixed side order; ties in exit classification resolve in this order
SIDES = ("E", "N", "W", "S")


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the square tiling and its interfacial knot density."""

    origin: tuple[float, float] = (0.0, 0.0)
    square_side: float = 1.0
    nx: int = 2
    ny: int = 2
    knots_per_interface: int = 8

    def __post_init__(self):
        if not self.square_side > 0:
            raise ValueError(f"square_side must be positive, got {self.square_side}")
        if self.nx < 2 or self.ny < 2:
            raise ValueError(
                f"need at least 2 squares per axis for an interior interface, "
                f"got nx={self.nx}, ny={self.ny}"
            )
        if self.knots_per_interface < 1:
            raise ValueError(
                f"knots_per_interface must be >= 1, got {self.knots_per_interface}"
            )

    @property
    def extent(self) -> tuple[float, float]:
        return (self.nx * self.square_side, self.ny * self.square_side)

    def interior_knot_count(self) -> int:
        m, nx, ny = self.knots_per_interface, self.nx, self.ny
        return nx * m * (ny - 1) + ny * m * (nx - 1) + (nx - 1) * (ny - 1)


@dataclass(frozen=True)
class GeomStencil:
    """Collinear knot set on one grid line: ids, arc coordinates, Dirichlet mask.

    axis 'h' means the line is horizontal (arc coordinate is x); 'v' means
    vertical (arc is y). ``extended`` flags whether knots were added past the
    (lo, hi) span at each end.
    """

    key: tuple
    axis: str
    line_coord: float
    ids: np.ndarray
    coords: np.ndarray
    dirichlet: np.ndarray
    extended: tuple[bool, bool]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Side:
    """One side of a patch rectangle in the fixed E/N/W/S order."""

    orientation: str
    on_domain_boundary: bool
    line_coord: float
    lo: float
    hi: float
    stencil_key: tuple | None


@dataclass(frozen=True)
class Patch:
    """Confinement region of one interior knot: 2- or 4-square rectangle."""

    owner: int
    squares: tuple[tuple[int, int], ...]
    bounds: tuple[float, float, float, float]  # xl, xh, yl, yh
    sides: tuple[Side, Side, Side, Side]  # E, N, W, S

    @property
    def boundary_overlap(self) -> tuple[str, ...]:
        return tuple(s.orientation for s in self.sides if s.on_domain_boundary)

    @property
    def area(self) -> float:
        xl, xh, yl, yh = self.bounds
        return (xh - xl) * (yh - yl)


@dataclass(frozen=True)
class ExitRecord:
    side: str
    on_domain_boundary: bool
    point: tuple[float, float]
    arc: float


@dataclass
class DiscretisationPlan:
    """All knots, patches and stencils of one grid specification."""

    spec: GridSpec
    xy: np.ndarray  # (n_total, 2); interior knots first
    kind: np.ndarray  # int8, KIND_EDGE / KIND_CROSSING
    n: int  # number of interior (unknown) knots
    patches: list[Patch]
    stencils: dict[tuple, GeomStencil]
    lines: dict[tuple, tuple[np.ndarray, np.ndarray]] = field(repr=False, default_factory=dict)

    @property
    def n_total(self) -> int:
        return len(self.xy)

    def on_boundary(self, i: int) -> bool:
        return i >= self.n

    @property
    def squares(self) -> list[tuple[int, int]]:
        return [(ix, iy) for iy in range(self.spec.ny) for ix in range(self.spec.nx)]

    def square_bounds(self, ix: int, iy: int) -> tuple[float, float, float, float]:
        ox, oy = self.spec.origin
        s = self.spec.square_side
        return (ox + ix * s, ox + (ix + 1) * s, oy + iy * s, oy + (iy + 1) * s)

    def interface_stencil(self, axis: str, line_index: int, lo_square: int, hi_square: int) -> GeomStencil:
        """Stencil spanning squares [lo_square, hi_square) along one interior line.

        Used for patch sides and for interpolating boundary traces of
        subdomain solves; results are cached by integer key.
        """
        return _make_stencil(self, axis, line_index, lo_square, hi_square)


def _coord(origin: float, side: float, m: int, k: int) -> float:
    """Coordinate of slot k on a grid line (slot m+1 multiples are crossings)."""
    q, r = divmod(k, m + 1)
    return origin + q * side + r * (side / (m + 1))


def build_discretisation(spec: GridSpec) -> DiscretisationPlan:
    ox, oy = spec.origin
    s = spec.square_side
    nx, ny, m = spec.nx, spec.ny, spec.knots_per_interface
    slots_x = nx * (m + 1)  # slot indices 0..slots_x on a horizontal line
    slots_y = ny * (m + 1)

    ids: dict[tuple, int] = {}  # ('h', j, k) / ('v', i, k) / ('x', i, j) / ('b', ...)
    xs: list[float] = []
    ys: list[float] = []
    kinds: list[int] = []

    def add(tag, x, y, kind):
        ids[tag] = len(xs)
        xs.append(x)
        ys.append(y)
        kinds.append(kind)

    # interior knots: horizontal-line edge knots, vertical-line edge knots, crossings
    for j in range(1, ny):
        y = oy + j * s
        for k in range(1, slots_x):
            if k % (m + 1) != 0:
                add(("h", j, k), _coord(ox, s, m, k), y, KIND_EDGE)
    for i in range(1, nx):
        x = ox + i * s
        for k in range(1, slots_y):
            if k % (m + 1) != 0:
                add(("v", i, k), x, _coord(oy, s, m, k), KIND_EDGE)
    for j in range(1, ny):
        for i in range(1, nx):
            add(("x", i, j), ox + i * s, oy + j * s, KIND_CROSSING)
    n = len(xs)
    assert n == spec.interior_knot_count()

    # Dirichlet knots: interior-line endpoints on the domain boundary
    for j in range(1, ny):
        y = oy + j * s
        add(("bh", j, 0), ox, y, KIND_EDGE)
        add(("bh", j, 1), ox + nx * s, y, KIND_EDGE)
    for i in range(1, nx):
        x = ox + i * s
        add(("bv", i, 0), x, oy, KIND_EDGE)
        add(("bv", i, 1), x, oy + ny * s, KIND_EDGE)

    xy = np.column_stack([np.asarray(xs), np.asarray(ys)])
    kind = np.asarray(kinds, dtype=np.int8)

    # per-line tables: sorted (arc coordinate, knot id) including crossings and endpoints
    lines: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
    for j in range(1, ny):
        lids = [ids[("bh", j, 0)]]
        lcoo = [ox]
        for k in range(1, slots_x):
            tag = ("h", j, k) if k % (m + 1) else ("x", k // (m + 1), j)
            lids.append(ids[tag])
            lcoo.append(_coord(ox, s, m, k))
        lids.append(ids[("bh", j, 1)])
        lcoo.append(ox + nx * s)
        lines[("h", j)] = (np.asarray(lcoo), np.asarray(lids, dtype=np.int64))
    for i in range(1, nx):
        lids = [ids[("bv", i, 0)]]
        lcoo = [oy]
        for k in range(1, slots_y):
            tag = ("v", i, k) if k % (m + 1) else ("x", i, k // (m + 1))
            lids.append(ids[tag])
            lcoo.append(_coord(oy, s, m, k))
        lids.append(ids[("bv", i, 1)])
        lcoo.append(oy + ny * s)
        lines[("v", i)] = (np.asarray(lcoo), np.asarray(lids, dtype=np.int64))

    plan = DiscretisationPlan(
        spec=spec, xy=xy, kind=kind, n=n, patches=[], stencils={}, lines=lines
    )

    for knot_id in range(n):
        plan.patches.append(_build_patch(plan, ids, knot_id))
    return plan


def _make_stencil(plan: DiscretisationPlan, axis: str, line_index: int,
                  lo_square: int, hi_square: int) -> GeomStencil:
    """Knots on line (axis, line_index) spanning squares [lo_square, hi_square),
    extended by ceil(m/2) knots past each end where the line continues."""
    spec = plan.spec
    m = spec.knots_per_interface
    key = (axis, line_index, lo_square, hi_square)
    cached = plan.stencils.get(key)
    if cached is not None:
        return cached

    coords, lids = plan.lines[(axis, line_index)]
    per = m + 1  # index stride of one interface (crossing to crossing)
    i_lo = lo_square * per  # inclusive index of the span start knot
    i_hi = hi_square * per  # inclusive index of the span end knot
    ext = (m + 1) // 2
    e_lo = max(0, i_lo - ext) if i_lo > 0 else 0
    e_hi = min(len(coords) - 1, i_hi + ext) if i_hi < len(coords) - 1 else i_hi
    sel = slice(e_lo, e_hi + 1)
    sten_ids = lids[sel].copy()
    sten_coords = coords[sel].copy()
    origin = spec.origin[0] if axis == "h" else spec.origin[1]
    count = spec.nx if axis == "h" else spec.ny
    line_coord = (spec.origin[1] + line_index * spec.square_side if axis == "h"
                  else spec.origin[0] + line_index * spec.square_side)
    # Dirichlet entries are the line's two endpoint knots on the domain boundary
    dirichlet = (sten_coords == origin) | (sten_coords == origin + count * spec.square_side)
    st = GeomStencil(
        key=key, axis=axis, line_coord=line_coord, ids=sten_ids,
        coords=sten_coords, dirichlet=dirichlet,
        extended=(e_lo < i_lo, e_hi > i_hi),
    )
    plan.stencils[key] = st
    return st


def _build_patch(plan: DiscretisationPlan, ids: dict, knot_id: int) -> Patch:
    spec = plan.spec
    ox, oy = spec.origin
    s = spec.square_side
    nx, ny, m = spec.nx, spec.ny, spec.knots_per_interface

    kx, ky = plan.xy[knot_id]
    if plan.kind[knot_id] == KIND_CROSSING:
        i = int(round((kx - ox) / s))
        j = int(round((ky - oy) / s))
        sq = ((i - 1, j - 1), (i, j - 1), (i - 1, j), (i, j))
        il, ih, jl, jh = i - 1, i + 1, j - 1, j + 1
    else:
        # edge-interior: horizontal line iff y sits on a grid line
        j_f = (ky - oy) / s
        if abs(j_f - round(j_f)) < 1e-9:
            j = int(round(j_f))
            i = int((kx - ox) // s)
            sq = ((i, j - 1), (i, j))
            il, ih, jl, jh = i, i + 1, j - 1, j + 1
        else:
            i = int(round((kx - ox) / s))
            j = int((ky - oy) // s)
            sq = ((i - 1, j), (i, j))
            il, ih, jl, jh = i - 1, i + 1, j, j + 1

    xl, xh = ox + il * s, ox + ih * s
    yl, yh = oy + jl * s, oy + jh * s

    def vside(orient, i_line, j0, j1):
        on_b = i_line == 0 or i_line == nx
        key = None
        if not on_b:
            key = _make_stencil(plan, "v", i_line, j0, j1).key
        x = ox + i_line * s
        return Side(orient, on_b, x, oy + j0 * s, oy + j1 * s, key)

    def hside(orient, j_line, i0, i1):
        on_b = j_line == 0 or j_line == ny
        key = None
        if not on_b:
            key = _make_stencil(plan, "h", j_line, i0, i1).key
        y = oy + j_line * s
        return Side(orient, on_b, y, ox + i0 * s, ox + i1 * s, key)

    sides = (
        vside("E", ih, jl, jh),
        hside("N", jh, il, ih),
        vside("W", il, jl, jh),
        hside("S", jl, il, ih),
    )
    return Patch(owner=knot_id, squares=sq, bounds=(xl, xh, yl, yh), sides=sides)


def side_distances(patch: Patch, x: float, y: float) -> np.ndarray:
    """Signed distances to the four side lines in E, N, W, S order (inside > 0)."""
    xl, xh, yl, yh = patch.bounds
    return np.array([xh - x, yh - y, x - xl, y - yl])


def distance_to_patch_boundary(patch: Patch, point) -> tuple[float, np.ndarray]:
    """Min signed axis distance to the patch sides and the nearest side's
    inward normal. Positive inside, negative outside."""
    d = side_distances(patch, point[0], point[1])
    k = int(np.argmin(d))
    normals = np.array([(-1.0, 0.0), (0.0, -1.0), (1.0, 0.0), (0.0, 1.0)])
    return float(d[k]), normals[k]


def classify_exit(patch: Patch, point_prev, point_next, shrink: float = 0.0) -> ExitRecord:
    """Assign an exit to a side of the patch and project onto that side's line.

    The exit side is the one whose line is nearest to point_next (ties resolve
    in E, N, W, S order); on diagonal overshoots this projects onto the nearest
    extended-stencil line, possibly beyond the corner, never onto the corner
    itself. Interfacial sides keep the unclamped arc (the extended stencil
    covers it); domain-boundary sides clamp the arc to the side span so the
    Dirichlet datum is evaluated on the boundary proper.

    ``shrink`` is the stopping offset of the shifted-boundary rule: point_next
    must be outside the patch shrunk inward by this amount.
    """
    x, y = float(point_next[0]), float(point_next[1])
    d = side_distances(patch, x, y)
    if d.min() >= shrink:
        raise ValueError(
            f"no exit: point {point_next} is inside the patch shrunk by {shrink} "
            f"(min side distance {d.min():.3g})"
        )
    neg = d < 0
    if np.any(neg):
        # crossed the true boundary: among crossed sides take the nearest line,
        # so diagonal overshoots go to the less-violated side, never the corner
        k = int(np.argmax(np.where(neg, d, -np.inf)))
    else:
        # stopped by the shifted-boundary rule while still inside: nearest side
        k = int(np.argmin(d))
    side = patch.sides[k]
    if side.orientation in ("E", "W"):
        arc, px, py = y, side.line_coord, y
    else:
        arc, px, py = x, x, side.line_coord
    if side.on_domain_boundary:
        arc = min(max(arc, side.lo), side.hi)
        if side.orientation in ("E", "W"):
            py = arc
        else:
            px = arc
    return ExitRecord(side.orientation, side.on_domain_boundary, (px, py), arc)


def plan_to_json(plan: DiscretisationPlan) -> dict:
    """JSON-serializable summary of the plan (knot and patch tables)."""
    kinds = {KIND_EDGE: "edge-interior", KIND_CROSSING: "crossing"}
    doc = {
        "spec": {
            "origin": list(plan.spec.origin),
            "square_side": plan.spec.square_side,
            "nx": plan.spec.nx,
            "ny": plan.spec.ny,
            "knots_per_interface": plan.spec.knots_per_interface,
        },
        "n_interior": plan.n,
        "knots": [
            {
                "id": i,
                "x": float(plan.xy[i, 0]),
                "y": float(plan.xy[i, 1]),
                "kind": kinds[int(plan.kind[i])],
                "on_boundary": bool(i >= plan.n),
            }
            for i in range(plan.n_total)
        ],
        "patches": [
            {
                "owner": p.owner,
                "squares": [list(sq) for sq in p.squares],
                "bounds": list(p.bounds),
                "sides": [
                    {
                        "orientation": sd.orientation,
                        "on_domain_boundary": sd.on_domain_boundary,
                        "stencil": (
                            None if sd.stencil_key is None
                            else [int(j) for j in plan.stencils[sd.stencil_key].ids]
                        ),
                    }
                    for sd in p.sides
                ],
            }
            for p in plan.patches
        ],
    }
    return doc


def write_plan_json(plan: DiscretisationPlan, path) -> None:
    with open(path, "w") as fh:
        json.dump(plan_to_json(plan), fh, indent=1)
