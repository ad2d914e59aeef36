"""Elliptic Dirichlet problem definitions and built-in analytic test cases.

A problem is the coefficient data of

    (1/2) a_xx u_xx + a_xy u_xy + (1/2) a_yy u_yy + d.grad(u) + c u = f,
    u = g on the boundary,  c <= 0,

with A = [[a_xx, a_xy], [a_xy, a_yy]] symmetric positive definite wherever
queried. Every field is a vectorized callable of (x, y); all built-ins use
module-level functions or ConstField instances so problems pickle cleanly
into worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConstField:
    """Constant coefficient field; recognisable for engine fast paths."""

    __slots__ = ("value",)

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, x, y):
        return np.full_like(np.asarray(x, dtype=float), self.value)

    def __repr__(self):
        return f"ConstField({self.value})"

    def __eq__(self, other):
        return isinstance(other, ConstField) and other.value == self.value

    def __hash__(self):
        return hash(("ConstField", self.value))


ZERO = ConstField(0.0)


@dataclass(frozen=True)
class EllipticProblem:
    name: str
    a_xx: object
    a_xy: object
    a_yy: object
    d_x: object = ZERO
    d_y: object = ZERO
    c: object = ZERO
    f: object = ZERO
    g: object = ZERO
    u_exact: object | None = None
    grad_u_exact: object | None = None
    params: dict = field(default_factory=dict)

    def constant_diffusion(self) -> np.ndarray | None:
        """Lower-triangular sigma if the diffusion is spatially constant."""
        if all(isinstance(v, ConstField) for v in (self.a_xx, self.a_xy, self.a_yy)):
            return _chol2(self.a_xx.value, self.a_xy.value, self.a_yy.value,
                          point=None)
        return None

    def has_drift(self) -> bool:
        return not (self.d_x == ZERO and self.d_y == ZERO)


def _chol2(axx: float, axy: float, ayy: float, point) -> np.ndarray:
    """Closed-form Cholesky factor of a 2x2 SPD matrix."""
    if not (axx > 0 and axx * ayy - axy * axy > 0):
        where = "" if point is None else f" at point {tuple(point)}"
        raise ValueError(
            f"diffusion matrix [[{axx}, {axy}], [{axy}, {ayy}]]{where} "
            f"is not symmetric positive definite"
        )
    l11 = np.sqrt(axx)
    l21 = axy / l11
    l22 = np.sqrt(ayy - l21 * l21)
    return np.array([[l11, 0.0], [l21, l22]])


def diffusion_factor(problem: EllipticProblem, point) -> np.ndarray:
    """sigma(point), lower triangular, with sigma sigma^T = A(point)."""
    x, y = float(point[0]), float(point[1])
    return _chol2(float(problem.a_xx(x, y)), float(problem.a_xy(x, y)),
                  float(problem.a_yy(x, y)), point)


# ---------------------------------------------------------------------------
# manufactured Poisson problem: nabla^2 u = f with the oscillatory/front
# solution u = 3 + sin(sqrt(1 + x^2/100 + y^2/50))/3
#              + tanh(sin(3x/25 + y/20) + sin(x/20 - 3y/25))/3
# The diffusion is a = 2I so the generator equals the plain Laplacian.
# f is the hand-derived analytic Laplacian (validated against high-order
# finite differences in the tests).
# ---------------------------------------------------------------------------

_K2 = 9.0 / 625.0 + 1.0 / 400.0  # both sine arguments share this eigenvalue


def _wave(x, y):
    a = 3.0 * x / 25.0 + y / 20.0
    b = x / 20.0 - 3.0 * y / 25.0
    return a, b


def poisson_u_exact(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    q = np.sqrt(1.0 + x * x / 100.0 + y * y / 50.0)
    a, b = _wave(x, y)
    return 3.0 + np.sin(q) / 3.0 + np.tanh(np.sin(a) + np.sin(b)) / 3.0


def poisson_grad_u_exact(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = 1.0 + x * x / 100.0 + y * y / 50.0
    q = np.sqrt(w)
    wx, wy = x / 50.0, y / 25.0
    a, b = _wave(x, y)
    p = np.sin(a) + np.sin(b)
    sech2 = 1.0 - np.tanh(p) ** 2
    px = 0.12 * np.cos(a) + 0.05 * np.cos(b)
    py = 0.05 * np.cos(a) - 0.12 * np.cos(b)
    ux = np.cos(q) * wx / (2.0 * q) / 3.0 + sech2 * px / 3.0
    uy = np.cos(q) * wy / (2.0 * q) / 3.0 + sech2 * py / 3.0
    return ux, uy


def poisson_f(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = 1.0 + x * x / 100.0 + y * y / 50.0
    q = np.sqrt(w)
    wx, wy = x / 50.0, y / 25.0
    s = wx * wx + wy * wy
    lap_q = (1.0 / 50.0 + 1.0 / 25.0) / (2.0 * q) - s / (4.0 * w * q)
    lap_sin = (np.cos(q) * lap_q - np.sin(q) * s / (4.0 * w)) / 3.0
    a, b = _wave(x, y)
    p = np.sin(a) + np.sin(b)
    t = np.tanh(p)
    sech2 = 1.0 - t * t
    px = 0.12 * np.cos(a) + 0.05 * np.cos(b)
    py = 0.05 * np.cos(a) - 0.12 * np.cos(b)
    grad2 = px * px + py * py
    lap_tanh = (-2.0 * t * sech2 * grad2 - sech2 * _K2 * p) / 3.0
    return lap_sin + lap_tanh


def poisson_manufactured() -> EllipticProblem:
    """The oscillatory manufactured Poisson problem on [-100, 100]^2."""
    return EllipticProblem(
        name="poisson43",
        a_xx=ConstField(2.0), a_xy=ZERO, a_yy=ConstField(2.0),
        f=poisson_f, g=poisson_u_exact,
        u_exact=poisson_u_exact, grad_u_exact=poisson_grad_u_exact,
    )


# ---------------------------------------------------------------------------
# first-exit-time problems: generator nabla^2, f = -1, zero boundary data,
# so the solution is the mean exit time E[tau].
# ---------------------------------------------------------------------------


class _DiskExitTime:
    __slots__ = ("radius",)

    def __init__(self, radius: float):
        self.radius = float(radius)

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (self.radius**2 - x * x - y * y) / 4.0


class _SquareExitTime:
    """Series solution of nabla^2 u = -1, u = 0 on the side-L square [0,L]^2."""

    __slots__ = ("side", "kmax")

    def __init__(self, side: float, kmax: int = 199):
        self.side = float(side)
        self.kmax = int(kmax)

    def __call__(self, x, y):
        L = self.side
        x = np.asarray(x, dtype=float)[..., None]
        y = np.asarray(y, dtype=float)[..., None]
        k = np.arange(1, self.kmax + 1, 2, dtype=float)
        kp = k * np.pi / L
        # cosh ratio written with exponentials to stay finite for large k
        ratio = (np.exp(kp * (y - L)) + np.exp(-kp * y)) / (1.0 + np.exp(-k * np.pi))
        term = (4.0 * L * L / np.pi**3) / k**3 * (1.0 - ratio) * np.sin(kp * x)
        return term.sum(axis=-1)


def exit_time_problem(region: str = "disk", size: float = 1.0) -> EllipticProblem:
    """Mean-first-exit-time problem; ``size`` is the disk radius or square side.

    The disk is centred at the origin; the square is [0, size]^2. The exact
    solution of the disk is (R^2 - r^2)/4; the square uses the classical
    single-series solution. Mean exit time scales with the region area.
    """
    if region == "disk":
        u = _DiskExitTime(size)
    elif region == "square":
        u = _SquareExitTime(size)
    else:
        raise ValueError(f"unknown region {region!r}; expected 'disk' or 'square'")
    return EllipticProblem(
        name=f"exit_time_{region}",
        a_xx=ConstField(2.0), a_xy=ZERO, a_yy=ConstField(2.0),
        f=ConstField(-1.0), g=ZERO, u_exact=u,
        params={"region": region, "size": size},
    )


class _ZeroGrad:
    def __call__(self, x, y):
        z = np.zeros_like(np.asarray(x, dtype=float))
        return z, z.copy()


def laplace_const(value: float = 7.0) -> EllipticProblem:
    """Laplace with constant boundary data: the solution is that constant."""
    return EllipticProblem(
        name="laplace_const",
        a_xx=ConstField(2.0), a_xy=ZERO, a_yy=ConstField(2.0),
        g=ConstField(value), u_exact=ConstField(value),
        grad_u_exact=_ZeroGrad(),
        params={"value": value},
    )


_REGISTRY = {
    "poisson43": poisson_manufactured,
    "exit_time_disk": lambda **kw: exit_time_problem("disk", **kw),
    "exit_time_square": lambda **kw: exit_time_problem("square", **kw),
    "laplace_const": laplace_const,
}


def register_problem(name: str, factory) -> None:
    """Register a problem factory for name-based construction (CLI configs)."""
    _REGISTRY[name] = factory


def make_problem(name: str, **params) -> EllipticProblem:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValueError(
            f"unknown problem {name!r}; registered: {sorted(_REGISTRY)}"
        ) from None
    return factory(**params)
