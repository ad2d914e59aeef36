"""Probabilistic domain decomposition for 2D linear elliptic Dirichlet BVPs.

The solver computes nodal values on artificial interfaces from a sparse
linear system G.u = b whose coefficients are Monte Carlo expectations over
patch-confined stopped diffusions (Feynman-Kac scores against RBF cardinal
functions), then fills each subdomain with a Chebyshev collocation solve.
The three-phase pipeline (warm-up, calibration, production) sets per-knot
timesteps and trajectory counts against an accuracy target and applies a
pathwise control variate built from the warm-up solution.
"""

from .assembly import (
    AssemblyParams,
    InterfacialSystem,
    assemble_system,
    write_matrix_market,
    write_row_stats,
)
from .calibration import (
    CalibrationReport,
    SigmaTGradient,
    control_variate_from_field,
    estimate_bias,
    run_calibration,
    set_timestep,
    set_trajectory_count,
)
from .geometry import DiscretisationPlan, GridSpec, build_discretisation
from .linear_solver import SolveReport, condition_estimate, solve
from .pipeline import (
    PhaseError,
    PipelineResult,
    RunConfig,
    load_pipeline_result,
    measure_realized_reduction,
    run_pipeline,
)
from .problems import (
    ConstField,
    EllipticProblem,
    exit_time_problem,
    laplace_const,
    make_problem,
    poisson_manufactured,
    register_problem,
)
from .rbf import build_stencil_interp, cardinal_values, tuned_stencil
from .sde import (
    GOBET_MENOZZI,
    MIXED,
    NAIVE_EM,
    DiskRegion,
    IntegratorConfig,
    RectRegion,
    estimate_statistics,
    make_streams,
    run_batch,
)
from .spectral import GlobalField, build_global_field, solve_subdomain
from .verify import run_suite

__version__ = "0.1.0"

__all__ = [
    "AssemblyParams",
    "CalibrationReport",
    "ConstField",
    "DiscretisationPlan",
    "DiskRegion",
    "EllipticProblem",
    "GOBET_MENOZZI",
    "GlobalField",
    "GridSpec",
    "IntegratorConfig",
    "InterfacialSystem",
    "MIXED",
    "NAIVE_EM",
    "PhaseError",
    "PipelineResult",
    "RectRegion",
    "RunConfig",
    "SigmaTGradient",
    "SolveReport",
    "assemble_system",
    "build_discretisation",
    "build_global_field",
    "build_stencil_interp",
    "cardinal_values",
    "condition_estimate",
    "control_variate_from_field",
    "estimate_bias",
    "estimate_statistics",
    "exit_time_problem",
    "laplace_const",
    "load_pipeline_result",
    "make_problem",
    "measure_realized_reduction",
    "make_streams",
    "poisson_manufactured",
    "register_problem",
    "run_batch",
    "run_calibration",
    "run_pipeline",
    "run_suite",
    "set_timestep",
    "set_trajectory_count",
    "solve",
    "solve_subdomain",
    "tuned_stencil",
    "write_matrix_market",
    "write_row_stats",
    "__version__",
]
