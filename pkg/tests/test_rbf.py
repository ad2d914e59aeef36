"""RBF interpolation: kernel arithmetic, cardinal delta, tuning, convergence."""

import numpy as np
import pytest

from pddsparse.rbf import (
    Stencil1D,
    build_stencil_interp,
    cardinal_values,
    constant_interp_deviation,
    rbf_kernel,
    tune_shape_parameter,
    tuned_stencil,
)


def test_kernel_values():
    assert rbf_kernel(0.0, 1.0) == 1.0
    assert rbf_kernel(3.0, 4.0) == pytest.approx(0.2)
    assert rbf_kernel(1.0, 1.0) == pytest.approx(1.0 / np.sqrt(2.0))


def test_kernel_rejects_nonpositive_shape():
    with pytest.raises(ValueError):
        rbf_kernel(1.0, 0.0)
    with pytest.raises(ValueError):
        rbf_kernel(1.0, -2.0)


def test_build_rejects_degenerate_stencils():
    with pytest.raises(ValueError):
        build_stencil_interp([0.5], 1.0)
    with pytest.raises(ValueError):
        build_stencil_interp([0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        build_stencil_interp([0.0, 1.0, 0.5], 1.0)


def test_inverse_residual_at_default_target():
    coords = np.linspace(0.0, 1.0, 16)
    st = tuned_stencil(coords)
    phi = rbf_kernel(np.abs(coords[:, None] - coords[None, :]), st.shape_parameter)
    resid = np.max(np.abs(phi @ st.inv_matrix - np.eye(16)))
    # the float64 floor for the right-inverse residual is ~cond*eps
    assert resid < 1e-6


def test_inverse_symmetry_in_well_conditioned_regime():
    # the symmetry of the stored inverse is a finite-precision property:
    # forward error scales like cond*eps, so it is checked at a moderate
    # condition target (at the 1e10 default the achievable floor is ~1e-6)
    coords = np.linspace(0.0, 1.0, 16)
    st = tuned_stencil(coords, target_condition=1e4)
    asym = np.max(np.abs(st.inv_matrix - st.inv_matrix.T))
    assert asym <= 1e-10 * np.max(np.abs(st.inv_matrix))


def test_cardinal_delta_at_knots():
    coords = np.linspace(0.0, 1.0, 16)
    st = tuned_stencil(coords)
    h = cardinal_values(st, coords)
    assert np.max(np.abs(h - np.eye(16))) < 1e-6


def test_cardinal_scalar_evaluation():
    st = tuned_stencil(np.linspace(0.0, 1.0, 8))
    h = cardinal_values(st, st.coords[3])
    assert h.shape == (8,)
    assert h[3] == pytest.approx(1.0, abs=1e-8)


def test_constant_reproduction():
    # mid-gap accuracy at the 1e10 condition target is floored near cond*eps
    st = tuned_stencil(np.linspace(0.0, 2.0, 24))
    z = np.linspace(0.0, 2.0, 101)
    ones = cardinal_values(st, z).sum(axis=1)
    assert np.max(np.abs(ones - 1.0)) < 1e-4
    assert constant_interp_deviation(st) < 1e-4


def test_quadratic_reproduction_midgap():
    coords = np.linspace(-1.0, 1.0, 9)
    st = tuned_stencil(coords)
    z = 0.5 * (coords[:-1] + coords[1:])
    approx = st.interpolate(coords**2, z)
    assert np.max(np.abs(approx - z**2)) < 1e-3


def test_extrapolation_flagged_not_fatal():
    st = tuned_stencil(np.linspace(0.0, 1.0, 12))
    z = np.array([-0.05, 0.5, 1.02])
    mask = st.extrapolation_mask(z)
    assert mask.tolist() == [True, False, True]
    vals = cardinal_values(st, z)
    assert np.all(np.isfinite(vals))


def test_tune_monotone_and_in_window():
    coords = np.linspace(0.0, 1.0, 64)
    c = tune_shape_parameter(coords, 1e10)
    phi = rbf_kernel(np.abs(coords[:, None] - coords[None, :]), c)
    cond = np.linalg.cond(phi, 2)
    assert 1e9 <= cond <= 1e11
    # monotone growth of the condition number in c (the bisection premise)
    conds = []
    for ck in np.geomspace(0.2, 5.0, 5) * np.mean(np.diff(coords)):
        conds.append(np.linalg.cond(
            rbf_kernel(np.abs(coords[:, None] - coords[None, :]), ck), 2))
    assert all(a < b for a, b in zip(conds, conds[1:]))


def test_tune_rejects_bad_target():
    with pytest.raises(ValueError):
        tune_shape_parameter(np.linspace(0, 1, 8), 0.5)


@pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
def test_singular_matrix_reports_condition():
    coords = np.linspace(0.0, 1.0, 40)
    with pytest.raises(np.linalg.LinAlgError, match="condition"):
        build_stencil_interp(coords, 1e9)


def test_spectral_convergence_on_sine():
    # fixed kernel: error falls monotonically as knots double. (Tuning to a
    # fixed condition target instead would shrink c with m and pin the error
    # near the target's cond*eps floor, masking the convergence.)
    errs = []
    for m in (4, 8, 16, 32):
        coords = np.linspace(0.0, 1.0, m)
        st = build_stencil_interp(coords, 0.25)
        z = np.linspace(0.0, 1.0, 211)
        err = np.max(np.abs(st.interpolate(np.sin(coords), z) - np.sin(z)))
        errs.append(err)
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-4


def test_tuned_stencil_shares_tuning_across_translations():
    a = tuned_stencil(np.linspace(0.0, 1.0, 10))
    b = tuned_stencil(np.linspace(5.0, 6.0, 10))
    assert a.shape_parameter == b.shape_parameter
