"""Tests for per-knot calibration and the control-variate builder."""

import json

import numpy as np
import pytest

from pddsparse.calibration import (
    CalibrationReport,
    KnotSamples,
    RHO2_CAP,
    control_variate_from_field,
    estimate_bias,
    run_calibration,
    score_through_surrogate,
    set_timestep,
    set_trajectory_count,
    write_calibration_json,
)
from pddsparse.geometry import GridSpec, build_discretisation
from pddsparse.problems import ConstField, EllipticProblem, ZERO
from pddsparse.sde import RuleOutcome, SampleStats
from pddsparse.spectral import build_global_field


def _quad(x, y):
    return np.asarray(x, float) ** 2 + np.asarray(y, float) ** 2


def _quad_problem():
    return EllipticProblem(name="quad", a_xx=ConstField(2.0), a_xy=ZERO,
                           a_yy=ConstField(2.0), f=ConstField(4.0), g=_quad,
                           u_exact=_quad)


def _stats(gap=None, variance=1.0, rho=0.0):
    return SampleStats(mean=0.0, variance=variance, mean_em_minus_gm=gap,
                       rho=rho, degenerate=False, n=100)


# --- plain arithmetic contracts ------------------------------------------


def test_estimate_bias_is_half_the_gap():
    assert estimate_bias(_stats(gap=-0.3)) == pytest.approx(0.15)
    assert estimate_bias(_stats(gap=0.004)) == pytest.approx(0.002)


def test_estimate_bias_requires_mixed_outcomes():
    with pytest.raises(ValueError, match="mixed"):
        estimate_bias(_stats(gap=None))


def test_set_timestep_keeps_cap_for_small_gap():
    assert set_timestep(0.002, eps=0.01, h_cal=0.08) == pytest.approx(0.08)


def test_set_timestep_shrinks_for_large_gap():
    h = set_timestep(0.2, eps=0.01, h_cal=0.08)
    assert h == pytest.approx(2 * 0.08 * 0.01 / (3 * 0.2))  # ~0.00267


def test_set_timestep_zero_gap_and_cap():
    assert set_timestep(0.0, eps=0.01, h_cal=0.08) == 0.08
    assert set_timestep(0.0, eps=0.01, h_cal=0.08, h_cap=0.05) == 0.05
    assert set_timestep(-0.2, eps=0.01, h_cal=0.08) == \
        set_timestep(0.2, eps=0.01, h_cal=0.08)
    with pytest.raises(ValueError):
        set_timestep(0.1, eps=0.0, h_cal=0.08)


def test_trajectory_count_rounds_to_whole_jobs():
    # 9 * 0.09 / 0.01^2 = 8100; nearest multiple of 200 (half up) is 8200
    assert set_trajectory_count(0.09, 0.0, eps=0.01, n_job=200) == 8200
    assert set_trajectory_count(0.08, 0.0, eps=0.01, n_job=200) == 7200
    assert set_trajectory_count(1e-9, 0.0, eps=0.01, n_job=200) == 200


def test_trajectory_count_rho_cap():
    n_perfect = set_trajectory_count(1.0, 1.0, eps=0.001, n_job=100)
    n_capped = set_trajectory_count(1.0, RHO2_CAP, eps=0.001, n_job=100)
    assert n_perfect == n_capped >= 100
    # over-unity correlation estimates are clamped, not an error
    assert set_trajectory_count(1.0, 1.7, eps=0.001, n_job=100) == n_capped
    assert set_trajectory_count(1.0, -0.5, eps=0.001, n_job=100) == \
        set_trajectory_count(1.0, 0.0, eps=0.001, n_job=100)


def test_trajectory_count_scales_with_variance_reduction():
    plain = set_trajectory_count(4.0, 0.0, eps=0.01, n_job=100)
    reduced = set_trajectory_count(4.0, 0.9, eps=0.01, n_job=100)
    assert reduced <= plain / 8


# --- surrogate scoring ----------------------------------------------------


def test_score_through_surrogate_routes_exits():
    out = RuleOutcome.empty(3)
    out.side[:] = (0, 1, -1)  # third trajectory failed
    out.x[:] = (2.0, 0.5, 9.9)
    out.y_coord[:] = (0.5, 1.0, 9.9)
    out.dirichlet[:] = (True, False, False)
    out.y[:] = (0.5, 2.0, 1.0)
    out.z[:] = (0.1, -0.2, 0.0)
    scores, valid = score_through_surrogate(
        out, _quad_problem(), lambda x, y: np.full_like(x, 10.0))
    assert valid.tolist() == [True, True, False]
    # Dirichlet exit scores through g, interface exit through u0
    assert scores[0] == pytest.approx(0.5 * _quad(2.0, 0.5) + 0.1)
    assert scores[1] == pytest.approx(2.0 * 10.0 - 0.2)


def test_knot_samples_merge_guard():
    a = KnotSamples(0, np.zeros(2), np.zeros(2), np.zeros(2))
    b = KnotSamples(1, np.zeros(2), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError, match="merge"):
        a.merge(b)


# --- control variate construction ----------------------------------------


@pytest.fixture(scope="module")
def quad_setup():
    spec = GridSpec(origin=(0.0, 0.0), square_side=1.0, nx=3, ny=3,
                    knots_per_interface=2)
    plan = build_discretisation(spec)
    problem = _quad_problem()
    nodal = _quad(plan.xy[:plan.n, 0], plan.xy[:plan.n, 1])
    field = build_global_field(plan, problem, nodal, p=12)
    return plan, problem, field


def test_control_variate_matches_sigma_t_grad(quad_setup):
    _, problem, field = quad_setup
    cv = control_variate_from_field(field, problem, mode="table")
    x = np.array([0.7, 1.9, 2.4])
    y = np.array([1.1, 0.3, 2.8])
    fx, fy = cv(x, y)
    s = np.sqrt(2.0)
    assert np.abs(fx - s * 2 * x).max() < 1e-3
    assert np.abs(fy - s * 2 * y).max() < 1e-3


def test_control_variate_spectral_mode_clamps(quad_setup):
    _, problem, field = quad_setup
    cv = control_variate_from_field(field, problem, mode="spectral")
    fx, fy = cv(np.array([-5.0]), np.array([1.0]))  # overshot exit point
    ex, ey = cv(np.array([0.0]), np.array([1.0]))
    assert fx[0] == ex[0] and fy[0] == ey[0]
    with pytest.raises(ValueError, match="mode"):
        control_variate_from_field(field, problem, mode="nearest")


def test_control_variate_needs_constant_diffusion(quad_setup):
    _, _, field = quad_setup
    varying = EllipticProblem(
        name="v", a_xx=lambda x, y: 2.0 + 0.1 * np.asarray(x, float),
        a_xy=ZERO, a_yy=ConstField(2.0))
    with pytest.raises(ValueError, match="constant diffusion"):
        control_variate_from_field(field, varying)


# --- the calibration pass -------------------------------------------------


@pytest.fixture(scope="module")
def calibrated(quad_setup):
    plan, problem, field = quad_setup
    cv = control_variate_from_field(field, problem, mode="table")
    report = run_calibration(
        plan, problem, _quad, eps=0.05, h_cal=0.01, n_cal=400, n_job=200,
        base_seed=77, control_variate=cv)
    return plan, problem, report


def test_calibration_report_invariants(calibrated):
    plan, _, report = calibrated
    assert report.jobs_used == plan.n * 2
    assert len(report.h) == plan.n
    assert (report.h <= report.h_cal + 1e-15).all()
    assert (report.h > 0).all()
    assert (report.n_traj % report.n_job == 0).all()
    assert (report.n_traj >= report.n_job).all()
    assert (report.bias >= 0).all()
    assert (report.variance > 0).all()
    assert ((report.rho2 >= 0) & (report.rho2 < 1)).all()
    report.params().validate(plan.n, report.n_job)


def test_calibration_measures_timestep_bias(calibrated):
    # at h = 0.01 the first-crossing overshoot is well above noise, so the
    # bias estimates must be positive and force h below the calibration step
    _, _, report = calibrated
    assert report.mean_bias > 1e-3
    assert (report.h < report.h_cal).sum() > report.h.size * 0.8


def test_calibration_control_variate_reduces_counts(quad_setup, calibrated):
    plan, problem, field_report = quad_setup[0], quad_setup[1], calibrated[2]
    plain = run_calibration(
        plan, problem, _quad, eps=0.05, h_cal=0.01, n_cal=400, n_job=200,
        base_seed=77)
    # the exact-solution surrogate gives a strongly correlated control
    # variate, cutting the projected production trajectory counts
    assert field_report.mean_reduction > 2.0
    assert plain.mean_reduction == pytest.approx(1.0)
    assert field_report.n_traj.sum() < 0.7 * plain.n_traj.sum()


def test_calibration_is_deterministic(quad_setup):
    plan, problem, _ = quad_setup
    kw = dict(eps=0.1, h_cal=0.02, n_cal=200, n_job=100, base_seed=5)
    a = run_calibration(plan, problem, _quad, **kw)
    b = run_calibration(plan, problem, _quad, **kw)
    faulty = run_calibration(plan, problem, _quad, fault_rate=0.3,
                             retry_budget=10, **kw)
    assert np.array_equal(a.bias, b.bias)
    assert np.array_equal(a.variance, faulty.variance)
    assert np.array_equal(a.n_traj, faulty.n_traj)
    shifted = run_calibration(plan, problem, _quad, job_id_start=1000, **kw)
    assert not np.array_equal(a.bias, shifted.bias)


def test_calibration_json_roundtrip(tmp_path, calibrated):
    plan, _, report = calibrated
    path = tmp_path / "calibration.json"
    write_calibration_json(report, path)
    with open(path) as fh:
        doc = json.load(fh)
    assert doc["eps"] == report.eps
    assert len(doc["knots"]["bias"]) == plan.n
    assert doc["aggregates"]["mean_reduction"] == \
        pytest.approx(report.mean_reduction)
    assert doc["aggregates"]["total_trajectories"] == int(report.n_traj.sum())


def test_calibration_rejects_partial_jobs(quad_setup):
    plan, problem, _ = quad_setup
    with pytest.raises(ValueError, match="multiple"):
        run_calibration(plan, problem, _quad, eps=0.1, h_cal=0.02,
                        n_cal=150, n_job=100, base_seed=1)


def test_calibration_aborts_on_widespread_failures(quad_setup):
    plan, problem, _ = quad_setup
    with pytest.raises(RuntimeError, match="step cap"):
        run_calibration(plan, problem, _quad, eps=0.1, h_cal=1e-7,
                        n_cal=100, n_job=100, base_seed=1, max_steps=3)
