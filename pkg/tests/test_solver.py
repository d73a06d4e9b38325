"""Inner-loop solver: step primitive, traces, modes, calibration."""

import json

import numpy as np
import pytest

import helpers
from curvmm import curvature, losses, solver
from curvmm.datagen import InverseProblemInstance
from curvmm.exceptions import (
    ConfigError,
    DomainError,
    InvalidInputError,
    NumericError,
    ShapeError,
)


def _aligned_instance(s=8, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((s, 1))
    return InverseProblemInstance(
        X_true=y.copy(), Y=y.copy(), L=np.eye(s), snr_db=np.inf, seed=seed
    )


# ---------------------------------------------------------------------------
# mm_step


def test_mm_step_hand_values():
    x = np.array([1.0, 2.0])
    g = np.array([0.5, -1.0])
    p = np.array([0.1, 0.2])
    out = solver.mm_step(x, g, p, gamma=1.0)
    assert np.array_equal(out, np.array([0.95, 2.2]))


def test_mm_step_relaxation_scales_move():
    x = np.array([1.0, 2.0])
    g = np.array([0.5, -1.0])
    p = np.array([0.1, 0.2])
    full = solver.mm_step(x, g, p, gamma=1.0) - x
    half = solver.mm_step(x, g, p, gamma=0.5) - x
    assert np.allclose(half, 0.5 * full, rtol=1e-15)


def test_mm_step_zero_gradient_is_fixed_point():
    x = np.array([[0.3], [0.4]])
    out = solver.mm_step(x, np.zeros_like(x), np.full_like(x, 0.2), gamma=1.0)
    assert np.array_equal(out, x)


def test_mm_step_projects_onto_minimum_norm_sphere():
    x = np.array([3e-4, 4e-4])
    out = solver.mm_step(x, np.zeros(2), np.ones(2), gamma=1.0, upsilon=1e-2)
    assert np.linalg.norm(out) == pytest.approx(1e-2, rel=1e-12)
    assert out[0] / out[1] == pytest.approx(0.75, rel=1e-12)


def test_mm_step_projection_inactive_outside_sphere():
    x = np.array([3.0, 4.0])
    out = solver.mm_step(x, np.zeros(2), np.ones(2), gamma=1.0, upsilon=1e-2)
    assert np.array_equal(out, x)


@pytest.mark.parametrize("gamma", [0.0, 2.0, -0.5, 2.5])
def test_mm_step_rejects_gamma_outside_open_interval(gamma):
    one = np.ones(2)
    with pytest.raises(InvalidInputError):
        solver.mm_step(one, one, one, gamma=gamma)


def test_mm_step_accepts_overrelaxation_below_two():
    one = np.ones(2)
    out = solver.mm_step(one, one, 0.1 * one, gamma=1.999)
    assert np.all(np.isfinite(out))


@pytest.mark.parametrize("bad_p", [[0.0, 0.1], [-0.1, 0.1], [np.nan, 0.1]])
def test_mm_step_rejects_nonpositive_step_vector(bad_p):
    one = np.ones(2)
    with pytest.raises(InvalidInputError):
        solver.mm_step(one, one, np.array(bad_p), gamma=1.0)


def test_mm_step_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        solver.mm_step(np.ones(3), np.ones(2), np.ones(3), gamma=1.0)


def test_mm_step_collapse_to_zero_raises():
    x = np.array([1.0, 0.0])
    g = np.array([1.0, 0.0])
    with pytest.raises(NumericError):
        solver.mm_step(x, g, np.ones(2), gamma=1.0, upsilon=1e-2)


# ---------------------------------------------------------------------------
# SolverConfig validation


@pytest.mark.parametrize(
    "kwargs",
    [
        {"inner_iters": 0},
        {"gamma": 0.0},
        {"gamma": 2.0},
        {"init_scale": 0.0},
        {"majorant_mode": "newton"},
        {"curvature_refresh": "sometimes"},
        {"nu_lo": 0.0},
        {"seed": -1},
        {"gd_step": 0.0},
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        solver.SolverConfig(**kwargs)


def test_mode_registry_contents():
    assert solver.MAJORANT_MODES == (
        "learned",
        "analytic-fixed",
        "spectral-fixed",
        "gradient-descent-baseline",
    )


# ---------------------------------------------------------------------------
# solve_lower


def test_solver_converges_on_identity_cosine_fit():
    # lam = 0 with an identity leadfield reduces to cosine alignment; the
    # analytic step contracts the misalignment geometrically.
    inst = _aligned_instance(seed=0)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=0)
    spec = helpers.default_spec(lam=0.0)
    cfg = solver.SolverConfig(inner_iters=40, majorant_mode="analytic-fixed", seed=1)
    trace = solver.solve_lower(inst, phi, pred, cfg, spec)
    assert trace.objectives[-1] < 1e-6
    assert trace.descent_violations == 0


def test_analytic_fixed_never_increases_objective():
    spec = helpers.default_spec(lam=1.0)
    for seed in range(50):
        inst = helpers.make_instance(n=4, s=8, t=2, seed=seed)
        phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=seed)
        cfg = solver.SolverConfig(
            inner_iters=10, majorant_mode="analytic-fixed", seed=seed
        )
        trace = solver.solve_lower(inst, phi, pred, cfg, spec)
        assert trace.descent_violations == 0
        diffs = np.diff(trace.objectives)
        assert np.all(diffs <= 1e-10)


def test_learned_projected_never_increases_objective():
    spec = helpers.default_spec(lam=1.0)
    for seed in range(50):
        inst = helpers.make_instance(n=4, s=8, t=2, seed=seed)
        phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=seed)
        cfg = solver.SolverConfig(inner_iters=10, majorant_mode="learned", seed=seed)
        trace = solver.solve_lower(inst, phi, pred, cfg, spec)
        assert trace.descent_violations == 0
        assert np.all(np.diff(trace.objectives) <= 1e-10)


def test_learned_step_vector_stays_in_interval():
    spec = helpers.default_spec(lam=1.0)
    inst = helpers.make_instance(n=4, s=8, t=2, seed=9)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=9)
    cfg = solver.SolverConfig(inner_iters=10, majorant_mode="learned", seed=9)
    trace = solver.solve_lower(inst, phi, pred, cfg, spec)
    for lo, hi, pmin, pmax in zip(
        trace.nu_los, trace.nu_his, trace.p_min, trace.p_max
    ):
        assert lo <= pmin + 1e-18
        assert pmax <= hi + 1e-18


def test_spectral_fixed_descends_from_aligned_start():
    spec = helpers.default_spec(lam=1.0)
    for seed in range(5):
        inst = helpers.make_instance(n=4, s=8, t=1, seed=seed)
        phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=seed)
        xls = np.linalg.lstsq(inst.L, inst.Y, rcond=None)[0]
        x0 = 0.01 * xls / np.linalg.norm(xls)
        cfg = solver.SolverConfig(inner_iters=10, majorant_mode="spectral-fixed")
        trace = solver.solve_lower(inst, phi, pred, cfg, spec, x0=x0)
        assert trace.descent_violations == 0
        assert trace.objectives[-1] <= trace.objectives[0]


def test_trace_lengths_single_iteration():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=4)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=4)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(inner_iters=1, seed=4)
    trace = solver.solve_lower(inst, phi, pred, cfg, spec)
    assert len(trace.objectives) == 2
    assert len(trace.fidelity) == 2
    assert len(trace.regularizer) == 2
    assert len(trace.gradient_norms) == 1
    assert len(trace.states) == 2
    assert len(trace.p_vectors) == 1
    assert np.array_equal(trace.states[0], trace.x_init)
    assert np.array_equal(trace.states[-1], trace.x_final)


def test_trace_objective_parts_sum():
    inst = helpers.make_instance(n=4, s=8, t=2, seed=5)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=5)
    spec = helpers.default_spec(lam=0.7)
    cfg = solver.SolverConfig(inner_iters=5, seed=5)
    trace = solver.solve_lower(inst, phi, pred, cfg, spec)
    for total, fid, reg in zip(trace.objectives, trace.fidelity, trace.regularizer):
        assert total == pytest.approx(fid + spec.lam * reg, rel=1e-12)


def test_trace_history_toggles():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=6)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=6)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(inner_iters=3, seed=6, keep_states=False, keep_p=False)
    trace = solver.solve_lower(inst, phi, pred, cfg, spec)
    assert trace.states == []
    assert trace.p_vectors == []
    assert trace.x_init is not None
    assert trace.x_final is not None
    assert len(trace.p_min) == 3


def test_trace_dict_is_json_ready():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=7)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=7)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(inner_iters=4, seed=7)
    trace = solver.solve_lower(inst, phi, pred, cfg, spec)
    payload = json.loads(json.dumps(trace.to_dict()))
    assert payload["iterations"] == 4
    assert payload["mode"] == "learned"
    assert len(payload["objectives"]) == 5
    assert payload["descent_violations"] == 0


def test_gd_baseline_uses_given_step_everywhere():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=8)
    phi, _ = helpers.make_networks(8, hidden=(6, 6), seed=8)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(
        inner_iters=6, majorant_mode="gradient-descent-baseline", gd_step=0.05, seed=8
    )
    trace = solver.solve_lower(inst, phi, None, cfg, spec)
    assert trace.nu_los == [0.05] * 6
    assert trace.nu_his == [0.05] * 6
    assert trace.p_min == [0.05] * 6
    assert trace.p_max == [0.05] * 6


def test_gd_baseline_defaults_to_initial_analytic_step():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=8)
    phi, _ = helpers.make_networks(8, hidden=(6, 6), seed=8)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(
        inner_iters=5, majorant_mode="gradient-descent-baseline", seed=8
    )
    trace = solver.solve_lower(inst, phi, None, cfg, spec)
    interval0 = curvature.valid_interval(trace.x_init, inst, phi, spec)
    assert trace.nu_his == [pytest.approx(interval0.nu_hi, rel=1e-12)] * 5


def test_frozen_curvature_reuses_initial_interval():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=9)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=9)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(
        inner_iters=6, majorant_mode="analytic-fixed",
        curvature_refresh="freeze", seed=9,
    )
    trace = solver.solve_lower(inst, phi, pred, cfg, spec)
    assert len(set(trace.nu_his)) == 1
    refreshed = solver.solve_lower(
        inst, phi, pred,
        solver.SolverConfig(inner_iters=6, majorant_mode="analytic-fixed", seed=9),
        spec,
    )
    assert len(set(refreshed.nu_his)) > 1


def test_learned_mode_requires_predictor():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=0)
    phi, _ = helpers.make_networks(8, hidden=(6, 6), seed=0)
    with pytest.raises(ConfigError):
        solver.solve_lower(
            inst, phi, None, solver.SolverConfig(), helpers.default_spec()
        )


def test_solver_seed_reproducibility():
    inst = helpers.make_instance(n=4, s=8, t=2, seed=10)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=10)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(inner_iters=5, seed=10)
    a = solver.solve_lower(inst, phi, pred, cfg, spec)
    b = solver.solve_lower(inst, phi, pred, cfg, spec)
    assert np.array_equal(a.x_final, b.x_final)
    assert a.objectives == b.objectives
    c = solver.solve_lower(inst, phi, pred, cfg, spec, seed=11)
    assert not np.array_equal(a.x_init, c.x_init)


def test_solver_shared_bounds_do_not_change_result():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=11)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=11)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(inner_iters=5, seed=11)
    from curvmm import linalg

    a = solver.solve_lower(inst, phi, pred, cfg, spec)
    b = solver.solve_lower(
        inst, phi, pred, cfg, spec,
        leadfield_norm=linalg.spectral_norm(inst.L),
        jac_bound=curvature.network_jacobian_bound(phi),
        hess_bound=curvature.network_hessian_bound(phi),
    )
    assert np.array_equal(a.x_final, b.x_final)


def test_solver_accepts_explicit_start():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=12)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=12)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(inner_iters=2, seed=12)
    x0 = np.full((8, 1), 0.25)
    trace = solver.solve_lower(inst, phi, pred, cfg, spec, x0=x0)
    assert np.array_equal(trace.x_init, x0)


def test_solver_rejects_bad_start():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=12)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=12)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(inner_iters=2, seed=12)
    with pytest.raises(ShapeError):
        solver.solve_lower(inst, phi, pred, cfg, spec, x0=np.ones((8, 2)))
    with pytest.raises(InvalidInputError):
        solver.solve_lower(
            inst, phi, pred, cfg, spec, x0=np.full((8, 1), np.nan)
        )


def test_solver_labels_domain_failure_at_start():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=13)
    phi, pred = helpers.make_networks(8, hidden=(6, 6), seed=13)
    spec = helpers.default_spec()
    cfg = solver.SolverConfig(inner_iters=2, seed=13)
    with pytest.raises(DomainError) as exc_info:
        solver.solve_lower(
            inst, phi, pred, cfg, spec, x0=np.full((8, 1), 1e-9)
        )
    assert "initial point" in str(exc_info.value)
    assert exc_info.value.constraint == "x_norm"


# ---------------------------------------------------------------------------
# calibrate_amplitude


def test_calibration_recovers_exact_scale():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 2))
    inst = InverseProblemInstance(
        X_true=2.0 * x, Y=2.0 * x, L=np.eye(6), snr_db=np.inf, seed=0
    )
    out = solver.calibrate_amplitude(inst, x)
    assert np.allclose(out, 2.0 * x, rtol=1e-12)


def test_calibration_minimizes_measurement_residual():
    inst = helpers.make_instance(n=4, s=8, t=2, seed=14)
    rng = np.random.default_rng(14)
    x = rng.standard_normal((8, 2))
    out = solver.calibrate_amplitude(inst, x)
    base = np.linalg.norm(inst.Y - inst.L @ x)
    best = np.linalg.norm(inst.Y - inst.L @ out)
    assert best <= base + 1e-12
    # First-order optimality of the scalar fit.
    z = inst.L @ x
    c = float(np.sum(inst.Y * z) / np.sum(z * z))
    assert np.allclose(out, c * x, rtol=1e-12)


def test_calibration_rejects_null_projection():
    inst = helpers.make_instance(n=4, s=8, t=1, seed=15)
    with pytest.raises(NumericError):
        solver.calibrate_amplitude(inst, np.zeros((8, 1)))
