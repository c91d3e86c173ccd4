from dataclasses import replace

import numpy as np
import pytest

import photocalib.optimizer as opt
from photocalib.core import CalibrationState, Observation, TrackDatabase
from photocalib.models import ResponseModel, VignetteModel, apply_gamma_ambiguity
from photocalib.optimizer import (
    ExposureKnots,
    InsufficientDataError,
    OptimizerConfig,
    build_problem,
    check_constraints,
    energy,
    gradient_weight,
    huber_loss,
    huber_weight,
    jacobian_row,
    jacobian_rows,
    normal_equations,
    optimize_block,
    reject_outliers,
    residuals,
    run_rounds,
    step_joint,
    step_params,
    step_radiances,
)

from conftest import synthetic_database


def perturbed(truth, seed=1, scale=1.0):
    rng = np.random.default_rng(seed)
    e = truth.exposures * np.exp(rng.normal(0, 0.05 * scale, len(truth.exposures)))
    e[0] = truth.exposures[0]
    return replace(
        truth,
        response=truth.response.with_coeffs(truth.response.coeffs + rng.normal(0, 0.01 * scale, 4)),
        vignette=truth.vignette.with_coeffs(truth.vignette.coeffs + rng.normal(0, 0.02 * scale, 3)),
        exposures=e,
        radiances=np.clip(truth.radiances * np.exp(rng.normal(0, 0.05 * scale, truth.radiances.shape)), 0, 1),
    )


def dense_param_jacobian(problem, state):
    j = jacobian_rows(problem, state)
    n, F = len(problem), problem.n_frames
    A = np.zeros((n, 7 + F))
    A[:, :4] = j.dc
    A[:, 4:7] = j.dv
    A[np.arange(n), 7 + problem.frame] = j.de
    return j, A


# -- loss terms


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(huber_h=0)
    with pytest.raises(ValueError):
        OptimizerConfig(rejection_fraction=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(grad_mu=-1)


def test_huber_examples():
    assert huber_loss(2.5, 5.0) == pytest.approx(3.125)
    assert huber_loss(-10.0, 5.0) == pytest.approx(37.5)
    assert huber_loss(5.0, 5.0) == pytest.approx(12.5)
    assert huber_weight(10.0, 5.0) == pytest.approx(0.5)
    assert huber_weight(1.0, 5.0) == 1.0


def test_gradient_weight_examples():
    np.testing.assert_allclose(gradient_weight([0.0, 50.0, 150.0], 50.0), [1.0, 0.5, 0.25])
    with pytest.raises(ValueError):
        gradient_weight(-1.0, 50.0)


def test_exposure_knots_interpolate_geometrically():
    k = ExposureKnots.every(5, 2)
    np.testing.assert_array_equal(k.knots, [0, 2, 4])
    e = k.expand(np.array([1.0, 4.0, 4.0]))
    np.testing.assert_allclose(e, [1.0, 2.0, 4.0, 4.0, 4.0])
    # last frame always a knot
    np.testing.assert_array_equal(ExposureKnots.every(6, 4).knots, [0, 4, 5])


def test_knot_jacobian_matches_finite_differences():
    k = ExposureKnots.every(7, 3)
    kv = np.array([1.0, 1.7, 0.6])
    m = k.jacobian(k.expand(kv))
    for j in range(3):
        d = np.zeros(3)
        d[j] = 1e-6
        fd = (k.expand(kv + d) - k.expand(kv - d)) / 2e-6
        np.testing.assert_allclose(m[:, j], fd, rtol=1e-6, atol=1e-9)


# -- residuals and derivatives


def test_exact_data_has_zero_energy(tiny_problem):
    problem, truth = tiny_problem
    assert np.abs(residuals(problem, truth)).max() < 1e-9
    assert energy(problem, truth) < 1e-15


def test_kernel_energy_matches_numpy(tiny_problem):
    problem, truth = tiny_problem
    cfg = OptimizerConfig(huber_h=2.0)
    state = perturbed(truth, scale=3.0)
    e_kernel = energy(problem, state, cfg)
    e_numpy = energy(problem, state, cfg, r=residuals(problem, state))
    assert e_kernel == pytest.approx(e_numpy, rel=1e-10)


def test_normal_equations_match_dense(tiny_problem):
    problem, truth = tiny_problem
    cfg = OptimizerConfig(huber_h=2.0)
    state = perturbed(truth, scale=3.0)
    j, A = dense_param_jacobian(problem, state)
    w = problem.w_grad * huber_weight(j.r, cfg.huber_h)
    H = A.T @ (w[:, None] * A)
    g = A.T @ (w * j.r)
    h_cv, g_cv, h_ce, h_ee, g_e = normal_equations(problem, state, cfg)
    np.testing.assert_allclose(h_cv, H[:7, :7], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(h_ce, H[:7, 7:], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(h_ee, np.diag(H[7:, 7:]), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(g_cv, g[:7], rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(g_e, g[7:], rtol=1e-9, atol=1e-9)


def test_jacobian_hand_example():
    db = TrackDatabase(64, 48, 1, [0])
    db.add_observation(0, Observation(0, (10.0, 30.0), np.array([100.0]), np.zeros(1)))
    problem = build_problem(db)
    resp = ResponseModel()
    vig = VignetteModel.for_image(64, 48)
    state = CalibrationState(resp, vig, np.array([2.0]), np.array([[0.25]]), [0])
    R2 = problem.r2[0]
    row = jacobian_row(problem, state, 0)
    np.testing.assert_allclose(row[:4], -resp.basis_values(np.array([0.5]))[:, 0])
    np.testing.assert_allclose(row[4:7], -255.0 * 2.0 * 0.25 * np.array([R2, R2**2, R2**3]))
    assert row[7] == pytest.approx(-255.0 * 0.25)
    assert jacobian_rows(problem, state).dL[0] == pytest.approx(-255.0 * 2.0)


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    db, truth = synthetic_database(n_frames=3, n_points=4, seed=seed)
    problem = build_problem(db)
    state = replace(
        truth,
        response=replace(truth.response.with_coeffs(rng.uniform(-0.02, 0.02, 4)), gamma=rng.uniform(0.5, 2.0)),
        vignette=replace(truth.vignette.with_coeffs(rng.uniform(-0.3, 0.0, 3)), gamma=rng.uniform(0.5, 2.0)),
    )
    j = jacobian_rows(problem, state)
    h = 1e-6

    def shifted(k, d):
        if k < 4:
            c = state.response.coeffs.copy()
            c[k] += d
            return replace(state, response=state.response.with_coeffs(c))
        if k < 7:
            c = state.vignette.coeffs.copy()
            c[k - 4] += d
            return replace(state, vignette=state.vignette.with_coeffs(c))
        e = state.exposures.copy()
        e += d
        return replace(state, exposures=e)

    analytic = np.column_stack([j.dc, j.dv, j.de])
    for k in range(8):
        fd = (residuals(problem, shifted(k, h)) - residuals(problem, shifted(k, -h))) / (2 * h)
        np.testing.assert_allclose(analytic[:, k], fd, rtol=1e-4, atol=1e-6)
    L = state.radiances.reshape(-1)
    fd = []
    for i in range(len(problem)):
        Lp, Lm = L.copy(), L.copy()
        Lp[problem.rad[i]] += h
        Lm[problem.rad[i]] -= h
        rp = residuals(problem, replace(state, radiances=Lp.reshape(state.radiances.shape)), np.array([i]))
        rm = residuals(problem, replace(state, radiances=Lm.reshape(state.radiances.shape)), np.array([i]))
        fd.append((rp[0] - rm[0]) / (2 * h))
    np.testing.assert_allclose(j.dL, fd, rtol=1e-4, atol=1e-6)


@pytest.mark.parametrize("gamma", [0.5, 2.0, 3.0])
def test_energy_is_gauge_invariant(tiny_problem, gamma):
    problem, truth = tiny_problem
    state = perturbed(truth, scale=2.0)
    e0 = energy(problem, state)
    assert energy(problem, apply_gamma_ambiguity(state, gamma)) == pytest.approx(e0, rel=1e-9)
    scaled = replace(state, exposures=state.exposures * 10.0, radiances=state.radiances / 10.0)
    assert energy(problem, scaled) == pytest.approx(e0, rel=1e-9)


# -- LM steps


def test_param_step_at_truth_is_zero(tiny_problem):
    problem, truth = tiny_problem
    state, accepted, _, info = step_params(problem, truth, OptimizerConfig(), 1.0)
    assert accepted
    assert info.step_norm <= 1e-8


def test_param_step_matches_dense_gauss_newton():
    db, truth = synthetic_database(n_frames=3, n_points=4)
    problem = build_problem(db)
    cfg = OptimizerConfig()
    state = replace(truth, response=truth.response.with_coeffs([0.004, -0.002, 0.001, 0.0]),
                    exposures=truth.exposures * np.array([1.0, 1.02, 0.99]))
    lam = 0.1
    j, A = dense_param_jacobian(problem, state)
    A = np.delete(A, 7, axis=1)   # first exposure is the gauge
    w = problem.w_grad * huber_weight(j.r, cfg.huber_h)
    H = A.T @ (w[:, None] * A)
    dx = np.linalg.solve(H + lam * np.diag(np.diag(H)), A.T @ (w * j.r))

    new, accepted, lam_new, _ = step_params(problem, state, cfg, lam)
    assert accepted and lam_new == pytest.approx(lam * cfg.lm_lambda_accept)
    got = np.concatenate([state.response.coeffs - new.response.coeffs,
                          state.vignette.coeffs - new.vignette.coeffs,
                          state.exposures[1:] - new.exposures[1:]])
    np.testing.assert_allclose(got, dx, atol=1e-8)
    assert new.exposures[0] == state.exposures[0]
    np.testing.assert_array_equal(new.radiances, state.radiances)


def test_joint_step_matches_dense_gauss_newton():
    db, truth = synthetic_database(n_frames=4, n_points=5, patch=3, seed=2)
    problem = build_problem(db)
    cfg = OptimizerConfig()
    state = perturbed(truth, seed=3, scale=0.3)
    lam = 0.2
    j, A = dense_param_jacobian(problem, state)
    n, R = len(problem), state.radiances.size
    B = np.zeros((n, 7 + problem.n_frames + R))
    B[:, : 7 + problem.n_frames] = A
    B[np.arange(n), 7 + problem.n_frames + problem.rad] = j.dL
    B = np.delete(B, 7, axis=1)
    w = problem.w_grad * huber_weight(j.r, cfg.huber_h)
    H = B.T @ (w[:, None] * B)
    dx = np.linalg.solve(H + lam * np.diag(np.diag(H)), B.T @ (w * j.r))

    new, accepted, _, _ = step_joint(problem, state, cfg, lam)
    assert accepted
    got = np.concatenate([state.response.coeffs - new.response.coeffs,
                          state.vignette.coeffs - new.vignette.coeffs,
                          state.exposures[1:] - new.exposures[1:]])
    np.testing.assert_allclose(got, dx[: 6 + problem.n_frames], atol=1e-8)
    expect_L = np.clip(state.radiances.reshape(-1) - dx[6 + problem.n_frames:], 0, 1)
    np.testing.assert_allclose(new.radiances.reshape(-1), expect_L, atol=1e-8)


def test_step_reduces_energy_with_descent_sign(tiny_problem):
    problem, truth = tiny_problem
    state = replace(truth, exposures=truth.exposures * np.array([1.0, 1.1, 0.9, 1.05]))
    new, accepted, _, info = step_params(problem, state, OptimizerConfig(), 1e-3)
    assert accepted and info.energy_after < 0.1 * info.energy_before


def test_non_monotone_step_rejected(tiny_problem, monkeypatch):
    problem, truth = tiny_problem
    F = problem.n_frames

    def fake(problem, state, cfg):
        return np.eye(7), np.array([1000.0, 0, 0, 0, 0, 0, 0]), np.zeros((7, F)), np.ones(F), np.zeros(F)

    monkeypatch.setattr(opt, "normal_equations", fake)
    cfg = OptimizerConfig()
    new, accepted, lam, info = step_params(problem, truth, cfg, 0.0 + 1e-12)
    assert not accepted
    assert info.reason == "non-monotone response"
    assert new is truth
    assert lam == pytest.approx(1e-12 * cfg.lm_lambda_reject)


def test_radiance_step_hand_example():
    db = TrackDatabase(64, 48, 1, [0])
    db.add_observation(0, Observation(0, (31.5, 23.5), np.array([51.0]), np.zeros(1)))
    problem = build_problem(db)
    state = CalibrationState(ResponseModel(), VignetteModel.for_image(64, 48), np.array([1.0]),
                             np.array([[0.1]]), [0])
    new = step_radiances(problem, state, OptimizerConfig(), 0.0)
    assert new.radiances[0, 0] == pytest.approx(0.2)


def test_radiance_step_leaves_unobserved_points():
    db = TrackDatabase(64, 48, 1, [0])
    db.add_observation(0, Observation(0, (31.5, 23.5), np.array([51.0]), np.zeros(1)))
    db.add_observation(1, Observation(0, (20.0, 20.0), np.array([255.0]), np.zeros(1), saturated=True))
    problem = build_problem(db)
    assert problem.n_saturated_obs == 1
    state = CalibrationState(ResponseModel(), VignetteModel.for_image(64, 48), np.array([1.0]),
                             np.array([[0.1], [0.7]]), [0])
    new = step_radiances(problem, state, OptimizerConfig(), 0.0)
    assert new.radiances[1, 0] == 0.7


# -- block level


def test_energy_monotone_and_decreasing():
    db, truth = synthetic_database(n_frames=6, n_points=60, patch=3, seed=4)
    problem = build_problem(db)
    cfg = OptimizerConfig(min_points=10)
    res = optimize_block(problem, perturbed(truth, scale=2.0), cfg)
    E = res.energies()
    assert all(b <= a for a, b in zip(E, E[1:]))
    assert E[-1] < 0.01 * E[0]


def test_optimization_is_deterministic():
    db, truth = synthetic_database(n_frames=5, n_points=60, seed=5)
    cfg = OptimizerConfig(min_points=10)
    a = optimize_block(build_problem(db), perturbed(truth), cfg)
    b = optimize_block(build_problem(db), perturbed(truth), cfg)
    assert [t.energy for t in a.trace] == [t.energy for t in b.trace]
    np.testing.assert_array_equal(a.state.exposures, b.state.exposures)


def test_converged_state_is_a_fixed_point(tiny_problem):
    problem, truth = tiny_problem
    state, _ = run_rounds(problem, truth, OptimizerConfig(), max_rounds=3)
    np.testing.assert_allclose(state.exposures, truth.exposures, atol=1e-9)
    np.testing.assert_allclose(state.vignette.coeffs, truth.vignette.coeffs, atol=1e-9)


def test_reject_outliers_removes_largest():
    db, truth = synthetic_database(n_frames=4, n_points=25, seed=6)
    problem = build_problem(db)
    state = perturbed(truth, scale=3.0)
    assert len(problem) == 100
    assert reject_outliers(problem, state, 0.0) == 0
    assert reject_outliers(problem, state, 0.2) == 20
    r = np.abs(residuals(problem, state))
    assert (~problem.active).sum() == 20
    assert r[~problem.active].min() >= r[problem.active].max()
    with pytest.raises(ValueError):
        reject_outliers(problem, state, 1.0)


def test_too_few_points_rejected(tiny_problem):
    problem, _ = tiny_problem
    with pytest.raises(InsufficientDataError, match="insufficient correspondences"):
        check_constraints(problem, OptimizerConfig())


def test_static_points_fail_radial_guard():
    db = TrackDatabase(64, 48, 1, [0, 1, 2])
    rng = np.random.default_rng(0)
    for p in range(60):
        loc = tuple(rng.uniform(5, 40, 2))
        for f in range(3):
            db.add_observation(p, Observation(f, loc, np.array([100.0]), np.zeros(1)))
    with pytest.raises(InsufficientDataError, match="radial"):
        optimize_block(db)


def test_empty_database_rejected():
    with pytest.raises(InsufficientDataError):
        optimize_block(TrackDatabase(64, 48, 1, []))
