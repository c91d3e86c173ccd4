import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from photocalib.core import CalibrationState
from photocalib.models import (
    NonMonotoneResponseError,
    ResponseBasis,
    ResponseModel,
    VignetteModel,
    analytic_fallback_basis,
    anchor_gamma,
    apply_gamma_ambiguity,
    fix_gamma,
    forward_model,
    load_emor_basis,
    response_invert,
    vignette_eval,
)
from photocalib.syntheval import gamma_response

coeffs = st.lists(st.floats(-0.3, 0.3), min_size=4, max_size=4)


@given(coeffs)
def test_endpoints_pinned_for_any_coefficients(c):
    m = ResponseModel(np.array(c))
    assert m.evaluate(0.0) == 0.0
    assert m.evaluate(1.0) == 255.0


def test_nan_coefficients_rejected():
    with pytest.raises(ValueError):
        ResponseModel(np.array([np.nan, 0, 0, 0]))


def test_zero_coefficients_give_mean_curve():
    basis = analytic_fallback_basis()
    m = ResponseModel(basis=basis)
    assert m.evaluate(0.5) == pytest.approx(np.interp(0.5, basis.grid, basis.f0))
    assert m.evaluate(0.5) == pytest.approx(127.5)


def test_clamp_and_flag():
    out, flag = ResponseModel().evaluate_flagged(np.array([-0.1, 0.3, 1.2]))
    assert flag.tolist() == [True, False, True]
    assert out[0] == 0.0 and out[2] == 255.0
    with pytest.raises(ValueError):
        ResponseModel().evaluate(np.nan)


def test_derivative_of_linear_fallback():
    d = ResponseModel().derivative(np.linspace(0.05, 0.95, 9))
    np.testing.assert_allclose(d, 255.0, rtol=1e-9)
    with pytest.raises(ValueError):
        ResponseModel().derivative(np.nan)


@pytest.mark.parametrize("gamma", [1.0, 0.7, 2.2])
def test_derivative_matches_finite_differences(gamma):
    m = ResponseModel(np.array([0.2, -0.1, 0.05, 0.02]), gamma=gamma)
    # mid-cell sample points in u so the interpolant is smooth around them
    u = (np.round(np.linspace(0.1, 0.9, 9) * 1023) + 0.5) / 1023
    x = u**gamma
    h = 1e-7
    fd = (m.evaluate(x + h) - m.evaluate(x - h)) / (2 * h)
    np.testing.assert_allclose(m.derivative(x), fd, rtol=1e-4)


def test_inverse_of_linear_and_gamma():
    np.testing.assert_allclose(ResponseModel().invert(), np.arange(256) / 255.0, atol=1e-12)
    inv = response_invert(gamma_response(2.0))       # f(x) = 255 sqrt(x)
    assert inv[64] == pytest.approx((64 / 255) ** 2, rel=1e-3)


@given(coeffs)
def test_inverse_round_trip(c):
    m = ResponseModel(np.array(c))
    if not m.is_monotone():
        with pytest.raises(NonMonotoneResponseError):
            m.invert()
        return
    k = np.arange(256.0)
    assert np.max(np.abs(m.evaluate(m.invert()) - k)) <= 0.5


def test_non_monotone_inverse_names_interval():
    m = ResponseModel(np.array([0.0, 0.0, 0.0, 0.0]), basis=ResponseBasis(
        np.concatenate([np.linspace(0, 200, 512), np.linspace(150, 255, 512)]), np.zeros((4, 1024))))
    with pytest.raises(NonMonotoneResponseError, match=r"interval \[511, 512\]"):
        m.invert()


def test_vignette_center_and_values():
    v = VignetteModel.for_image(320, 240, (-0.3, 0.0, 0.0))
    assert v.evaluate(159.5, 119.5) == 1.0
    assert vignette_eval(v, 0.0, 0.0) == pytest.approx(0.7)
    v = VignetteModel(np.array([-0.1, -0.05, -0.02]))
    assert v.evaluate_r(0.5) == pytest.approx(0.9715625, abs=1e-15)


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.integers(2, 400), st.integers(2, 400))
def test_vignette_center_is_one(c, w, h):
    v = VignetteModel.for_image(w, h, c)
    assert v.evaluate((w - 1) / 2, (h - 1) / 2) == 1.0


def test_forward_model_examples():
    f = ResponseModel()
    v = VignetteModel.for_image(11, 11)
    out, sat = forward_model(f, v, 1.0, 1.0, 5, 5)
    assert out == 255.0
    out, sat = forward_model(f, VignetteModel(np.array([-0.2, 0, 0]), r_norm=1.0), 0.5, 0.5, 1.0, 0.0)
    assert out == pytest.approx(51.0)
    assert not sat
    out, sat = forward_model(f, v, 2.0, 0.9, 5, 5)
    assert out == 255.0 and sat


def _random_state(rng):
    resp = ResponseModel(rng.uniform(-0.02, 0.02, 4))
    vig = VignetteModel.for_image(64, 48, rng.uniform(-0.2, 0.0, 3))
    return CalibrationState(resp, vig, rng.uniform(0.5, 2, 5), rng.uniform(0.05, 0.5, (4, 9)))


def test_gamma_identity_and_errors():
    s = _random_state(np.random.default_rng(0))
    assert apply_gamma_ambiguity(s, 1.0) is s
    with pytest.raises(ValueError):
        apply_gamma_ambiguity(s, 0.0)


@pytest.mark.parametrize("gamma", [0.5, 2.0, 3.0])
def test_gamma_transform_preserves_forward_model(gamma):
    s = _random_state(np.random.default_rng(1))
    t = apply_gamma_ambiguity(s, gamma)
    x, y = np.array([3.0, 30.0, 60.0]), np.array([2.0, 20.0, 40.0])
    for i in range(5):
        a, _ = forward_model(s.response, s.vignette, s.exposures[i], s.radiances[i % 4, :3], x, y)
        b, _ = forward_model(t.response, t.vignette, t.exposures[i], t.radiances[i % 4, :3], x, y)
        np.testing.assert_allclose(a, b, rtol=1e-12)


def test_fix_gamma_closed_forms():
    assert anchor_gamma(ResponseModel()) == pytest.approx(1.0)
    # gamma_response(g) is f(x) = 255 x^(1/g)
    assert anchor_gamma(gamma_response(0.5)) == pytest.approx(2.0, rel=1e-6)     # 255 x^2
    assert anchor_gamma(gamma_response(2.0)) == pytest.approx(0.5, rel=1e-6)     # 255 sqrt(x)
    s = _random_state(np.random.default_rng(2))
    resp, g = fix_gamma(s)
    assert resp.evaluate(0.5) == pytest.approx(127.5, abs=1e-6)
    assert math.isfinite(g)


def _write_emor(path, n=1024, drop=None):
    x = np.linspace(0, 1, 1024)
    lines = ["E =", " ".join(map(str, x))]
    lines += ["f0 =", " ".join(map(str, x**0.5))]
    for k in range(1, 5):
        if k == drop:
            continue
        lines += [f"h({k})=", " ".join(map(str, np.sin(np.pi * k * x)[:n]))]
    lines += ["h(5)=", " ".join(map(str, np.zeros(1024)))]
    path.write_text("\n".join(lines) + "\n")


def test_load_emor_basis(tmp_path):
    _write_emor(tmp_path / "emor.txt")
    b = load_emor_basis(tmp_path / "emor.txt")
    assert b.source == "emor-file"
    assert b.f0[0] == 0.0 and b.f0[-1] == 255.0
    assert np.all(b.h[:, 0] == 0) and np.all(b.h[:, -1] == 0)
    m = ResponseModel(np.array([0.1, 0.2, 0.0, 0.0]), basis=b)
    assert m.evaluate(1.0) == 255.0


def test_emor_errors(tmp_path):
    _write_emor(tmp_path / "short.txt", n=1000)
    with pytest.raises(ValueError, match="1000 samples"):
        load_emor_basis(tmp_path / "short.txt")
    _write_emor(tmp_path / "missing.txt", drop=3)
    with pytest.raises(ValueError, match=r"missing curves h\(3\)"):
        load_emor_basis(tmp_path / "missing.txt")


def test_fallback_basis_construction():
    b = analytic_fallback_basis()
    assert b.source == "analytic-fallback"
    assert np.interp(0.5, b.grid, b.f0) == 127.5
    assert np.all(b.h[:, 0] == 0) and np.all(b.h[:, -1] == 0)
    g = b.h @ b.h.T
    off = g - np.diag(np.diag(g))
    assert np.max(np.abs(off)) < 1e-6 * np.max(np.diag(g))


@settings(max_examples=25)
@given(st.floats(0.1, 10.0))
def test_scale_ambiguity(s):
    st_ = _random_state(np.random.default_rng(3))
    x, y = np.array([10.0, 40.0]), np.array([5.0, 30.0])
    a, _ = forward_model(st_.response, st_.vignette, st_.exposures[0], st_.radiances[0, :2], x, y)
    b, _ = forward_model(st_.response, st_.vignette, st_.exposures[0] * s, st_.radiances[0, :2] / s, x, y)
    np.testing.assert_allclose(a, b, rtol=1e-12)
