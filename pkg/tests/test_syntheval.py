import math

import numpy as np
import pytest

from photocalib.core import CalibrationState, Observation, TrackDatabase
from photocalib.models import VignetteModel
from photocalib.optimizer import build_problem, energy
from photocalib.syntheval import (
    SynthSpec,
    align_exposures,
    align_response,
    evaluate,
    exposure_series,
    gamma_response,
    generate,
    ground_truth_result,
    vignette_rmse,
)

TINY = dict(width=48, height=32, frames=3, motion_radius=4.0, texture_octaves=(12.0, 6.0))


def test_spec_text_round_trip():
    spec = SynthSpec(frames=7, vignette=(-0.3, -0.1, -0.05), exposure_profile="ramp",
                     exposure_min=0.5, exposure_max=2.0, noise_sigma=1.0)
    assert SynthSpec.loads(spec.dumps()) == spec


def test_spec_rejects_bad_entries():
    with pytest.raises(ValueError, match="line 1"):
        SynthSpec.loads("colour = red\n")
    with pytest.raises(ValueError, match="frames"):
        SynthSpec.loads("frames = many\n")
    with pytest.raises(ValueError):
        SynthSpec(exposure_profile="zigzag")
    with pytest.raises(ValueError):
        SynthSpec(vignette=(-2.0, 0.0, 0.0))


def test_exposure_profiles():
    ramp = exposure_series(SynthSpec(frames=5, exposure_profile="ramp", exposure_min=1, exposure_max=16))
    np.testing.assert_allclose(ramp, [1, 2, 4, 8, 16])
    step = exposure_series(SynthSpec(frames=4, exposure_profile="step", exposure_min=1, exposure_max=2,
                                     exposure_step_frame=2))
    np.testing.assert_array_equal(step, [1, 1, 2, 2])
    sin = exposure_series(SynthSpec(frames=200, exposure_profile="sinusoid", exposure_min=0.5, exposure_max=2))
    assert sin.min() == pytest.approx(0.5) and sin.max() == pytest.approx(2.0)


def test_identity_spec_frames_are_quantized_radiance():
    seq = generate(SynthSpec(**TINY))
    yy, xx = np.mgrid[0:32, 0:48].astype(float)
    for i, f in enumerate(seq.frames):
        expect = np.floor(255.0 * seq.radiance(xx, yy, i) + 0.5)
        np.testing.assert_array_equal(f.image, expect.astype(np.uint8))


def test_gamma_pixel_example():
    # 255 * 0.5 ** (1 / 2.2) = 186.08
    assert gamma_response(2.2).evaluate(0.5) == pytest.approx(186.08, abs=0.01)
    seq = generate(SynthSpec(response_gamma=2.2, **TINY))
    cx, cy = 24, 16
    L = float(seq.radiance(cx, cy, 0))
    V = seq.vignette.evaluate(cx, cy)
    assert V == pytest.approx(1.0, abs=1e-3)
    assert seq.frames[0].image[cy, cx] == math.floor(255.0 * (V * L) ** (1 / 2.2) + 0.5)
    assert math.floor(255.0 * 0.5 ** (1 / 2.2) + 0.5) == 186


def test_step_raises_intensity():
    seq = generate(SynthSpec(**{**TINY, "frames": 12}, exposure_profile="step", exposure_min=0.5,
                             exposure_max=1.0, exposure_step_frame=10))
    before = seq.frames[9].image.astype(float).mean()
    after = seq.frames[10].image.astype(float).mean()
    assert after / before == pytest.approx(2.0, rel=0.05)


def test_noise_is_seeded():
    spec = SynthSpec(noise_sigma=2.0, **TINY)
    a, b = generate(spec), generate(spec)
    np.testing.assert_array_equal(a.frames[1].image, b.frames[1].image)
    assert not np.array_equal(a.frames[1].image, generate(SynthSpec(noise_sigma=0.0, **TINY)).frames[1].image)


def test_gt_energy_within_quantization_bound():
    spec = SynthSpec(response_gamma=0.7, vignette=(-0.3, -0.1, -0.05), exposure_profile="ramp",
                     exposure_min=0.6, exposure_max=1.2, **TINY)
    seq = generate(spec)
    rng = np.random.default_rng(0)
    db = TrackDatabase(spec.width, spec.height, 1, list(range(spec.frames)))
    L = []
    for p in range(300):
        f = p % spec.frames
        x, y = int(rng.integers(0, spec.width)), int(rng.integers(0, spec.height))
        L.append(float(seq.radiance(x, y, f)))
        o = float(seq.frames[f].image[y, x])
        db.add_observation(p, Observation(f, (float(x), float(y)), np.array([o]), np.zeros(1),
                                          saturated=o >= 255))
    problem = build_problem(db)
    truth = CalibrationState(seq.response, VignetteModel.for_image(spec.width, spec.height, spec.vignette),
                             seq.exposures, np.array(L).reshape(-1, 1), list(range(spec.frames)))
    n = int(problem.active.sum())
    assert n >= 250
    assert energy(problem, truth) <= n * 0.25 / 3


def test_align_response_examples():
    gt = gamma_response(0.7).lut()
    g, rmse = align_response(gt, gt)
    assert g == 1.0 and rmse == 0.0
    k = np.arange(256) / 255.0
    est = np.interp(k ** 0.5, k, gt)          # gamma transform with 2: f(x ** (1/2))
    g, rmse = align_response(est, gt)
    assert g == pytest.approx(0.5, abs=1e-3)
    assert rmse <= 0.1
    g, rmse = align_response(255.0 * (1 - (1 - k) ** 3), gt)
    assert rmse > 5


def test_align_exposures_examples():
    gt = np.array([0.5, 1.0, 1.7, 2.0])
    g, s, err = align_exposures(gt, gt)
    assert (g, s) == pytest.approx((1.0, 1.0)) and err.max() < 1e-12
    g, s, _ = align_exposures(gt**2, gt)
    assert (g, s) == pytest.approx((0.5, 1.0))
    g, s, _ = align_exposures(3 * gt, gt)
    assert (g, s) == pytest.approx((1.0, 1 / 3))
    g, s, _ = align_exposures(np.ones(3), np.full(3, 2.0))
    assert (g, s) == pytest.approx((1.0, 2.0))
    with pytest.raises(ValueError):
        align_exposures([1.0, 2.0], [1.0])


def test_vignette_rmse_examples():
    v = (-0.3, -0.1, -0.05)
    assert vignette_rmse(v, v, 1.0) == 0.0
    assert vignette_rmse(v, v, 0.5, est_gamma=2.0) == pytest.approx(0.0, abs=1e-12)
    expect = math.sqrt(np.mean((0.3 * np.linspace(0, 1, 256) ** 2) ** 2))
    assert vignette_rmse((0, 0, 0), (-0.3, 0, 0), 1.0) == pytest.approx(expect)
    assert expect == pytest.approx(0.134, abs=1e-3)


def test_evaluate_ground_truth_against_itself():
    spec = SynthSpec(frames=50, response_gamma=0.7, vignette=(-0.3, -0.1, -0.05),
                     exposure_profile="sinusoid", exposure_min=0.5, exposure_max=2.0)
    gt = ground_truth_result(spec)
    rep = evaluate(gt, gt)
    assert rep.response_gamma == 1.0 and rep.exposure_scale == pytest.approx(1.0)
    assert rep.response_rmse == 0.0 and rep.vignette_rmse == 0.0
    assert rep.exposure_mean_rel_err < 1e-12
    assert rep.lines()[0] == "response_gamma,1.000000"
