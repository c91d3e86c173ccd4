import csv
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from photocalib.cli import main
from photocalib.core import CalibrationResult, read_calibration, write_calibration

SMALL_SPEC = """\
width = 160
height = 120
frames = 60
motion_radius = 30
motion_period = 60
texture_octaves = 24 12 6
response_gamma = 0.8
vignette = -0.3 -0.1 0
exposure_profile = sinusoid
exposure_min = 0.7
exposure_max = 1.4
exposure_period = 30
"""


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = root / "spec.txt"
    spec.write_text(SMALL_SPEC)
    assert main(["synth", "--spec", str(spec), "--out", str(root / "seq")]) == 0
    return root / "seq"


def test_synth_writes_sequence_and_ground_truth(synth_dir):
    assert len(list((synth_dir / "frames").glob("*.png"))) == 60
    gt = read_calibration(synth_dir / "gt_calib.txt")
    assert len(gt.exposures) == 60
    rows = (synth_dir / "times.txt").read_text().splitlines()
    assert rows[0].split()[0] == "0" and len(rows) == 60


def test_bad_reject_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["calibrate-offline", "--input", str(tmp_path), "--out", str(tmp_path / "o"), "--reject", "1.5"])
    assert exc.value.code == 64


def test_unknown_flag_and_even_patch_rejected(tmp_path):
    for extra in (["--bogus"], ["--patch", "4"]):
        with pytest.raises(SystemExit) as exc:
            main(["calibrate-offline", "--input", str(tmp_path), "--out", str(tmp_path / "o"), *extra])
        assert exc.value.code == 64


def test_empty_directory_is_io_error(tmp_path):
    (tmp_path / "empty").mkdir()
    out = str(tmp_path / "o")
    assert main(["calibrate-offline", "--input", str(tmp_path / "empty"), "--out", out]) == 1
    assert main(["calibrate-online", "--input", str(tmp_path / "empty"), "--out", out, "--sync"]) == 1
    assert main(["calibrate-offline", "--input", str(tmp_path / "missing"), "--out", out]) == 1


def test_textureless_sequence_is_quality_failure(tmp_path):
    d = tmp_path / "flat"
    d.mkdir()
    for i in range(5):
        Image.fromarray(np.full((48, 64), 100, np.uint8)).save(d / f"{i:05d}.png")
    assert main(["calibrate-offline", "--input", str(d), "--out", str(tmp_path / "o")]) == 2


def test_evaluate_ground_truth_against_itself(synth_dir, capsys):
    gt = str(synth_dir / "gt_calib.txt")
    exp = str(synth_dir / "gt_exposures.csv")
    assert main(["evaluate", "--est", gt, "--gt", gt, "--est-exp", exp, "--gt-exp", exp]) == 0
    report = dict(line.split(",") for line in capsys.readouterr().out.splitlines())
    assert set(report) == {"response_gamma", "response_rmse", "vignette_rmse", "exposure_mean_rel_err"}
    assert float(report["response_gamma"]) == 1.0
    assert float(report["response_rmse"]) == 0.0
    assert float(report["vignette_rmse"]) == 0.0
    assert float(report["exposure_mean_rel_err"]) == 0.0


def test_evaluate_threshold_exit_code(synth_dir, tmp_path):
    flat = CalibrationResult.identity(160, 120)
    write_calibration(flat, tmp_path / "flat.txt")
    gt = str(synth_dir / "gt_calib.txt")
    args = ["evaluate", "--est", str(tmp_path / "flat.txt"), "--gt", gt]
    assert main(args) == 0
    assert main(args + ["--max-vignette-rmse", "0.02"]) == 2


def test_correct_with_identity_reproduces_input(synth_dir, tmp_path):
    write_calibration(CalibrationResult.identity(160, 120), tmp_path / "id.txt")
    out = tmp_path / "corr"
    assert main(["correct", "--input", str(synth_dir / "frames"), "--calib", str(tmp_path / "id.txt"),
                 "--out", str(out)]) == 0
    for name in ("00000.png", "00031.png"):
        a = np.asarray(Image.open(synth_dir / "frames" / name))
        b = np.asarray(Image.open(out / name))
        np.testing.assert_array_equal(a, b)


def test_offline_cli_outputs_and_reproducibility(synth_dir, tmp_path):
    args = ["calibrate-offline", "--input", str(synth_dir / "frames"), "--times", str(synth_dir / "times.txt"),
            "--block", "60", "--overlap", "10", "--features", "200", "--cell", "16"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("calib.txt", "exposures.csv", "energy.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with open(tmp_path / "a" / "energy.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["step"] == "init"
    read_calibration(tmp_path / "a" / "calib.txt").validate()


def test_online_cli_writes_incrementally(synth_dir, tmp_path):
    args = ["calibrate-online", "--input", str(synth_dir / "frames"), "--sync", "--block", "25",
            "--rounds", "5", "--features", "200", "--cell", "16", "--irradiance16"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("calib.txt", "exposures.csv", "exposures_online.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    with open(a / "exposures_online.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["frame_index"]) for r in rows] == list(range(60))
    assert len(list((a / "corrected").glob("?????.png"))) == 60
    irr = np.asarray(Image.open(a / "corrected" / "00010_irr16.png"))
    assert irr.dtype == np.uint16


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "photocalib", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "calibrate-offline" in res.stdout
