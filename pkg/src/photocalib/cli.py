"""Command-line interface.

Exit codes: 0 success, 1 I/O or input error, 2 calibration-quality failure,
64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    CalibrationFormatError,
    SequenceError,
    iter_sequence,
    load_sequence,
    read_calibration,
    read_exposures_csv,
    write_calibration,
    write_exposures_csv,
)
from .models import ResponseModel, load_emor_basis
from .optimizer import InsufficientDataError, OptimizerConfig, write_energy_log
from .tracker import TrackerConfig

EXIT_OK = 0
EXIT_IO = 1
EXIT_QUALITY = 2
EXIT_USAGE = 64

log = logging.getLogger("photocalib")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _odd_int(text: str) -> int:
    v = _positive_int(text)
    if v % 2 == 0:
        raise argparse.ArgumentTypeError(f"must be odd, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {text}")
    return v


def _add_tracker_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features", type=_positive_int, default=500, help="target tracked features per frame")
    p.add_argument("--patch", type=_odd_int, default=5, help="patch size in pixels (odd)")
    p.add_argument("--cell", type=_positive_int, default=32, help="grid cell size for corner sampling")


def _add_optimizer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--huber", type=_positive_float, default=5.0, help="Huber threshold in intensity levels")
    p.add_argument("--grad-mu", type=_positive_float, default=50.0, help="gradient weight constant")
    p.add_argument("--emor", type=Path, help="EMoR basis file (analytic fallback basis when absent)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="photocalib", description="Photometric calibration of auto-exposure video.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate-offline", help="block-wise calibration of a recorded sequence")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--times", type=Path, help="times file 'id timestamp exposure' (ids match filenames)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--block", type=_positive_int, default=200)
    p.add_argument("--overlap", type=_nonneg_int, default=30)
    p.add_argument("--reject", type=_fraction, default=0.2, help="fraction of residuals rejected as outliers")
    p.add_argument("--refine-passes", type=_nonneg_int, default=2,
                   help="re-tracking passes on frames compensated by the current estimate")
    _add_tracker_flags(p)
    _add_optimizer_flags(p)

    p = sub.add_parser("calibrate-online", help="streaming calibration with a background backend")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--window", type=_positive_int, default=10, help="exposure window M")
    p.add_argument("--block", type=_positive_int, default=100, help="backend block length")
    p.add_argument("--stride", type=_positive_int, default=5, help="optimize every n-th exposure in the backend")
    p.add_argument("--rounds", type=_positive_int, default=None, help="backend rounds per block")
    p.add_argument("--sync", action="store_true", help="run the backend synchronously (deterministic)")
    p.add_argument("--irradiance16", action="store_true", help="also write 16-bit irradiance PNGs")
    _add_tracker_flags(p)
    _add_optimizer_flags(p)

    p = sub.add_parser("correct", help="remove response, vignette and exposure from frames")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--calib", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--exposures", type=Path, help="exposures CSV (default: exposures in the calibration file)")
    p.add_argument("--irradiance16", action="store_true", help="also write 16-bit irradiance PNGs")

    p = sub.add_parser("synth", help="render a synthetic sequence with ground truth")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("evaluate", help="compare a calibration with ground truth")
    p.add_argument("--est", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--est-exp", type=Path)
    p.add_argument("--gt-exp", type=Path)
    p.add_argument("--max-response-rmse", type=_positive_float)
    p.add_argument("--max-vignette-rmse", type=_positive_float)
    p.add_argument("--max-exposure-err", type=_positive_float)
    return parser


# -- helpers


def _response(args) -> ResponseModel | None:
    if args.emor is None:
        log.warning("no EMoR basis given, using the analytic fallback basis")
        return None
    return ResponseModel(basis=load_emor_basis(args.emor))


def _tracker_cfg(args) -> TrackerConfig:
    return TrackerConfig(target_features=args.features, patch_size=args.patch, cell_size=args.cell)


def _write_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(img).save(path)


def _write_corrected(out_dir: Path, stem: str, corrected, irradiance16: bool) -> None:
    _write_png(out_dir / f"{stem}.png", corrected.preview)
    if irradiance16:
        irr = np.floor(np.clip(corrected.irradiance, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)
        _write_png(out_dir / f"{stem}_irr16.png", irr)


def _atomic_calibration(calib, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    write_calibration(calib, tmp)
    os.replace(tmp, path)


# -- commands


def cmd_calibrate_offline(args) -> int:
    from .pipeline import OfflineConfig, calibrate_offline

    if args.overlap >= args.block:
        log.error("--overlap must be smaller than --block")
        return EXIT_USAGE
    cfg = OfflineConfig(
        block_size=args.block,
        overlap=args.overlap,
        tracker=_tracker_cfg(args),
        optimizer=OptimizerConfig(huber_h=args.huber, grad_mu=args.grad_mu, rejection_fraction=args.reject),
        refine_passes=args.refine_passes,
    )
    frames = load_sequence(args.input, args.times)
    response = _response(args)
    result = calibrate_offline(frames, cfg, response)
    args.out.mkdir(parents=True, exist_ok=True)
    calib = result.calibration
    write_calibration(calib, args.out / "calib.txt")
    write_exposures_csv(args.out / "exposures.csv", calib.frame_indices, calib.exposures)
    write_energy_log(args.out / "energy.csv", result.trace)
    n_ok = sum(b.accepted for b in result.blocks)
    print(f"calibrated {len(frames)} frames in {len(result.blocks)} blocks ({n_ok} accepted)")
    return EXIT_OK


def cmd_calibrate_online(args) -> int:
    from .pipeline.online import OnlineCalibrator, OnlineConfig

    kw = {}
    if args.rounds is not None:
        kw["backend_rounds"] = args.rounds
    if args.window < 2:
        log.error("--window must be at least 2")
        return EXIT_USAGE
    cfg = OnlineConfig(exposure_window=args.window, backend_block=args.block, exposure_stride=args.stride,
                       tracker=_tracker_cfg(args),
                       optimizer=OptimizerConfig(huber_h=args.huber, grad_mu=args.grad_mu),
                       **kw)
    if args.emor is not None:
        log.warning("--emor is ignored in online mode")
    paths_seen = 0
    out = args.out
    corr_dir = out / "corrected"
    corr_dir.mkdir(parents=True, exist_ok=True)
    cal = None
    version = -1
    with open(out / "exposures_online.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "exposure", "flagged", "calibration_version"])
        fh.flush()
        for frame in iter_sequence(args.input):
            if cal is None:
                cal = OnlineCalibrator(frame.width, frame.height, cfg, sync=args.sync, correct=True)
            res = cal.push(frame)
            _write_corrected(corr_dir, f"{frame.index:05d}", res.corrected, args.irradiance16)
            writer.writerow([res.index, repr(res.exposure), int(res.flagged), res.version])
            fh.flush()
            if res.version != version:
                version = res.version
                _atomic_calibration(cal.calibration.with_size(frame.width, frame.height), out / "calib.txt")
            paths_seen += 1
    if cal is None:
        raise SequenceError(f"{args.input}: no PGM/PNG images found")
    calib = cal.finish()
    _atomic_calibration(calib, out / "calib.txt")
    write_exposures_csv(out / "exposures.csv", calib.frame_indices, calib.exposures)
    print(f"processed {paths_seen} frames, {len(cal.publications)} calibration updates")
    return EXIT_OK


def cmd_correct(args) -> int:
    from .pipeline import correct_frame

    calib = read_calibration(args.calib)
    exposures: dict[int, float] = {}
    if args.exposures is not None:
        idx, vals = read_exposures_csv(args.exposures)
        exposures = dict(zip(idx, vals.tolist()))
    elif len(calib.exposures):
        idx = calib.frame_indices if calib.frame_indices is not None else range(len(calib.exposures))
        exposures = dict(zip(idx, calib.exposures.tolist()))
    args.out.mkdir(parents=True, exist_ok=True)
    n = 0
    for frame in iter_sequence(args.input):
        calib = calib.with_size(frame.width, frame.height)
        c = correct_frame(frame, calib, exposures.get(frame.index, 1.0))
        _write_corrected(args.out, f"{frame.index:05d}", c, args.irradiance16)
        n += 1
    if n == 0:
        raise SequenceError(f"{args.input}: no PGM/PNG images found")
    print(f"corrected {n} frames")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .syntheval import SynthSpec, generate

    try:
        spec = SynthSpec.load(args.spec)
    except ValueError as exc:
        log.error("%s: %s", args.spec, exc)
        return EXIT_USAGE
    seq = generate(spec)
    out = args.out
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for f in seq.frames:
        _write_png(frames_dir / f"{f.index:05d}.png", f.image)
    gt = seq.ground_truth()
    write_calibration(gt, out / "gt_calib.txt")
    write_exposures_csv(out / "gt_exposures.csv", gt.frame_indices, gt.exposures)
    with open(out / "times.txt", "w") as fh:
        for f in seq.frames:
            fh.write(f"{f.index} {f.index:.1f} {f.gt_exposure!r}\n")
    print(f"wrote {len(seq.frames)} frames to {frames_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .syntheval import evaluate

    est = read_calibration(args.est)
    gt = read_calibration(args.gt)
    est_exp = gt_exp = None
    if args.est_exp is not None or args.gt_exp is not None:
        if args.est_exp is None or args.gt_exp is None:
            log.error("--est-exp and --gt-exp must be given together")
            return EXIT_USAGE
        ei, est_exp = read_exposures_csv(args.est_exp)
        gi, gt_exp = read_exposures_csv(args.gt_exp)
        common = sorted(set(ei) & set(gi))
        if not common:
            log.error("exposure files share no frame indices")
            return EXIT_IO
        em, gm = dict(zip(ei, est_exp)), dict(zip(gi, gt_exp))
        est_exp = np.array([em[i] for i in common])
        gt_exp = np.array([gm[i] for i in common])
    report = evaluate(est, gt, est_exp, gt_exp)
    for line in report.lines():
        print(line)
    failed = []
    if args.max_response_rmse is not None and report.response_rmse > args.max_response_rmse:
        failed.append("response")
    if args.max_vignette_rmse is not None and report.vignette_rmse > args.max_vignette_rmse:
        failed.append("vignette")
    if args.max_exposure_err is not None and (report.exposure_mean_rel_err is None
                                              or report.exposure_mean_rel_err > args.max_exposure_err):
        failed.append("exposure")
    if failed:
        print("threshold exceeded: " + ", ".join(failed), file=sys.stderr)
        return EXIT_QUALITY
    return EXIT_OK


_COMMANDS = {
    "calibrate-offline": cmd_calibrate_offline,
    "calibrate-online": cmd_calibrate_online,
    "correct": cmd_correct,
    "synth": cmd_synth,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_QUALITY
    except (SequenceError, CalibrationFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
