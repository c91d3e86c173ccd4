"""Offline calibration: blocks with overlap, per-block optimization, averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..core import CalibrationResult, Frame, SequenceError, TrackDatabase
from ..models import ResponseModel
from ..optimizer import (
    BlockResult,
    InsufficientDataError,
    OptimizerConfig,
    build_problem,
    initial_state,
    optimize_block,
    result_from_state,
    warm_state,
)
from ..tracker import TrackerConfig, build_track_database
from .correction import Compensator
from .exposure import estimate_exposures_linear, frame_irradiance, mean_radiances

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OfflineConfig:
    block_size: int = 200
    overlap: int = 30
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    # extra passes that re-track on frames compensated with the previous estimate
    refine_passes: int = 2
    # per-phase round cap for passes that are followed by a refinement pass
    coarse_rounds: int = 15

    def __post_init__(self):
        if self.block_size < 2:
            raise ValueError("block_size must be at least 2")
        if not 0 <= self.overlap < self.block_size:
            raise ValueError("overlap must be in [0, block_size)")
        if self.refine_passes < 0:
            raise ValueError("refine_passes must be non-negative")
        if self.coarse_rounds < 1:
            raise ValueError("coarse_rounds must be positive")


@dataclass(eq=False)
class BlockOutcome:
    start: int
    stop: int
    frame_indices: list[int]
    result: CalibrationResult | None = None
    block: BlockResult | None = None
    reason: str = ""

    @property
    def accepted(self) -> bool:
        return self.result is not None


@dataclass(eq=False)
class OfflineResult:
    calibration: CalibrationResult
    blocks: list[BlockOutcome]
    database: TrackDatabase
    # block outcomes of every pass, the last one equals ``blocks``
    passes: list[list[BlockOutcome]] = field(default_factory=list)

    @property
    def trace(self):
        return [t for b in self.blocks if b.block is not None for t in b.block.trace]


def block_ranges(n_frames: int, block_size: int = 200, overlap: int = 30) -> list[tuple[int, int]]:
    """Half-open position ranges of the optimization blocks.

    Blocks start every ``block_size - overlap`` frames.  A trailing block
    shorter than half a block is merged into its predecessor.
    """
    if n_frames <= 0:
        return []
    if n_frames <= block_size:
        return [(0, n_frames)]
    step = block_size - overlap
    ranges = []
    start = 0
    while start + overlap < n_frames or not ranges:
        ranges.append((start, min(start + block_size, n_frames)))
        if start + block_size >= n_frames:
            break
        start += step
    if len(ranges) > 1 and ranges[-1][1] - ranges[-1][0] < block_size // 2:
        tail = ranges.pop()
        ranges[-1] = (ranges[-1][0], tail[1])
    return ranges


def align_block_exposures(prev, nxt, overlap_indices) -> float:
    """Least-squares scale ``s`` with ``prev ~ s * next`` on the overlap frames.

    ``prev`` and ``nxt`` map frame index to exposure.
    """
    idx = list(overlap_indices)
    if not idx:
        raise ValueError("exposure alignment needs a non-empty overlap")
    a = np.array([prev[i] for i in idx], dtype=np.float64)
    b = np.array([nxt[i] for i in idx], dtype=np.float64)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("exposures must be positive")
    return float(np.dot(a, b) / np.dot(b, b))


def average_calibrations(results: list[CalibrationResult], width: int, height: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Pointwise mean of anchored response tables and of the effective vignettes.

    Returns ``(response_lut, vignette_coeffs, gamma_applied)``.  The mean
    vignette curve is refit with the polynomial model raised to the mean
    block gamma, which is exact when the blocks agree.
    """
    if len(results) == 1:
        r = results[0]
        return r.response_lut.copy(), r.vignette_coeffs.copy(), r.gamma_applied
    lut = np.mean([r.response_lut for r in results], axis=0)
    gamma = float(np.mean([r.gamma_applied for r in results]))
    R = np.linspace(0.0, 1.0, 256)
    target = np.mean([r.vignette_r(R) for r in results], axis=0) ** (1.0 / gamma)
    r2 = R * R
    A = np.stack([r2, r2**2, r2**3], axis=1)
    coeffs, *_ = np.linalg.lstsq(A, target - 1.0, rcond=None)
    return lut, coeffs, gamma


def _inverse_table(lut: np.ndarray) -> np.ndarray:
    return np.interp(np.arange(256.0), lut, np.arange(256) / 255.0)


def _calibrate_blocks(db: TrackDatabase, frames: list[Frame], ranges, cfg: OfflineConfig,
                      warm: list[BlockOutcome] | None, response: ResponseModel | None,
                      max_rounds: int | None = None):
    w, h = frames[0].width, frames[0].height
    outcomes = []
    for bi, (a, b) in enumerate(ranges):
        fidx = [f.index for f in frames[a:b]]
        out = BlockOutcome(a, b, fidx)
        sub = db.slice(fidx[0], fidx[-1] + 1)
        try:
            if len(sub) == 0:
                raise InsufficientDataError("insufficient correspondences: no tracks in block")
            problem = build_problem(sub, cfg.optimizer.grad_mu, frame_indices=fidx)
            init = None
            prev = warm[bi] if warm is not None else None
            if prev is not None and prev.block is not None:
                st = prev.block.state
                init = warm_state(problem, st.response, st.vignette, st.exposures)
            elif response is not None:
                init = initial_state(problem, response, cfg.optimizer.init_vignette)
            out.block = optimize_block(problem, init, cfg.optimizer, max_rounds=max_rounds)
            res = result_from_state(out.block.state, w, h)
            res.frame_indices = fidx
            out.result = res
            log.info("block [%d, %d): %d points, energy %.6g", a, b, problem.n_points, out.block.trace[-1].energy)
        except InsufficientDataError as exc:
            out.reason = str(exc)
            log.warning("block [%d, %d) discarded: %s", a, b, exc)
        outcomes.append(out)
    return outcomes


def _merge(outcomes: list[BlockOutcome], db: TrackDatabase, frames: list[Frame],
           cfg: OfflineConfig) -> CalibrationResult:
    w, h = frames[0].width, frames[0].height
    good = [o.result for o in outcomes if o.accepted]
    if not good:
        reasons = "; ".join(sorted({o.reason for o in outcomes}))
        raise InsufficientDataError(f"all blocks discarded ({reasons})")
    lut, coeffs, gamma = average_calibrations(good, w, h)
    calib = CalibrationResult(lut, _inverse_table(lut), coeffs, np.ones(len(frames)), gamma, w, h,
                              [f.index for f in frames])

    merged: dict[int, float] = {}
    for o in outcomes:
        if o.accepted:
            exp = dict(zip(o.frame_indices, o.result.exposures))
        else:
            exp = _linear_block_exposures(db, o.frame_indices, calib, cfg)
        overlap = [i for i in o.frame_indices if i in merged]
        if overlap:
            s = align_block_exposures(merged, exp, overlap)
            exp = {i: s * e for i, e in exp.items()}
        for i, e in exp.items():
            merged.setdefault(i, e)
    calib.exposures = np.array([merged[f.index] for f in frames])
    return calib


def _linear_block_exposures(db: TrackDatabase, frame_indices, calib: CalibrationResult,
                            cfg: OfflineConfig) -> dict[int, float]:
    per_frame: dict[int, list] = {i: [] for i in frame_indices}
    for p in db:
        for o in p.observations:
            if o.frame_index in per_frame:
                per_frame[o.frame_index].append((p.id, o))
    window = [frame_irradiance(i, per_frame[i], calib, cfg.optimizer.grad_mu) for i in frame_indices]
    e, _ = estimate_exposures_linear(window)
    # one refinement of radiances with the first estimate removes the unit-exposure bias
    e, _ = estimate_exposures_linear(window, mean_radiances(window, e), previous=e[0])
    return dict(zip(frame_indices, e))


def calibrate_offline(frames: list[Frame], cfg: OfflineConfig | None = None,
                      response: ResponseModel | None = None) -> OfflineResult:
    """Track, split into blocks, optimize each, align exposures and average.

    With ``refine_passes > 0`` the sequence is tracked again on frames
    compensated by the current estimate and the blocks are re-optimized,
    warm-started from the previous pass.  ``response`` overrides the initial
    response model (e.g. one built on a file basis).
    """
    cfg = cfg or OfflineConfig()
    if not frames:
        raise SequenceError("no frames to calibrate")
    idx = [f.index for f in frames]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise SequenceError("frame indices must be strictly increasing")
    shape = frames[0].image.shape
    if any(f.image.shape != shape for f in frames):
        raise SequenceError("all frames must share one size")
    ranges = block_ranges(len(frames), cfg.block_size, cfg.overlap)
    db = build_track_database(frames, cfg.tracker)
    coarse = min(cfg.coarse_rounds, cfg.optimizer.max_rounds)
    outcomes = _calibrate_blocks(db, frames, ranges, cfg, None, response,
                                 coarse if cfg.refine_passes else None)
    calib = _merge(outcomes, db, frames, cfg)
    passes = [outcomes]
    for p in range(cfg.refine_passes):
        comp = Compensator(calib, frames[0].width, frames[0].height)
        db = build_track_database(frames, cfg.tracker, compensate=comp)
        last = p == cfg.refine_passes - 1
        outcomes = _calibrate_blocks(db, frames, ranges, cfg, outcomes, response,
                                     None if last else coarse)
        calib = _merge(outcomes, db, frames, cfg)
        passes.append(outcomes)
        log.info("refinement pass %d done", p + 1)
    return OfflineResult(calib, outcomes, db, passes)

