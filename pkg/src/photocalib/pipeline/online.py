"""Online calibration: realtime frontend plus a block-wise background backend.

The frontend tracks each frame, estimates the exposures of the last M
frames with the linear solver and emits the corrected frame.  Every
``backend_block`` frames the backend runs a few rounds of the nonlinear
optimization on the block (only every ``exposure_stride``-th exposure
free) and its result becomes the frontend's calibration.

Publication is deterministic: a backend result always takes effect
``publish_lag`` frames after its block boundary.  In concurrent mode the
frontend keeps running while the backend works and only waits if the
result is still missing at that frame, so both modes produce identical
output.
"""

from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..core import CalibrationResult, Frame, TrackDatabase
from ..models import ResponseModel, VignetteModel, anchor_gamma
from ..optimizer import (
    ExposureKnots,
    InsufficientDataError,
    OptimizerConfig,
    build_problem,
    check_constraints,
    initial_state,
    result_from_state,
    run_rounds,
    warm_state,
)
from ..tracker import FeatureTracker, TrackerConfig, build_track_database
from .correction import Compensator, CorrectedFrame, correct_frame
from .exposure import FrameIrradiance, estimate_exposures_linear, frame_irradiance, mean_radiances

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OnlineConfig:
    exposure_window: int = 10
    backend_block: int = 100
    exposure_stride: int = 5
    backend_rounds: int = 30
    publish_lag: int = 10
    # re-track each backend block on frames compensated with its first estimate
    retrack: bool = True
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.exposure_window < 2:
            raise ValueError("exposure_window must be at least 2")
        if self.backend_block < 2:
            raise ValueError("backend_block must be at least 2")
        if self.exposure_stride < 1:
            raise ValueError("exposure_stride must be positive")
        if self.backend_rounds < 1:
            raise ValueError("backend_rounds must be positive")
        if self.publish_lag < 0:
            raise ValueError("publish_lag must be non-negative")


@dataclass(frozen=True, eq=False)
class Snapshot:
    """One published calibration; immutable so readers always see a consistent pair."""

    version: int
    calibration: CalibrationResult
    # backend models (un-anchored) and the anchor exponent applied on export
    response: ResponseModel | None = None
    vignette: VignetteModel | None = None
    anchor: float = 1.0


@dataclass(eq=False)
class OnlineFrame:
    index: int
    exposure: float
    flagged: bool
    version: int
    corrected: CorrectedFrame | None = None


@dataclass(eq=False)
class OnlineState:
    """Mutable frontend state; the calibration is replaced only by whole snapshots."""

    snapshot: Snapshot
    window: deque = field(default_factory=deque)          # (frame_index, [(pid, Observation)])
    exposures: dict[int, float] = field(default_factory=dict)
    database: TrackDatabase | None = None
    block_frames: list[int] = field(default_factory=list)
    block_images: list[Frame] = field(default_factory=list)


@dataclass(eq=False)
class _BackendJob:
    boundary: int             # position (frames pushed) at which the block closed
    publish_at: int
    future: Future | None = None
    result: Snapshot | None = None

    def get(self) -> Snapshot | None:
        if self.future is not None:
            return self.future.result()
        return self.result


def _backend_block(db: TrackDatabase, frames: list[int], seeds: dict[int, float], prev: Snapshot,
                   cfg: OnlineConfig, version: int, images: list[Frame] | None = None) -> Snapshot | None:
    """Optimize one block; ``None`` when the guards reject it.

    With ``images`` (the block's frames) and ``cfg.retrack`` the block is
    tracked again on frames compensated with the first estimate and
    optimized once more, warm-started.
    """
    try:
        problem = build_problem(db, cfg.optimizer.grad_mu, frame_indices=frames)
        check_constraints(problem, cfg.optimizer)
        knots = ExposureKnots.every(problem.n_frames, cfg.exposure_stride)
        # frontend exposures live in the published gauge; backend models are un-anchored
        seed = np.array([seeds[f] for f in frames]) ** (1.0 / prev.anchor)
        seed = knots.expand(seed[knots.knots])
        if prev.response is not None:
            init = warm_state(problem, prev.response, prev.vignette, seed)
        else:
            init = initial_state(problem, None, cfg.optimizer.init_vignette, seed)
        state, _ = run_rounds(problem, init, cfg.optimizer, knots, cfg.backend_rounds)
        calib = result_from_state(state, db.width, db.height)
        if cfg.retrack and images is not None:
            comp = Compensator(calib, db.width, db.height)
            db2 = build_track_database(images, cfg.tracker, compensate=comp)
            problem = build_problem(db2, cfg.optimizer.grad_mu, frame_indices=frames)
            check_constraints(problem, cfg.optimizer)
            init = warm_state(problem, state.response, state.vignette, state.exposures)
            state, _ = run_rounds(problem, init, cfg.optimizer, knots, cfg.backend_rounds)
            calib = result_from_state(state, db.width, db.height)
        anchor = anchor_gamma(state.response)
    except (InsufficientDataError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("backend block ending at frame %d rejected: %s", frames[-1], exc)
        return None
    calib.validate()
    return Snapshot(version, calib, state.response, state.vignette, anchor)


class OnlineCalibrator:
    """Push frames in order; read exposures and corrected frames back immediately."""

    def __init__(self, width: int, height: int, cfg: OnlineConfig | None = None, sync: bool = True,
                 correct: bool = True):
        self.cfg = cfg or OnlineConfig()
        self.width = width
        self.height = height
        self.sync = sync
        self.correct = correct
        self.tracker = FeatureTracker(self.cfg.tracker)
        ident = CalibrationResult.identity(width, height)
        self.state = OnlineState(Snapshot(0, ident), database=TrackDatabase(width, height, self.cfg.tracker.patch_size))
        self._compensator: Compensator | None = None
        self._prev_frame: Frame | None = None
        self._pushed = 0
        self._jobs: list[_BackendJob] = []
        self._executor = None if sync else ThreadPoolExecutor(max_workers=1)
        self.history: list[OnlineFrame] = []
        self.publications: list[tuple[int, int]] = []   # (frame index, version)

    # -- calibration snapshots

    @property
    def calibration(self) -> CalibrationResult:
        return self.state.snapshot.calibration

    def _publish(self, snap: Snapshot, frame_index: int) -> None:
        self.state.snapshot = snap
        self._compensator = Compensator(snap.calibration, self.width, self.height)
        if self._prev_frame is not None:
            self.tracker.rebase(self._compensator(self._prev_frame))
        self.publications.append((frame_index, snap.version))
        log.info("calibration v%d in effect from frame %d", snap.version, frame_index)

    def _poll(self, frame_index: int) -> None:
        while self._jobs and self._jobs[0].publish_at <= self._pushed:
            job = self._jobs.pop(0)
            snap = job.get()
            if snap is not None:
                self._publish(snap, frame_index)

    def _submit_block(self) -> None:
        st = self.state
        frames = list(st.block_frames)
        images = list(st.block_images) if self.cfg.retrack else None
        st.block_frames = []
        st.block_images = []
        db = st.database.slice(frames[0], frames[-1] + 1)
        seeds = {f: st.exposures[f] for f in frames}
        pending = list(self._jobs)
        base = st.snapshot
        cfg = self.cfg

        def work():
            # seed from the newest result, even one not yet in effect; with a
            # single FIFO worker every earlier job has finished by now
            prev = base
            for earlier in reversed(pending):
                snap = earlier.get()
                if snap is not None:
                    prev = snap
                    break
            return _backend_block(db, frames, seeds, prev, cfg, prev.version + 1, images)

        job = _BackendJob(self._pushed, self._pushed + cfg.publish_lag)
        if self._executor is None:
            job.result = work()
        else:
            job.future = self._executor.submit(work)
        self._jobs.append(job)
        # tracks older than the block can no longer contribute
        st.database = TrackDatabase(self.width, self.height, cfg.tracker.patch_size)

    # -- frontend

    def _irradiance(self, frame_index: int, observations) -> FrameIrradiance:
        return frame_irradiance(frame_index, observations, self.calibration, self.cfg.optimizer.grad_mu)

    def _estimate_exposure(self) -> tuple[float, bool]:
        st = self.state
        window = [self._irradiance(i, obs) for i, obs in st.window]
        if len(window) == 1:
            return 1.0, False
        hist = np.array([st.exposures[i] for i, _ in list(st.window)[:-1]])
        L = mean_radiances(window[:-1], hist)
        e, flags = estimate_exposures_linear(window, L, previous=hist[-1])
        # keep the scale of already emitted exposures
        s = float(np.dot(hist, e[:-1]) / np.dot(e[:-1], e[:-1])) if np.dot(e[:-1], e[:-1]) > 0 else 1.0
        if flags[-1]:
            return float(hist[-1]), True
        return float(s * e[-1]), False

    def push(self, frame: Frame) -> OnlineFrame:
        cfg = self.cfg
        st = self.state
        self._poll(frame.index)
        timg = None if self._compensator is None else self._compensator(frame)
        obs = self.tracker.process(frame, timg)
        for pid, o in obs:
            st.database.add_observation(pid, o)
        st.database.frame_indices.append(frame.index)
        st.block_frames.append(frame.index)
        if cfg.retrack:
            st.block_images.append(frame)

        st.window.append((frame.index, obs))
        while len(st.window) > cfg.exposure_window:
            st.window.popleft()
        e, flagged = self._estimate_exposure()
        st.exposures[frame.index] = e
        corrected = correct_frame(frame, self.calibration, e) if self.correct else None
        out = OnlineFrame(frame.index, e, flagged, st.snapshot.version, corrected)
        self.history.append(out)
        self._prev_frame = frame
        self._pushed += 1
        if len(st.block_frames) == cfg.backend_block:
            self._submit_block()
        return out

    def finish(self) -> CalibrationResult:
        """Apply every pending backend result and return the final calibration.

        The exposures are the frontend estimates of all pushed frames.
        """
        while self._jobs:
            job = self._jobs.pop(0)
            snap = job.get()
            if snap is not None:
                self.state.snapshot = snap
                self.publications.append((self.history[-1].index if self.history else -1, snap.version))
        if self._executor is not None:
            self._executor.shutdown(wait=True)
        calib = self.calibration.with_size(self.width, self.height)
        idx = [h.index for h in self.history]
        return replace(calib, exposures=np.array([h.exposure for h in self.history]), frame_indices=idx)


@dataclass(eq=False)
class OnlineResult:
    calibration: CalibrationResult
    frames: list[OnlineFrame]
    publications: list[tuple[int, int]]

    @property
    def exposures(self) -> np.ndarray:
        return np.array([f.exposure for f in self.frames])


def run_online(frames, cfg: OnlineConfig | None = None, sync: bool = True, correct: bool = False,
               on_frame=None) -> OnlineResult:
    """Run the online calibrator over an iterable of frames.

    ``on_frame(OnlineFrame)`` is called as soon as each frame is processed.
    """
    cal = None
    for frame in frames:
        if cal is None:
            cal = OnlineCalibrator(frame.width, frame.height, cfg, sync=sync, correct=correct)
        out = cal.push(frame)
        if on_frame is not None:
            on_frame(out)
    if cal is None:
        raise ValueError("no frames")
    calib = cal.finish()
    frames_out = cal.history
    if not correct:
        frames_out = [replace(f, corrected=None) for f in frames_out]
    return OnlineResult(calib, frames_out, cal.publications)
