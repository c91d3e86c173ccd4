"""Photometric calibration of auto-exposure grayscale video.

Recovers the camera response, the radial vignette and per-frame exposure
times from tracked scene points, offline (block-wise) or online (streaming
frontend with a background backend).
"""

from .core import (
    CalibrationFormatError,
    CalibrationResult,
    CalibrationState,
    Frame,
    Observation,
    ScenePoint,
    SequenceError,
    TrackDatabase,
    load_sequence,
    read_calibration,
    write_calibration,
)
from .models import ResponseModel, VignetteModel, load_emor_basis
from .optimizer import InsufficientDataError, OptimizerConfig, optimize_block
from .pipeline import OfflineConfig, OnlineConfig, calibrate_offline, correct_frame, run_online
from .tracker import FeatureTracker, TrackerConfig, build_track_database

__all__ = [
    "CalibrationFormatError",
    "CalibrationResult",
    "CalibrationState",
    "FeatureTracker",
    "Frame",
    "InsufficientDataError",
    "Observation",
    "OfflineConfig",
    "OnlineConfig",
    "OptimizerConfig",
    "ResponseModel",
    "ScenePoint",
    "SequenceError",
    "TrackDatabase",
    "TrackerConfig",
    "VignetteModel",
    "build_track_database",
    "calibrate_offline",
    "correct_frame",
    "load_emor_basis",
    "load_sequence",
    "optimize_block",
    "read_calibration",
    "run_online",
    "write_calibration",
]
