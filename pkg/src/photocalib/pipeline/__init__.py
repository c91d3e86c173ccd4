"""Offline and online calibration pipelines."""

from .correction import Compensator, CorrectedFrame, correct_frame
from .exposure import FrameIrradiance, estimate_exposures_linear, frame_irradiance, mean_radiances
from .offline import (
    BlockOutcome,
    OfflineConfig,
    OfflineResult,
    align_block_exposures,
    average_calibrations,
    block_ranges,
    calibrate_offline,
)
from .online import OnlineCalibrator, OnlineConfig, OnlineFrame, OnlineResult, Snapshot, run_online

__all__ = [
    "BlockOutcome",
    "Compensator",
    "CorrectedFrame",
    "FrameIrradiance",
    "OfflineConfig",
    "OfflineResult",
    "OnlineCalibrator",
    "OnlineConfig",
    "OnlineFrame",
    "OnlineResult",
    "Snapshot",
    "align_block_exposures",
    "average_calibrations",
    "block_ranges",
    "calibrate_offline",
    "correct_frame",
    "estimate_exposures_linear",
    "frame_irradiance",
    "mean_radiances",
    "run_online",
]
