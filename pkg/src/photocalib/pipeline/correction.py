"""Removing response, vignette and exposure from frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import CalibrationResult, Frame


@dataclass(eq=False)
class CorrectedFrame:
    index: int
    irradiance: np.ndarray   # f^-1(O) / V / e, unclamped
    preview: np.ndarray      # 8-bit, clamp(irradiance) * 255
    saturated: np.ndarray    # input pixel was 0 or 255


def _vignette_image(calib: CalibrationResult, width: int, height: int) -> np.ndarray:
    return calib.vignette_model().image(width, height)


def _check_invertible(calib: CalibrationResult, vig: np.ndarray) -> None:
    if np.any(np.diff(calib.response_lut) <= 0):
        raise ValueError("response is not strictly increasing; correction needs its inverse")
    if float(vig.min()) < 0.2:
        raise ValueError(f"vignette falls to {vig.min():.3f} (< 0.2); correction would amplify noise")


def correct_frame(frame: Frame, calib: CalibrationResult, exposure: float = 1.0) -> CorrectedFrame:
    """Per pixel ``I = f^-1(O) / V(x) / e``."""
    if not exposure > 0:
        raise ValueError(f"exposure must be positive, got {exposure}")
    img = frame.image
    h, w = img.shape
    vig = _vignette_image(calib.with_size(w, h), w, h)
    _check_invertible(calib, vig)
    irr = calib.inverse_lut[img] / vig / exposure
    preview = np.floor(np.clip(irr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return CorrectedFrame(frame.index, irr, preview, (img == 0) | (img == 255))


class Compensator:
    """Maps raw frames to vignette- and response-free images for tracking.

    The output is ``255 * f^-1(O) / V``: exposure changes then act as a pure
    gain on every pixel, which is exactly what the gain-robust tracker models.
    """

    def __init__(self, calib: CalibrationResult, width: int, height: int):
        self.calib = calib.with_size(width, height)
        vig = _vignette_image(self.calib, width, height)
        _check_invertible(self.calib, vig)
        self._scale = 255.0 / vig
        self._table = np.asarray(self.calib.inverse_lut, dtype=np.float64)

    def __call__(self, frame: Frame) -> np.ndarray:
        return self._table[frame.image] * self._scale
