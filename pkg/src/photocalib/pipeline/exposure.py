"""Fast exposure estimation with response and vignette held fixed.

With ``f`` and ``V`` known, every unsaturated patch pixel gives a linear
residual ``f^-1(O) / V(x) - e_i L_p``.  For fixed radiances each frame's
exposure is a weighted scalar least-squares fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import CalibrationResult, Observation
from ..optimizer import gradient_weight
from ..tracker import patch_offsets


@dataclass(eq=False)
class FrameIrradiance:
    """Response- and vignette-free patch values of one frame's observations."""

    frame_index: int
    point_ids: np.ndarray    # (n,)
    irradiance: np.ndarray   # (n, P) f^-1(O) / V
    weights: np.ndarray      # (n, P) gradient weights

    def __len__(self) -> int:
        return len(self.point_ids)


def frame_irradiance(frame_index: int, observations, calib: CalibrationResult,
                     grad_mu: float = 50.0) -> FrameIrradiance:
    """Map ``(point_id, Observation)`` pairs through the inverse calibration.

    Saturated observations are skipped.
    """
    pairs = [(pid, o) for pid, o in observations if not o.saturated]
    if not pairs:
        return FrameIrradiance(frame_index, np.zeros(0, np.int64), np.zeros((0, 0)), np.zeros((0, 0)))
    obs: list[Observation] = [o for _, o in pairs]
    P = len(obs[0].patch_intensities)
    ps = int(round(np.sqrt(P)))
    offs = patch_offsets(ps)
    loc = np.array([o.location for o in obs], dtype=np.float64)
    vig = calib.vignette_model()
    v = vig.evaluate(loc[:, 0:1] + offs[None, :, 0], loc[:, 1:2] + offs[None, :, 1])
    inten = np.array([o.patch_intensities for o in obs], dtype=np.float64)
    grad = np.array([o.patch_gradient_sq for o in obs], dtype=np.float64)
    return FrameIrradiance(
        frame_index,
        np.array([pid for pid, _ in pairs], dtype=np.int64),
        calib.inverse(inten) / v,
        gradient_weight(grad, grad_mu),
    )


def mean_radiances(window: list[FrameIrradiance], exposures=None) -> dict[int, np.ndarray]:
    """Per point, the mean of ``f^-1(O) / V / e`` over the window (``e`` defaults to 1)."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for k, fr in enumerate(window):
        e = 1.0 if exposures is None else float(exposures[k])
        for pid, irr in zip(fr.point_ids.tolist(), fr.irradiance):
            if pid in sums:
                sums[pid] += irr / e
                counts[pid] += 1
            else:
                sums[pid] = irr / e
                counts[pid] = 1
    return {pid: sums[pid] / counts[pid] for pid in sums}


def estimate_exposures_linear(window: list[FrameIrradiance], radiances: dict[int, np.ndarray] | None = None,
                              previous: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ``e_i = sum w L y / sum w L^2`` for every frame of the window.

    ``radiances`` defaults to :func:`mean_radiances` of the window.  A frame
    without usable observations carries the preceding exposure forward
    (``previous`` for the first frame) and is flagged.  Returns
    ``(exposures, flagged)``.
    """
    if radiances is None:
        radiances = mean_radiances(window)
    out = np.empty(len(window))
    flagged = np.zeros(len(window), dtype=bool)
    last = float(previous)
    for k, fr in enumerate(window):
        num = 0.0
        den = 0.0
        for pid, irr, w in zip(fr.point_ids.tolist(), fr.irradiance, fr.weights):
            L = radiances.get(pid)
            if L is None:
                continue
            num += float(np.sum(w * L * irr))
            den += float(np.sum(w * L * L))
        if den > 0 and num > 0:
            last = num / den
        else:
            flagged[k] = True
        out[k] = last
    return out, flagged


def linear_energy(window: list[FrameIrradiance], radiances: dict[int, np.ndarray], exposures) -> float:
    """``sum w (y - e L)^2`` over the window; the quantity the linear solve minimizes."""
    total = 0.0
    for fr, e in zip(window, exposures):
        for pid, irr, w in zip(fr.point_ids.tolist(), fr.irradiance, fr.weights):
            L = radiances.get(pid)
            if L is not None:
                total += float(np.sum(w * (irr - e * L) ** 2))
    return total
