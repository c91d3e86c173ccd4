import numpy as np
import pytest

from photocalib.core import CalibrationState, Observation, TrackDatabase
from photocalib.models import ResponseModel, VignetteModel
from photocalib.optimizer import build_problem


def synthetic_database(n_frames=4, n_points=6, patch=1, width=64, height=48, seed=0,
                       response=None, vignette=(-0.2, -0.05, 0.0), exposures=None,
                       radiances=None, grad_sq=0.0):
    """Tiny track database rendered exactly (no quantization) from the image formation model.

    Every point is seen in every frame at a random location.  Returns
    ``(db, truth)`` where ``truth`` is the generating CalibrationState.
    """
    rng = np.random.default_rng(seed)
    response = response or ResponseModel()
    vig = VignetteModel.for_image(width, height, vignette)
    P = patch * patch
    if exposures is None:
        exposures = rng.uniform(0.6, 1.4, n_frames)
        exposures[0] = 1.0
    exposures = np.asarray(exposures, float)
    if radiances is None:
        radiances = rng.uniform(0.1, 0.6, (n_points, P))
    half = patch // 2
    margin = half + 2
    db = TrackDatabase(width, height, patch, list(range(n_frames)))
    offs = np.stack(np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1)), -1).reshape(-1, 2)
    for p in range(n_points):
        for f in range(n_frames):
            x = rng.uniform(margin, width - 1 - margin)
            y = rng.uniform(margin, height - 1 - margin)
            v = vig.evaluate(x + offs[:, 0], y + offs[:, 1])
            o = response.evaluate(exposures[f] * v * radiances[p])
            db.add_observation(p, Observation(f, (x, y), o, np.full(P, grad_sq)))
    truth = CalibrationState(response, vig, exposures, radiances, list(range(n_frames)))
    return db, truth


@pytest.fixture
def tiny_problem():
    db, truth = synthetic_database()
    return build_problem(db), truth
