"""Nonlinear backend: robust photometric energy and its alternating LM optimization.

Residuals are ``r = O - f(e_i V(x) L)`` for every unsaturated patch pixel
observation.  The energy is ``E = sum w_grad * huber_h(r)`` with the
Huber loss taken as ``r^2 / 2`` for ``|r| <= h`` and ``h (|r| - h / 2)``
beyond.  Gauss-Newton steps use IRLS weights ``w_huber * w_grad``.

Sign convention: the normal equations ``(J'WJ + lambda diag) dx = J'Wr``
are solved for ``dx`` and the update is ``x <- x - dx`` (with ``J = dr/dx``),
which is the Gauss-Newton descent direction.  The radiance step uses the
same convention.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from .core import CalibrationResult, CalibrationState, TrackDatabase
from .models import ResponseModel, VignetteModel, anchor_gamma
from .tracker import patch_offsets

log = logging.getLogger(__name__)


class InsufficientDataError(RuntimeError):
    """The block does not constrain the calibration (too few points or radial motion)."""


@dataclass(frozen=True)
class OptimizerConfig:
    huber_h: float = 5.0
    grad_mu: float = 50.0
    lm_lambda_init: float = 1.0
    lm_lambda_accept: float = 0.5
    lm_lambda_reject: float = 4.0
    max_rounds: int = 50
    convergence_rel_energy: float = 1e-5
    rejection_fraction: float = 0.2
    max_lambda_inflations: int = 10
    min_vignette: float = 0.2
    min_points: int = 50
    min_radial_span: float = 0.2
    init_vignette: tuple[float, float, float] = (-0.1, 0.0, 0.0)
    # first step of a round: GN on (c, v, e) with radiances eliminated by the
    # Schur complement (True) or simply held fixed (False)
    eliminate_radiances: bool = True

    def __post_init__(self):
        if not self.huber_h > 0:
            raise ValueError("huber_h must be positive")
        if not self.grad_mu > 0:
            raise ValueError("grad_mu must be positive")
        if not 0.0 <= self.rejection_fraction < 1.0:
            raise ValueError("rejection_fraction must be in [0, 1)")
        if self.lm_lambda_init < 0 or self.max_rounds < 0:
            raise ValueError("lambda and max_rounds must be non-negative")


def huber_loss(r, h: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= h, 0.5 * a * a, h * (a - 0.5 * h))


def huber_weight(r, h: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= h, 1.0, h / np.maximum(a, 1e-300))


def gradient_weight(grad_sq, mu: float) -> np.ndarray:
    grad_sq = np.asarray(grad_sq, dtype=np.float64)
    if np.any(grad_sq < 0):
        raise ValueError("squared gradient must be non-negative")
    return mu / (mu + grad_sq)


# -- exposure parametrization ----------------------------------------------------------

@dataclass
class ExposureKnots:
    """Frames whose exposure is free; the rest follow geometric interpolation.

    ``frame -> (left knot, right knot, t)`` with ``e = e_l ** (1 - t) * e_r ** t``.
    """

    knots: np.ndarray
    left: np.ndarray
    right: np.ndarray
    t: np.ndarray

    @classmethod
    def every(cls, n_frames: int, stride: int = 1) -> ExposureKnots:
        if stride < 1:
            raise ValueError("stride must be >= 1")
        knots = np.arange(0, n_frames, stride)
        if knots[-1] != n_frames - 1:
            knots = np.append(knots, n_frames - 1)
        f = np.arange(n_frames)
        right = np.searchsorted(knots, f, side="left")
        right = np.minimum(right, len(knots) - 1)
        left = np.where(knots[right] == f, right, right - 1)
        left = np.maximum(left, 0)
        span = knots[right] - knots[left]
        t = np.where(span > 0, (f - knots[left]) / np.maximum(span, 1), 0.0)
        return cls(knots, left, right, t)

    def expand(self, knot_values: np.ndarray) -> np.ndarray:
        lv = np.log(knot_values)
        return np.exp((1.0 - self.t) * lv[self.left] + self.t * lv[self.right])

    def jacobian(self, exposures: np.ndarray) -> np.ndarray:
        """d e_frame / d e_knot, dense (n_frames, n_knots)."""
        kv = exposures[self.knots]
        m = np.zeros((len(self.t), len(self.knots)))
        rows = np.arange(len(self.t))
        np.add.at(m, (rows, self.left), (1.0 - self.t) * exposures / kv[self.left])
        np.add.at(m, (rows, self.right), self.t * exposures / kv[self.right])
        return m


# -- residual data -----------------------------------------------------------------------

@dataclass
class Problem:
    """Flattened residual set of one block.

    One entry per unsaturated observation pixel.  ``rad`` indexes the
    flattened ``(n_points, P)`` radiance array, ``frame`` the block's
    exposure vector.
    """

    frame_indices: list[int]
    point_ids: np.ndarray
    patch_pixels: int
    frame: np.ndarray
    rad: np.ndarray
    obs: np.ndarray
    r2: np.ndarray
    grad_sq: np.ndarray
    w_grad: np.ndarray
    point_row: np.ndarray
    pixel: np.ndarray
    active: np.ndarray
    width: int = 0
    height: int = 0
    radial_span: float = 0.0
    n_saturated_obs: int = 0

    @property
    def n_points(self) -> int:
        return len(self.point_ids)

    @property
    def n_frames(self) -> int:
        return len(self.frame_indices)

    def __len__(self) -> int:
        return len(self.obs)

    def keys(self) -> np.ndarray:
        """(n, 3) point id, frame index, patch pixel of every residual."""
        fi = np.asarray(self.frame_indices)
        return np.stack([self.point_ids[self.point_row], fi[self.frame], self.pixel], axis=1)


def build_problem(db: TrackDatabase, grad_mu: float = 50.0, frame_indices=None) -> Problem:
    """Flatten a track database into residual arrays (saturated observations skipped)."""
    if db.width <= 0 or db.height <= 0:
        raise ValueError("database needs image dimensions")
    if frame_indices is None:
        frame_indices = sorted(db.frame_indices) if db.frame_indices else sorted(
            {o.frame_index for p in db for o in p.observations})
    frame_pos = {f: i for i, f in enumerate(frame_indices)}
    P = db.patch_size * db.patch_size
    offs = patch_offsets(db.patch_size)
    vig = VignetteModel.for_image(db.width, db.height)

    point_ids, rows_frame, rows_point, locs, obs, grads = [], [], [], [], [], []
    n_sat = 0
    spans = []
    for row, point in enumerate(db):
        point_ids.append(point.id)
        rr = []
        for o in point.observations:
            if o.frame_index not in frame_pos:
                continue
            rr.append(vig.radius_sq(*o.location))
            if o.saturated:
                n_sat += 1
                continue
            rows_frame.append(frame_pos[o.frame_index])
            rows_point.append(row)
            locs.append(o.location)
            obs.append(o.patch_intensities)
            grads.append(o.patch_gradient_sq)
        if rr:
            r = np.sqrt(rr)
            spans.append(r.max() - r.min())

    n_obs = len(obs)
    if n_obs:
        locs_a = np.asarray(locs, dtype=np.float64)
        px = locs_a[:, 0:1] + offs[None, :, 0]
        py = locs_a[:, 1:2] + offs[None, :, 1]
        r2 = vig.radius_sq(px, py).ravel()
        o_a = np.asarray(obs, dtype=np.float64).ravel()
        g_a = np.asarray(grads, dtype=np.float64).ravel()
    else:
        r2 = o_a = g_a = np.zeros(0)
    frame = np.repeat(np.asarray(rows_frame, dtype=np.int64), P)
    prow = np.repeat(np.asarray(rows_point, dtype=np.int64), P)
    pixel = np.tile(np.arange(P, dtype=np.int64), n_obs)
    spans_a = np.asarray(spans) if spans else np.zeros(1)
    return Problem(
        frame_indices=list(frame_indices),
        point_ids=np.asarray(point_ids, dtype=np.int64),
        patch_pixels=P,
        frame=frame,
        rad=prow * P + pixel,
        obs=o_a,
        r2=r2,
        grad_sq=g_a,
        w_grad=gradient_weight(g_a, grad_mu),
        point_row=prow,
        pixel=pixel,
        active=np.ones(len(o_a), dtype=bool),
        width=db.width,
        height=db.height,
        radial_span=float(np.quantile(spans_a, 0.9)),
        n_saturated_obs=n_sat,
    )


def initial_state(problem: Problem, response: ResponseModel | None = None,
                  vignette_coeffs=(-0.1, 0.0, 0.0), exposures=None) -> CalibrationState:
    """Unit response, slight vignetting, unit exposures, mean-intensity radiances."""
    response = response or ResponseModel()
    vignette = VignetteModel.for_image(problem.width, problem.height, vignette_coeffs)
    n_rad = problem.n_points * problem.patch_pixels
    exposures = np.ones(problem.n_frames) if exposures is None else np.asarray(exposures, float)
    sums = np.bincount(problem.rad, weights=problem.obs, minlength=n_rad)
    counts = np.bincount(problem.rad, minlength=n_rad)
    radiance = np.where(counts > 0, sums / np.maximum(counts, 1) / 255.0, 0.5)
    return CalibrationState(response, vignette, exposures,
                            np.clip(radiance, 0.0, 1.0).reshape(problem.n_points, problem.patch_pixels),
                            list(problem.frame_indices))


def warm_state(problem: Problem, response: ResponseModel, vignette: VignetteModel,
               exposures) -> CalibrationState:
    """State seeded with known models and exposures; radiances are the mean of
    ``f^-1(O) / (e V)`` over each patch pixel's observations."""
    exposures = np.asarray(exposures, dtype=np.float64)
    if exposures.shape != (problem.n_frames,):
        raise ValueError(f"need {problem.n_frames} exposures, got {exposures.shape}")
    n_rad = problem.n_points * problem.patch_pixels
    irr = response.invert(problem.obs) / (exposures[problem.frame] * vignette.evaluate_r2(problem.r2))
    sums = np.bincount(problem.rad, weights=irr, minlength=n_rad)
    counts = np.bincount(problem.rad, minlength=n_rad)
    radiance = np.where(counts > 0, sums / np.maximum(counts, 1), 0.5)
    return CalibrationState(response, vignette, exposures.copy(),
                            np.clip(radiance, 0.0, 1.0).reshape(problem.n_points, problem.patch_pixels),
                            list(problem.frame_indices))

# -- compiled residual passes -----------------------------------------------------------------
#
# These mirror ResponseModel / VignetteModel evaluation exactly (same cell
# lookup, clamping and gamma chain) but walk the residuals once without
# temporaries.  The numpy path (residuals / jacobian_rows) is the reference.

_LAST_CELL = 1022  # SAMPLE_COUNT - 2


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _cell_of(x, gf):
    # clamped input, u domain, lookup cell
    xc = min(max(x, 0.0), 1.0)
    u = xc if gf == 1.0 else xc ** (1.0 / gf)
    t = u * 1023.0
    idx = int(np.floor(t))
    if idx > _LAST_CELL:
        idx = _LAST_CELL
    if idx < 0:
        idx = 0
    return xc, u, idx, t - idx


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _herm(y0, y1, m0, m1, s):
    s2 = s * s
    s3 = s2 * s
    return (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * m0 + (3.0 * s2 - 2.0 * s3) * y1 + (s3 - s2) * m1


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _herm_dt(y0, y1, m0, m1, s):
    s2 = s * s
    return (6.0 * s2 - 6.0 * s) * (y0 - y1) + (3.0 * s2 - 4.0 * s + 1.0) * m0 + (3.0 * s2 - 2.0 * s) * m1


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _basis_at(basis, btan, k, idx, s):
    return _herm(basis[k, idx], basis[k, idx + 1], btan[k, idx], btan[k, idx + 1], s)


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _response_at(curve, tangent, xc, idx, frac):
    if xc == 0.0:
        return 0.0
    if xc == 1.0:
        return 255.0
    return _herm(curve[idx], curve[idx + 1], tangent[idx], tangent[idx + 1], frac)


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _vignette_poly(r2, vc):
    return 1.0 + r2 * (vc[0] + r2 * (vc[1] + r2 * vc[2]))


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _huber(r, h):
    a = abs(r)
    if a <= h:
        return 0.5 * r * r
    return h * (a - 0.5 * h)


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _huber_w(r, h):
    a = abs(r)
    if a <= h:
        return 1.0
    return h / a


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def _energy_kernel(frame, rad, obs, r2, w_grad, active, exposures, L, curve, tangent, gf, vc, gv, h):
    total = 0.0
    for i in range(obs.shape[0]):
        if not active[i]:
            continue
        p = _vignette_poly(r2[i], vc)
        v = p if gv == 1.0 else max(p, 0.0) ** gv
        xc, u, idx, frac = _cell_of(exposures[frame[i]] * v * L[rad[i]], gf)
        r = obs[i] - _response_at(curve, tangent, xc, idx, frac)
        total += w_grad[i] * _huber(r, h)
    return total


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def _rad_energy_kernel(frame, rad, obs, r2, w_grad, active, exposures, L, curve, tangent, gf, vc, gv, h, out):
    for i in range(obs.shape[0]):
        if not active[i]:
            continue
        p = _vignette_poly(r2[i], vc)
        v = p if gv == 1.0 else max(p, 0.0) ** gv
        xc, u, idx, frac = _cell_of(exposures[frame[i]] * v * L[rad[i]], gf)
        r = obs[i] - _response_at(curve, tangent, xc, idx, frac)
        out[rad[i]] += w_grad[i] * _huber(r, h)


@njit(cache=True, inline="always", fastmath=True, error_model="numpy")
def _partials(x, curve, tangent, gf, idx, xc, u, frac):
    r_f = _response_at(curve, tangent, xc, idx, frac)
    if x < 0.0 or x > 1.0:
        fp = 0.0
    else:
        fp = 1023.0 * _herm_dt(curve[idx], curve[idx + 1], tangent[idx], tangent[idx + 1], frac)
        if gf != 1.0:
            fp = fp * (u / (gf * xc)) if xc > 0.0 else 0.0
    return r_f, fp


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def _normal_kernel(frame, rad, obs, r2, w_grad, active, exposures, L, curve, tangent, basis, btan,
                   gf, vc, gv, h, n_frames):
    """IRLS-weighted normal equations over (c1..c4, v1..v3) and per-frame exposures.

    Each frame accumulates the packed upper triangle of ``j j'`` and ``j r``
    for ``j = (dc, dv, de)``; the blocks are reduced afterwards.
    """
    acc = np.zeros((n_frames, 44))
    j = np.empty(8)
    for i in range(obs.shape[0]):
        if not active[i]:
            continue
        q = r2[i]
        p = _vignette_poly(q, vc)
        if gv == 1.0:
            v = p
            dvs = 1.0
        else:
            v = max(p, 0.0) ** gv
            dvs = gv * max(p, 1e-300) ** (gv - 1.0)
        f = frame[i]
        e = exposures[f]
        Li = L[rad[i]]
        x = e * v * Li
        xc, u, idx, frac = _cell_of(x, gf)
        r_f, fp = _partials(x, curve, tangent, gf, idx, xc, u, frac)
        r = obs[i] - r_f
        w = w_grad[i] * _huber_w(r, h)
        for k in range(4):
            j[k] = -_basis_at(basis, btan, k, idx, frac)
        a = -fp * e * Li * dvs
        j[4] = a * q
        j[5] = j[4] * q
        j[6] = j[5] * q
        j[7] = -fp * v * Li
        row = acc[f]
        n = 0
        for k in range(8):
            wk = w * j[k]
            row[36 + k] += wk * r
            for m in range(k, 8):
                row[n] += wk * j[m]
                n += 1
    hcv = np.zeros((7, 7))
    gcv = np.zeros(7)
    hce = np.zeros((7, n_frames))
    hee = np.zeros(n_frames)
    ge = np.zeros(n_frames)
    for f in range(n_frames):
        row = acc[f]
        n = 0
        for k in range(8):
            for m in range(k, 8):
                val = row[n]
                n += 1
                if k == 7:
                    hee[f] = val
                elif m == 7:
                    hce[k, f] = val
                else:
                    hcv[k, m] += val
        for k in range(7):
            gcv[k] += row[36 + k]
        ge[f] = row[43]
    for k in range(7):
        for m in range(k):
            hcv[k, m] = hcv[m, k]
    return hcv, gcv, hce, hee, ge


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def _radiance_kernel(frame, rad, obs, r2, w_grad, active, exposures, L, curve, tangent,
                     gf, vc, gv, h, jtj, jtr, before):
    for i in range(obs.shape[0]):
        if not active[i]:
            continue
        p = _vignette_poly(r2[i], vc)
        v = p if gv == 1.0 else max(p, 0.0) ** gv
        e = exposures[frame[i]]
        k = rad[i]
        x = e * v * L[k]
        xc, u, idx, frac = _cell_of(x, gf)
        r_f, fp = _partials(x, curve, tangent, gf, idx, xc, u, frac)
        r = obs[i] - r_f
        w = w_grad[i] * _huber_w(r, h)
        dL = -fp * e * v
        jtj[k] += w * dL * dL
        jtr[k] += w * dL * r
        before[k] += w_grad[i] * _huber(r, h)


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def _schur_kernel(frame, rad, obs, r2, w_grad, active, exposures, L, curve, tangent, basis, btan,
                  gf, vc, gv, h, n_frames, point_start, P, lam):
    """Radiance-eliminated correction ``sum_k b_k b_k' / d_k`` of the joint system.

    Residuals must be grouped by point and, within a point, by observation
    (``P`` consecutive entries).  ``b_k`` couples radiance ``k`` to
    (c, v, per-frame e) and ``d_k = (1 + lam) * J_k' W J_k``.
    Returns ``(C, c, hll, gll)``.
    """
    n_p = 7 + n_frames
    C = np.zeros((n_p, n_p))
    cvec = np.zeros(n_p)
    hll = np.zeros(L.shape[0])
    gll = np.zeros(L.shape[0])
    bc = np.zeros((P, 7))
    be = np.zeros((P, n_frames))
    hl = np.zeros(P)
    gl = np.zeros(P)
    fs = np.zeros(n_frames, dtype=np.int64)
    j = np.empty(8)
    for pt in range(point_start.shape[0] - 1):
        s0 = point_start[pt]
        s1 = point_start[pt + 1]
        n_slots = (s1 - s0) // P
        for k in range(P):
            hl[k] = 0.0
            gl[k] = 0.0
            for m in range(7):
                bc[k, m] = 0.0
            for t in range(n_slots):
                be[k, t] = 0.0
        for t in range(n_slots):
            fs[t] = frame[s0 + t * P]
        for i in range(s0, s1):
            if not active[i]:
                continue
            k = (i - s0) % P
            t = (i - s0) // P
            q = r2[i]
            p = _vignette_poly(q, vc)
            if gv == 1.0:
                v = p
                dvs = 1.0
            else:
                v = max(p, 0.0) ** gv
                dvs = gv * max(p, 1e-300) ** (gv - 1.0)
            e = exposures[frame[i]]
            Li = L[rad[i]]
            x = e * v * Li
            xc, u, idx, frac = _cell_of(x, gf)
            r_f, fp = _partials(x, curve, tangent, gf, idx, xc, u, frac)
            r = obs[i] - r_f
            w = w_grad[i] * _huber_w(r, h)
            for m in range(4):
                j[m] = -_basis_at(basis, btan, m, idx, frac)
            a = -fp * e * Li * dvs
            j[4] = a * q
            j[5] = j[4] * q
            j[6] = j[5] * q
            j[7] = -fp * v * Li
            dL = -fp * e * v
            wd = w * dL
            hl[k] += wd * dL
            gl[k] += wd * r
            for m in range(7):
                bc[k, m] += wd * j[m]
            be[k, t] += wd * j[7]
        base = rad[s0] - (rad[s0] % P) if s1 > s0 else 0
        for k in range(P):
            hll[base + k] = hl[k]
            gll[base + k] = gl[k]
            if hl[k] <= 0.0:
                continue
            inv = 1.0 / ((1.0 + lam) * hl[k])
            for a in range(7):
                ba = bc[k, a] * inv
                cvec[a] += ba * gl[k]
                for b in range(a + 1):
                    C[a, b] += ba * bc[k, b]
            for t in range(n_slots):
                val = be[k, t]
                if val == 0.0:
                    continue
                fa = 7 + fs[t]
                vi = val * inv
                cvec[fa] += vi * gl[k]
                for a in range(7):
                    C[fa, a] += vi * bc[k, a]
                for u2 in range(t + 1):
                    C[fa, 7 + fs[u2]] += vi * be[k, u2]
    for a in range(n_p):
        for b in range(a):
            C[b, a] = C[a, b]
    return C, cvec, hll, gll


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def _coupling_kernel(frame, rad, obs, r2, w_grad, active, exposures, L, curve, tangent, basis, btan,
                     gf, vc, gv, h, dp, out):
    """Per radiance ``b_k' dp`` for a full-frame parameter step ``dp``."""
    for i in range(obs.shape[0]):
        if not active[i]:
            continue
        q = r2[i]
        p = _vignette_poly(q, vc)
        if gv == 1.0:
            v = p
            dvs = 1.0
        else:
            v = max(p, 0.0) ** gv
            dvs = gv * max(p, 1e-300) ** (gv - 1.0)
        f = frame[i]
        e = exposures[f]
        Li = L[rad[i]]
        x = e * v * Li
        xc, u, idx, frac = _cell_of(x, gf)
        r_f, fp = _partials(x, curve, tangent, gf, idx, xc, u, frac)
        r = obs[i] - r_f
        w = w_grad[i] * _huber_w(r, h)
        acc = 0.0
        for m in range(4):
            acc -= _basis_at(basis, btan, m, idx, frac) * dp[m]
        a = -fp * e * Li * dvs
        acc += a * q * (dp[4] + q * (dp[5] + q * dp[6]))
        acc -= fp * v * Li * dp[7 + f]
        out[rad[i]] += w * (-fp * e * v) * acc


def _kernel_args(problem: Problem, state: CalibrationState):
    return (problem.frame, problem.rad, problem.obs, problem.r2, problem.w_grad, problem.active,
            np.ascontiguousarray(state.exposures, dtype=np.float64),
            np.ascontiguousarray(state.radiances, dtype=np.float64).reshape(-1))


def _model_args(state: CalibrationState):
    resp, vig = state.response, state.vignette
    return (resp.curve, resp._tangent, float(resp.gamma),
            np.ascontiguousarray(vig.coeffs, dtype=np.float64), float(vig.gamma))


def _basis_args(state: CalibrationState):
    b = state.response.basis
    return np.ascontiguousarray(b.h), np.ascontiguousarray(b.h_tangent)


def normal_equations(problem: Problem, state: CalibrationState, cfg: OptimizerConfig):
    """``(H_cv (7,7), g_cv (7,), H_ce (7,F), h_ee (F,), g_e (F,))`` of the IRLS-weighted system."""
    curve, tangent, gf, vc, gv = _model_args(state)
    return _normal_kernel(*_kernel_args(problem, state), curve, tangent, *_basis_args(state), gf, vc, gv,
                          float(cfg.huber_h), problem.n_frames)


# -- energy and derivatives ---------------------------------------------------------------

def _irradiance(problem: Problem, state: CalibrationState, idx=None):
    sl = slice(None) if idx is None else idx
    e = state.exposures[problem.frame[sl]]
    v = state.vignette.evaluate_r2(problem.r2[sl])
    L = state.radiances.reshape(-1)[problem.rad[sl]]
    return e, v, L


def residuals(problem: Problem, state: CalibrationState, idx=None) -> np.ndarray:
    e, v, L = _irradiance(problem, state, idx)
    sl = slice(None) if idx is None else idx
    return problem.obs[sl] - state.response.evaluate(e * v * L)


def energy(problem: Problem, state: CalibrationState, cfg: OptimizerConfig | None = None,
           r: np.ndarray | None = None) -> float:
    cfg = cfg or OptimizerConfig()
    act = problem.active
    if not act.any():
        raise InsufficientDataError("no active residuals")
    if r is None:
        curve, tangent, gf, vc, gv = _model_args(state)
        return float(_energy_kernel(*_kernel_args(problem, state), curve, tangent, gf, vc, gv, float(cfg.huber_h)))
    return float(np.sum(problem.w_grad[act] * huber_loss(r[act], cfg.huber_h)))


@dataclass
class JacobianRows:
    """Partials of residuals: ``dc`` (n, 4), ``dv`` (n, 3), ``de`` (n,), ``dL`` (n,)."""

    r: np.ndarray
    dc: np.ndarray
    dv: np.ndarray
    de: np.ndarray
    dL: np.ndarray


def jacobian_rows(problem: Problem, state: CalibrationState, idx=None) -> JacobianRows:
    e, v, L = _irradiance(problem, state, idx)
    sl = slice(None) if idx is None else idx
    acc = e * v * L
    resp = state.response
    r = problem.obs[sl] - resp.evaluate(acc)
    fp = resp.derivative(acc)
    dc = -resp.basis_values(acc).T
    dv = -(fp * e * L)[:, None] * state.vignette.gradient_r2(problem.r2[sl]).T
    de = -fp * v * L
    dL = -fp * e * v
    return JacobianRows(r, dc, dv, de, dL)


def jacobian_row(problem: Problem, state: CalibrationState, i: int) -> np.ndarray:
    """Eight partials (dc1..dc4, dv1..dv3, de_i) of residual ``i``."""
    j = jacobian_rows(problem, state, np.array([i]))
    return np.concatenate([j.dc[0], j.dv[0], j.de])


# -- LM steps -------------------------------------------------------------------------------

@dataclass
class StepInfo:
    energy_before: float
    energy_after: float
    accepted: bool
    lam: float
    step_norm: float
    reason: str = ""


def _check_state(state: CalibrationState, cfg: OptimizerConfig) -> str:
    if not state.response.is_monotone():
        return "non-monotone response"
    if state.vignette.min_value() < cfg.min_vignette:
        return "vignette below minimum"
    return ""


def _apply_param_step(state: CalibrationState, dx: np.ndarray, knots: ExposureKnots,
                      cfg: OptimizerConfig, radiances: np.ndarray | None = None):
    """Candidate state for ``x <- x - dx`` (knot 0 fixed) and the guard that rejects it, if any."""
    kv = state.exposures[knots.knots].copy()
    kv[1:] -= dx[7:]
    if np.any(kv <= 0):
        return None, "non-positive exposure"
    candidate = replace(
        state,
        response=state.response.with_coeffs(state.response.coeffs - dx[:4]),
        vignette=state.vignette.with_coeffs(state.vignette.coeffs - dx[4:7]),
        exposures=knots.expand(kv),
        radiances=state.radiances if radiances is None else radiances,
    )
    return candidate, _check_state(candidate, cfg)


def _param_map(state: CalibrationState, knots: ExposureKnots) -> np.ndarray:
    """d(c, v, per-frame e) / d(c, v, free knots): identity on (c, v), knot Jacobian on e."""
    m = knots.jacobian(state.exposures)[:, 1:]
    F, K = m.shape
    M = np.zeros((7 + F, 7 + K))
    M[:7, :7] = np.eye(7)
    M[7:, 7:] = m
    return M


def step_params(problem: Problem, state: CalibrationState, cfg: OptimizerConfig, lam: float,
                knots: ExposureKnots | None = None, energy_before: float | None = None):
    """One damped Gauss-Newton step on (c, v, free exposures) with radiances fixed.

    The first exposure knot is held fixed (scale gauge).  Returns
    ``(state, accepted, new_lambda, StepInfo)``; a rejected step returns the
    input state and an inflated lambda.
    """
    if knots is None:
        knots = ExposureKnots.every(problem.n_frames)
    if energy_before is None:
        energy_before = energy(problem, state, cfg)
    h_cv, g_cv, h_ce, h_ee, g_e = normal_equations(problem, state, cfg)
    n_cv = 7

    m = knots.jacobian(state.exposures)[:, 1:]   # first knot fixed
    K = m.shape[1]
    H = np.empty((n_cv + K, n_cv + K))
    H[:n_cv, :n_cv] = h_cv
    H[:n_cv, n_cv:] = h_ce @ m
    H[n_cv:, :n_cv] = H[:n_cv, n_cv:].T
    H[n_cv:, n_cv:] = m.T @ (h_ee[:, None] * m)
    g = np.concatenate([g_cv, m.T @ g_e])

    diag = np.diag(H).copy()
    diag[diag <= 0] = 1e-12
    A = H + lam * np.diag(diag)
    try:
        dx = np.linalg.solve(A, g)
    except np.linalg.LinAlgError:
        dx = None
    if dx is None or not np.all(np.isfinite(dx)):
        info = StepInfo(energy_before, energy_before, False, lam * cfg.lm_lambda_reject, math.inf, "singular")
        return state, False, lam * cfg.lm_lambda_reject, info

    step_norm = float(np.linalg.norm(dx))
    candidate, reason = _apply_param_step(state, dx, knots, cfg)
    if not reason:
        e_new = energy(problem, candidate, cfg)
        if e_new <= energy_before:
            lam_new = lam * cfg.lm_lambda_accept
            return candidate, True, lam_new, StepInfo(energy_before, e_new, True, lam_new, step_norm)
        reason = "energy increase"
    lam_new = lam * cfg.lm_lambda_reject
    return state, False, lam_new, StepInfo(energy_before, energy_before, False, lam_new, step_norm, reason)


def step_radiances(problem: Problem, state: CalibrationState, cfg: OptimizerConfig, lam: float) -> CalibrationState:
    """Independent damped scalar GN update of every patch-pixel radiance.

    Updates that would raise the energy of their own residuals are dropped,
    so the total energy never increases.
    """
    n_rad = problem.n_points * problem.patch_pixels
    curve, tangent, gf, vc, gv = _model_args(state)
    h = float(cfg.huber_h)
    args = _kernel_args(problem, state)
    jtj = np.zeros(n_rad)
    jtr = np.zeros(n_rad)
    before = np.zeros(n_rad)
    _radiance_kernel(*args, curve, tangent, gf, vc, gv, h, jtj, jtr, before)
    L = args[-1]
    ok = jtj > 0
    delta = np.zeros(n_rad)
    delta[ok] = jtr[ok] / ((1.0 + lam) * jtj[ok])
    L_new = np.clip(L - delta, 0.0, 1.0)
    after = np.zeros(n_rad)
    _rad_energy_kernel(*args[:-1], L_new, curve, tangent, gf, vc, gv, h, after)
    keep = ok & (after <= before)
    L_out = np.where(keep, L_new, L)
    return replace(state, radiances=L_out.reshape(state.radiances.shape))


def _point_starts(problem: Problem) -> np.ndarray:
    ps = problem.__dict__.get("_point_start")
    if ps is None:
        if len(problem.point_row) and np.any(np.diff(problem.point_row) < 0):
            raise ValueError("residuals must be grouped by point")
        ps = np.searchsorted(problem.point_row, np.arange(problem.n_points + 1)).astype(np.int64)
        problem.__dict__["_point_start"] = ps
    return ps


def step_joint(problem: Problem, state: CalibrationState, cfg: OptimizerConfig, lam: float,
               knots: ExposureKnots | None = None, energy_before: float | None = None):
    """One damped Gauss-Newton step on all variables at once.

    Radiances are eliminated exactly (their block is diagonal), the reduced
    system is solved for (c, v, free exposures) and the radiance updates are
    recovered by back-substitution.  Same damping, guards and acceptance
    rule as :func:`step_params`.
    """
    if knots is None:
        knots = ExposureKnots.every(problem.n_frames)
    if energy_before is None:
        energy_before = energy(problem, state, cfg)
    curve, tangent, gf, vc, gv = _model_args(state)
    args = _kernel_args(problem, state)
    basis, btan = _basis_args(state)
    h = float(cfg.huber_h)
    F = problem.n_frames
    h_cv, g_cv, h_ce, h_ee, g_e = normal_equations(problem, state, cfg)
    C, c, hll, gll = _schur_kernel(*args, curve, tangent, basis, btan, gf, vc, gv, h, F,
                                   _point_starts(problem), problem.patch_pixels, float(lam))
    H = np.zeros((7 + F, 7 + F))
    H[:7, :7] = h_cv
    H[:7, 7:] = h_ce
    H[7:, :7] = h_ce.T
    H[7:, 7:] = np.diag(h_ee)
    g = np.concatenate([g_cv, g_e])
    M = _param_map(state, knots)
    Hk = M.T @ H @ M
    S = M.T @ (H - C) @ M
    rhs = M.T @ (g - c)
    diag = np.diag(Hk).copy()
    diag[diag <= 0] = 1e-12
    try:
        dx = np.linalg.solve(S + lam * np.diag(diag), rhs)
    except np.linalg.LinAlgError:
        dx = None
    lam_up = lam * cfg.lm_lambda_reject
    if dx is None or not np.all(np.isfinite(dx)):
        return state, False, lam_up, StepInfo(energy_before, energy_before, False, lam_up, math.inf, "singular")
    coup = np.zeros(len(hll))
    _coupling_kernel(*args, curve, tangent, basis, btan, gf, vc, gv, h, M @ dx, coup)
    ok = hll > 0
    dL = np.zeros(len(hll))
    dL[ok] = (gll[ok] - coup[ok]) / ((1.0 + lam) * hll[ok])
    L_new = np.clip(args[-1] - dL, 0.0, 1.0).reshape(state.radiances.shape)
    step_norm = float(np.sqrt(np.dot(dx, dx) + np.dot(dL, dL)))
    candidate, reason = _apply_param_step(state, dx, knots, cfg, L_new)
    if not reason:
        e_new = energy(problem, candidate, cfg)
        if e_new <= energy_before:
            lam_new = lam * cfg.lm_lambda_accept
            return candidate, True, lam_new, StepInfo(energy_before, e_new, True, lam_new, step_norm)
        reason = "energy increase"
    return state, False, lam_up, StepInfo(energy_before, energy_before, False, lam_up, step_norm, reason)


# -- block optimization ------------------------------------------------------------------------

@dataclass
class EnergyLogEntry:
    round: int
    step: str
    energy: float
    lam: float
    accepted: bool


@dataclass
class BlockResult:
    state: CalibrationState
    problem: Problem
    trace: list[EnergyLogEntry] = field(default_factory=list)
    rejected: int = 0

    def energies(self, phase: int | None = None) -> list[float]:
        return [t.energy for t in self.trace if t.accepted]


def check_constraints(problem: Problem, cfg: OptimizerConfig) -> None:
    if problem.n_points < cfg.min_points:
        raise InsufficientDataError(
            f"insufficient correspondences: {problem.n_points} points (need {cfg.min_points})")
    if problem.radial_span < cfg.min_radial_span:
        raise InsufficientDataError(
            f"insufficient radial motion: span {problem.radial_span:.3f} < {cfg.min_radial_span}")
    if not problem.active.any():
        raise InsufficientDataError("insufficient correspondences: all observations saturated")


def run_rounds(problem: Problem, state: CalibrationState, cfg: OptimizerConfig,
               knots: ExposureKnots | None = None, max_rounds: int | None = None,
               trace: list[EnergyLogEntry] | None = None, lam: float | None = None,
               round_offset: int = 0) -> tuple[CalibrationState, float]:
    """Alternate parameter and radiance steps until the relative energy decrease stalls.

    With ``cfg.eliminate_radiances`` the parameter step accounts for the
    radiances' response (and moves them along); the radiance step then
    re-fits them with the new parameters.  Both steps are energy-checked.
    """
    max_rounds = cfg.max_rounds if max_rounds is None else max_rounds
    lam = cfg.lm_lambda_init if lam is None else lam
    trace = [] if trace is None else trace
    E = energy(problem, state, cfg)
    trace.append(EnergyLogEntry(round_offset, "init", E, lam, True))
    step = step_joint if cfg.eliminate_radiances else step_params
    for rnd in range(round_offset + 1, round_offset + max_rounds + 1):
        E_start = E
        accepted = False
        for _ in range(cfg.max_lambda_inflations):
            state, accepted, lam, info = step(problem, state, cfg, lam, knots, energy_before=E)
            trace.append(EnergyLogEntry(rnd, "params", info.energy_after, lam, accepted))
            if accepted:
                E = info.energy_after
                break
        state = step_radiances(problem, state, cfg, lam)
        E_new = energy(problem, state, cfg)
        trace.append(EnergyLogEntry(rnd, "radiance", E_new, lam, E_new <= E))
        E = E_new
        rel = (E_start - E) / max(E_start, 1e-300)
        log.debug("round %d energy %.6g rel %.3g lambda %.3g", rnd, E, rel, lam)
        if rel < cfg.convergence_rel_energy:
            break
    return state, lam


def reject_outliers(problem: Problem, state: CalibrationState, fraction: float) -> int:
    """Deactivate the ``fraction`` of active residuals with the largest ``|r|``.

    Ties are broken by (point id, frame, pixel).  Returns the number rejected.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must be in [0, 1)")
    act = np.flatnonzero(problem.active)
    n_rej = int(math.floor(fraction * len(act) + 1e-9))
    if n_rej == 0:
        return 0
    r = np.abs(residuals(problem, state, act))
    keys = problem.keys()[act]
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0], -r))
    problem.active[act[order[:n_rej]]] = False
    return n_rej


def optimize_block(db_or_problem, init: CalibrationState | None = None,
                   cfg: OptimizerConfig | None = None, response: ResponseModel | None = None,
                   reject: bool = True, knots: ExposureKnots | None = None,
                   max_rounds: int | None = None) -> BlockResult:
    """Full block calibration: converge, optionally reject outliers, converge again."""
    cfg = cfg or OptimizerConfig()
    if isinstance(db_or_problem, Problem):
        problem = db_or_problem
    else:
        if len(db_or_problem) == 0:
            raise InsufficientDataError("insufficient correspondences: empty track database")
        problem = build_problem(db_or_problem, cfg.grad_mu)
    check_constraints(problem, cfg)
    if init is None:
        init = initial_state(problem, response, cfg.init_vignette)
    trace: list[EnergyLogEntry] = []
    state, lam = run_rounds(problem, init, cfg, knots, max_rounds, trace)
    n_rej = 0
    if reject and cfg.rejection_fraction > 0:
        n_rej = reject_outliers(problem, state, cfg.rejection_fraction)
        last_round = trace[-1].round
        state, lam = run_rounds(problem, state, cfg, knots, max_rounds, trace, lam, last_round)
    return BlockResult(state, problem, trace, n_rej)


def write_energy_log(path: str | Path, trace: list[EnergyLogEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "step", "energy", "lambda", "accepted"])
        for t in trace:
            w.writerow([t.round, t.step, repr(t.energy), repr(t.lam), int(t.accepted)])


# -- export ---------------------------------------------------------------------------------------

def result_from_state(state: CalibrationState, width: int, height: int) -> CalibrationResult:
    """Fix the exponential ambiguity (f(0.5) = 127.5) and export tables."""
    gamma = anchor_gamma(state.response)
    resp = replace(state.response, gamma=state.response.gamma * gamma)
    return CalibrationResult(
        response_lut=resp.lut(),
        inverse_lut=resp.invert(),
        vignette_coeffs=state.vignette.coeffs.copy(),
        exposures=np.power(state.exposures, gamma),
        gamma_applied=state.vignette.gamma * gamma,
        width=width,
        height=height,
        frame_indices=list(state.frame_indices) if state.frame_indices else None,
    )
