"""Feature tracking frontend producing scene-point correspondences.

Shi-Tomasi corners are sampled uniformly over a grid of cells and tracked
with a pyramidal Lucas-Kanade tracker that also estimates one
multiplicative gain per frame pair, so tracks survive abrupt exposure
changes.  Inconsistent tracks are removed with a forward-backward check.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import Frame, Observation, TrackDatabase

log = logging.getLogger(__name__)

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class TrackerConfig:
    target_features: int = 500
    patch_size: int = 5
    cell_size: int = 32
    pyramid_levels: int = 4
    klt_window: int = 21
    fb_threshold: float = 1.0
    max_klt_iters: int = 30
    min_eigen_quality: float = 0.01
    klt_epsilon: float = 0.01     # px, per-level convergence threshold
    corner_block: int = 3

    def __post_init__(self):
        for name in ("target_features", "patch_size", "cell_size", "pyramid_levels",
                     "klt_window", "max_klt_iters", "corner_block"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patch_size % 2 == 0 or self.klt_window % 2 == 0:
            raise ValueError("patch_size and klt_window must be odd")
        if self.patch_size > self.klt_window:
            raise ValueError("patch_size must not exceed klt_window")
        if not self.fb_threshold > 0 or not self.min_eigen_quality > 0:
            raise ValueError("fb_threshold and min_eigen_quality must be positive")


@dataclass
class FramePairGainResult:
    gain: float
    origins: np.ndarray          # (n, 2) x, y in the previous frame
    positions: np.ndarray        # (n, 2) tracked x, y in the next frame (nan if lost)
    status: np.ndarray           # (n,) bool, True = tracked
    fb_error: np.ndarray | None = None

    @property
    def displacements(self) -> np.ndarray:
        return self.positions - self.origins

    def tracked(self) -> np.ndarray:
        return np.flatnonzero(self.status)


# -- images -----------------------------------------------------------------------

def _as_float(image) -> np.ndarray:
    if isinstance(image, Frame):
        image = image.image
    return np.ascontiguousarray(image, dtype=np.float64)


def central_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(img)
    return gx, gy


@dataclass
class PyramidLevel:
    image: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    scale: float

    @property
    def stack(self) -> np.ndarray:
        st = self.__dict__.get("_stack")
        if st is None:
            st = self.__dict__["_stack"] = np.ascontiguousarray(np.stack([self.image, self.gx, self.gy], axis=-1))
        return st


def build_pyramid(image, levels: int, min_size: int = 0) -> list[PyramidLevel]:
    """Float image pyramid, factor 2, 5-tap binomial anti-aliasing."""
    img = _as_float(image)
    pyr = []
    for level in range(levels):
        if level > 0:
            if min(img.shape) // 2 < max(min_size, 8):
                break
            blurred = ndimage.convolve1d(img, _BINOMIAL5, axis=0, mode="reflect")
            blurred = ndimage.convolve1d(blurred, _BINOMIAL5, axis=1, mode="reflect")
            img = np.ascontiguousarray(blurred[::2, ::2])
        gx, gy = central_gradients(img)
        pyr.append(PyramidLevel(img, np.ascontiguousarray(gx), np.ascontiguousarray(gy), 2.0**level))
    return pyr


# -- corners ---------------------------------------------------------------------

def min_eigen_map(image, block: int = 3) -> np.ndarray:
    """Smaller eigenvalue of the box-filtered gradient structure tensor."""
    img = _as_float(image)
    gx, gy = central_gradients(img)
    a = ndimage.uniform_filter(gx * gx, block, mode="nearest") * block * block
    b = ndimage.uniform_filter(gx * gy, block, mode="nearest") * block * block
    c = ndimage.uniform_filter(gy * gy, block, mode="nearest") * block * block
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return np.maximum(half_tr - disc, 0.0)


def _grid_shape(width: int, height: int, cell: int) -> tuple[int, int]:
    return math.ceil(width / cell), math.ceil(height / cell)


def cell_quota(width: int, height: int, config: TrackerConfig) -> int:
    nx, ny = _grid_shape(width, height, config.cell_size)
    return math.ceil(config.target_features / (nx * ny))


def border_margin(config: TrackerConfig) -> int:
    return config.patch_size // 2 + 2


def extract_corners(frame, existing, config: TrackerConfig, max_new: int | None = None) -> np.ndarray:
    """New Shi-Tomasi corners for grid cells below their quota.

    Candidates are local maxima of the min-eigenvalue map above
    ``min_eigen_quality * max``; they are taken in order of decreasing score
    while their cell is under quota and no feature lies within
    ``patch_size`` pixels.
    """
    img = _as_float(frame)
    h, w = img.shape
    existing = np.asarray(existing, dtype=np.float64).reshape(-1, 2)
    if max_new is None:
        max_new = config.target_features - len(existing)
    if max_new <= 0:
        return np.empty((0, 2))
    score = min_eigen_map(img, config.corner_block)
    peak = float(score.max())
    if peak <= 1e-9:
        return np.empty((0, 2))
    local_max = ndimage.maximum_filter(score, size=3, mode="nearest")
    cand = (score >= local_max) & (score > config.min_eigen_quality * peak)
    m = border_margin(config)
    cand[:m, :] = False
    cand[-m:, :] = False
    cand[:, :m] = False
    cand[:, -m:] = False
    ys, xs = np.nonzero(cand)
    if xs.size == 0:
        return np.empty((0, 2))
    s = score[ys, xs]
    # descending score; raster order as the deterministic tie-break
    order = np.lexsort((xs, ys, -s))
    xs, ys = xs[order], ys[order]

    cell = config.cell_size
    nx, ny = _grid_shape(w, h, cell)
    quota = cell_quota(w, h, config)
    counts = np.zeros((ny, nx), dtype=np.int64)
    if len(existing):
        ex_cx = np.clip((existing[:, 0] // cell).astype(int), 0, nx - 1)
        ex_cy = np.clip((existing[:, 1] // cell).astype(int), 0, ny - 1)
        np.add.at(counts, (ex_cy, ex_cx), 1)

    # occupancy grid for the spacing test, bucket size = spacing
    spacing = float(config.patch_size)
    buckets: dict[tuple[int, int], list[tuple[float, float]]] = {}

    def _add(px, py):
        buckets.setdefault((int(px // spacing), int(py // spacing)), []).append((px, py))

    def _free(px, py):
        bx, by = int(px // spacing), int(py // spacing)
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                for qx, qy in buckets.get((bx + ox, by + oy), ()):
                    if (qx - px) ** 2 + (qy - py) ** 2 < spacing * spacing:
                        return False
        return True

    for px, py in existing:
        _add(px, py)

    chosen = []
    for x, y in zip(xs.tolist(), ys.tolist()):
        cx, cy = x // cell, y // cell
        if counts[cy, cx] >= quota:
            continue
        if not _free(float(x), float(y)):
            continue
        chosen.append((float(x), float(y)))
        counts[cy, cx] += 1
        _add(float(x), float(y))
        if len(chosen) >= max_new:
            break
    return np.array(chosen, dtype=np.float64).reshape(-1, 2)


# -- gain-robust KLT -----------------------------------------------------------------

@njit(cache=True, nogil=True)
def _bilinear(img, x, y):
    h, w = img.shape
    if x < 0.0:
        x = 0.0
    elif x > w - 1.0:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    elif y > h - 1.0:
        y = h - 1.0
    x0 = int(x)
    y0 = int(y)
    if x0 > w - 2:
        x0 = w - 2
    if y0 > h - 2:
        y0 = h - 2
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] + fx * (img[y0, x0 + 1] - img[y0, x0])
    bot = img[y0 + 1, x0] + fx * (img[y0 + 1, x0 + 1] - img[y0 + 1, x0])
    return top + fy * (bot - top)


@njit(cache=True, nogil=True)
def _sample_windows(img, px, py, half, out, valid):
    # all window pixels share the sub-pixel fraction of the feature location;
    # samples falling outside the image are flagged invalid
    h, w = img.shape
    n = px.shape[0]
    for f in range(n):
        k = 0
        x0 = int(np.floor(px[f]))
        y0 = int(np.floor(py[f]))
        inside = x0 - half >= 0 and y0 - half >= 0 and x0 + half + 1 <= w - 1 and y0 + half + 1 <= h - 1
        if inside:
            fx = px[f] - x0
            fy = py[f] - y0
            for wy in range(-half, half + 1):
                for wx in range(-half, half + 1):
                    yy = y0 + wy
                    xx = x0 + wx
                    top = img[yy, xx] + fx * (img[yy, xx + 1] - img[yy, xx])
                    bot = img[yy + 1, xx] + fx * (img[yy + 1, xx + 1] - img[yy + 1, xx])
                    out[f, k] = top + fy * (bot - top)
                    valid[f, k] = True
                    k += 1
        else:
            for wy in range(-half, half + 1):
                for wx in range(-half, half + 1):
                    x = px[f] + wx
                    y = py[f] + wy
                    valid[f, k] = 0.0 <= x <= w - 1.0 and 0.0 <= y <= h - 1.0
                    out[f, k] = _bilinear(img, x, y)
                    k += 1


@njit(cache=True, nogil=True)
def _bilinear3(stack, x, y, out):
    h, w, _ = stack.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = min(int(x), w - 2)
    y0 = min(int(y), h - 2)
    fx = x - x0
    fy = y - y0
    for c in range(3):
        top = stack[y0, x0, c] + fx * (stack[y0, x0 + 1, c] - stack[y0, x0, c])
        bot = stack[y0 + 1, x0, c] + fx * (stack[y0 + 1, x0 + 1, c] - stack[y0 + 1, x0, c])
        out[c] = top + fy * (bot - top)


@njit(cache=True, nogil=True, fastmath=True)
def _klt_accumulate(tmpl, tvalid, stack, qx, qy, gain, half, active, acc):
    """Per-feature sums of the joint normal equations at the current warp.

    ``stack[..., 0:3]`` holds the next image and its x / y gradients.
    Residual ``r = gain * T - I(q)``; ``J_d = -grad I``, ``J_g = T``.
    Window pixels whose template or target sample lies outside the image
    are left out.
    """
    h, w, _ = stack.shape
    n = qx.shape[0]
    tmp = np.empty(3)
    for f in range(n):
        a11 = 0.0
        a12 = 0.0
        a22 = 0.0
        b1 = 0.0
        b2 = 0.0
        c1 = 0.0
        c2 = 0.0
        tt = 0.0
        tr = 0.0
        rr = 0.0
        if active[f]:
            x0 = int(np.floor(qx[f]))
            y0 = int(np.floor(qy[f]))
            inside = x0 - half >= 0 and y0 - half >= 0 and x0 + half + 1 <= w - 1 and y0 + half + 1 <= h - 1
            fx = qx[f] - x0
            fy = qy[f] - y0
            w00 = (1.0 - fx) * (1.0 - fy)
            w01 = fx * (1.0 - fy)
            w10 = (1.0 - fx) * fy
            w11 = fx * fy
            k = 0
            for wy in range(-half, half + 1):
                yy = y0 + wy
                for wx in range(-half, half + 1):
                    xx = x0 + wx
                    t = tmpl[f, k]
                    ok = tvalid[f, k]
                    k += 1
                    if not ok:
                        continue
                    if inside:
                        v = (w00 * stack[yy, xx, 0] + w01 * stack[yy, xx + 1, 0]
                             + w10 * stack[yy + 1, xx, 0] + w11 * stack[yy + 1, xx + 1, 0])
                        ix = (w00 * stack[yy, xx, 1] + w01 * stack[yy, xx + 1, 1]
                              + w10 * stack[yy + 1, xx, 1] + w11 * stack[yy + 1, xx + 1, 1])
                        iy = (w00 * stack[yy, xx, 2] + w01 * stack[yy, xx + 1, 2]
                              + w10 * stack[yy + 1, xx, 2] + w11 * stack[yy + 1, xx + 1, 2])
                    else:
                        sx = qx[f] + wx
                        sy = qy[f] + wy
                        if sx < 0.0 or sy < 0.0 or sx > w - 1.0 or sy > h - 1.0:
                            continue
                        _bilinear3(stack, sx, sy, tmp)
                        v = tmp[0]
                        ix = tmp[1]
                        iy = tmp[2]
                    r = gain * t - v
                    a11 += ix * ix
                    a12 += ix * iy
                    a22 += iy * iy
                    c1 -= ix * t
                    c2 -= iy * t
                    tt += t * t
                    b1 -= ix * r
                    b2 -= iy * r
                    tr += t * r
                    rr += r * r
        acc[f, 0] = a11
        acc[f, 1] = a12
        acc[f, 2] = a22
        acc[f, 3] = c1
        acc[f, 4] = c2
        acc[f, 5] = tt
        acc[f, 6] = b1
        acc[f, 7] = b2
        acc[f, 8] = tr
        acc[f, 9] = rr


def solve_gain_flow_system(hdd, hdg, hgg, bd, bg):
    """Gauss-Newton step of the joint (displacements, gain) system via the Schur complement.

    The normal matrix is arrow shaped: a 2x2 block ``A_f`` per feature, a
    coupling column ``B_f`` to the shared gain and the scalar ``c = sum hgg``.
    Returns ``(delta_d (n, 2), delta_g)`` solving ``H delta = -b``.
    ``hdd`` rows hold (a11, a12, a22).
    """
    hdd = np.asarray(hdd, float)
    hdg = np.asarray(hdg, float)
    bd = np.asarray(bd, float)
    a11, a12, a22 = hdd[:, 0], hdd[:, 1], hdd[:, 2]
    det = a11 * a22 - a12 * a12
    inv11, inv12, inv22 = a22 / det, -a12 / det, a11 / det
    # A^-1 B and A^-1 b per feature
    aib1 = inv11 * hdg[:, 0] + inv12 * hdg[:, 1]
    aib2 = inv12 * hdg[:, 0] + inv22 * hdg[:, 1]
    aid1 = inv11 * bd[:, 0] + inv12 * bd[:, 1]
    aid2 = inv12 * bd[:, 0] + inv22 * bd[:, 1]
    schur = float(np.sum(hgg)) - float(np.sum(hdg[:, 0] * aib1 + hdg[:, 1] * aib2))
    rhs = -float(np.sum(bg)) + float(np.sum(hdg[:, 0] * aid1 + hdg[:, 1] * aid2))
    delta_g = rhs / schur
    delta_d = np.empty_like(bd)
    delta_d[:, 0] = -aid1 - aib1 * delta_g
    delta_d[:, 1] = -aid2 - aib2 * delta_g
    return delta_d, delta_g


def _track_levels(pyr_a, pyr_b, origins, guess, gain, config: TrackerConfig):
    n = len(origins)
    status = np.ones(n, dtype=np.bool_)
    levels = min(len(pyr_a), len(pyr_b))
    d = (guess - origins) / pyr_a[levels - 1].scale
    half = config.klt_window // 2
    npx = (2 * half + 1) ** 2
    acc = np.empty((n, 10))
    for li in range(levels - 1, -1, -1):
        la, lb = pyr_a[li], pyr_b[li]
        if li != levels - 1:
            d *= 2.0
        p = origins / la.scale
        px = np.ascontiguousarray(p[:, 0])
        py = np.ascontiguousarray(p[:, 1])
        hh, ww = la.image.shape
        tmpl = np.empty((n, npx))
        tvalid = np.empty((n, npx), dtype=np.bool_)
        _sample_windows(la.image, px, py, half, tmpl, tvalid)
        for _ in range(config.max_klt_iters):
            if not status.any():
                break
            qx = np.ascontiguousarray(px + d[:, 0])
            qy = np.ascontiguousarray(py + d[:, 1])
            _klt_accumulate(tmpl, tvalid, lb.stack, qx, qy, gain, half, status, acc)
            hdd = acc[:, 0:3]
            hdg = acc[:, 3:5]
            hgg = acc[:, 5]
            bd = acc[:, 6:8]
            bg = acc[:, 8]
            tr = hdd[:, 0] + hdd[:, 2]
            det = hdd[:, 0] * hdd[:, 2] - hdd[:, 1] ** 2
            min_eig = 0.5 * tr - np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
            status &= min_eig > 1e-4 * npx
            idx = np.flatnonzero(status)
            if idx.size == 0:
                break
            step_d, step_g = solve_gain_flow_system(hdd[idx], hdg[idx], hgg[idx], bd[idx], bg[idx])
            if not np.isfinite(step_g) or not np.all(np.isfinite(step_d)):
                status[:] = False
                break
            d[idx] += step_d
            gain += step_g
            if not 0.02 < gain < 50.0:
                status[:] = False
                break
            q = p + d
            out = ((np.abs(d) > 2 * half + 1).any(axis=1) | (q[:, 0] < 0) | (q[:, 1] < 0)
                   | (q[:, 0] > ww - 1) | (q[:, 1] > hh - 1))
            status &= ~out
            # stragglers are left to the forward-backward check
            moving = np.max(np.abs(step_d), axis=1)
            if np.quantile(moving, 0.95) < config.klt_epsilon and abs(step_g) < 1e-5:
                break
    positions = origins + d
    positions[~status] = np.nan
    return positions, status, gain


def track_pair_gain_klt(prev, nxt, features, config: TrackerConfig,
                        prev_pyr: list[PyramidLevel] | None = None,
                        next_pyr: list[PyramidLevel] | None = None,
                        gain_init: float = 1.0,
                        guess: np.ndarray | None = None) -> FramePairGainResult:
    """Track ``features`` from ``prev`` to ``nxt`` estimating one shared gain.

    Per pyramid level this minimizes
    ``sum_f sum_window (g * I_prev(x) - I_next(x + d_f))^2``.
    """
    origins = np.asarray(features, dtype=np.float64).reshape(-1, 2)
    if prev_pyr is None:
        prev_pyr = build_pyramid(prev, config.pyramid_levels, config.klt_window)
    if next_pyr is None:
        next_pyr = build_pyramid(nxt, config.pyramid_levels, config.klt_window)
    if len(origins) == 0:
        return FramePairGainResult(1.0, origins, origins.copy(), np.zeros(0, bool))
    guess = origins if guess is None else np.asarray(guess, float).reshape(-1, 2)
    positions, status, gain = _track_levels(prev_pyr, next_pyr, origins, guess, float(gain_init), config)
    if not status.any():
        gain = 1.0
    return FramePairGainResult(float(gain), origins, positions, status)


def forward_backward_filter(prev, nxt, result: FramePairGainResult, config: TrackerConfig,
                            prev_pyr=None, next_pyr=None) -> FramePairGainResult:
    """Track survivors back from ``nxt``; drop those landing farther than fb_threshold."""
    idx = result.tracked()
    fb = np.full(len(result.status), np.inf)
    if idx.size == 0 or math.isinf(config.fb_threshold):
        if idx.size:
            fb[idx] = 0.0
        return FramePairGainResult(result.gain, result.origins, result.positions, result.status.copy(), fb)
    back = track_pair_gain_klt(nxt, prev, result.positions[idx], config, next_pyr, prev_pyr,
                               gain_init=1.0 / result.gain, guess=result.origins[idx])
    err = np.linalg.norm(back.positions - result.origins[idx], axis=1)
    err[~back.status] = np.inf
    fb[idx] = err
    status = result.status.copy()
    status[idx] = err <= config.fb_threshold
    positions = result.positions.copy()
    positions[~status] = np.nan
    return FramePairGainResult(result.gain, result.origins, positions, status, fb)


# -- patches -----------------------------------------------------------------------------

def patch_offsets(patch_size: int) -> np.ndarray:
    """(P, 2) integer x, y offsets of patch pixels in row-major order."""
    half = patch_size // 2
    oy, ox = np.mgrid[-half:half + 1, -half:half + 1]
    return np.stack([ox.ravel(), oy.ravel()], axis=1).astype(np.float64)


def _bilinear_many(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx = x - x0
    fy = y - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    return top + fy * (bot - top)


def extract_patches(image, locations, patch_size: int):
    """Bilinear patches around each location.

    Returns ``(intensities (n, P), grad_sq (n, P), saturated (n,), valid (n,))``.
    Gradients are central differences on the interpolated grid.  A patch is
    valid when the location lies at least ``patch_size // 2 + 1`` pixels from
    the border; it is saturated when any raw pixel under it is 0 or 255.
    """
    raw = image.image if isinstance(image, Frame) else np.asarray(image)
    img = raw.astype(np.float64)
    h, w = img.shape
    loc = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    n = len(loc)
    half = patch_size // 2
    m = half + 1
    P = patch_size * patch_size
    valid = ((loc[:, 0] >= m) & (loc[:, 1] >= m) & (loc[:, 0] <= w - 1 - m) & (loc[:, 1] <= h - 1 - m))
    valid &= np.all(np.isfinite(loc), axis=1)
    inten = np.full((n, P), np.nan)
    grad = np.full((n, P), np.nan)
    sat = np.zeros(n, dtype=bool)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return inten, grad, sat, valid
    g = patch_size + 2
    oy, ox = np.mgrid[-m:m + 1, -m:m + 1]
    xs = loc[idx, 0:1] + ox.ravel()[None, :]
    ys = loc[idx, 1:2] + oy.ravel()[None, :]
    samples = _bilinear_many(img, xs, ys).reshape(-1, g, g)
    inner = samples[:, 1:-1, 1:-1]
    gx = 0.5 * (samples[:, 1:-1, 2:] - samples[:, 1:-1, :-2])
    gy = 0.5 * (samples[:, 2:, 1:-1] - samples[:, :-2, 1:-1])
    inten[idx] = inner.reshape(-1, P)
    grad[idx] = (gx * gx + gy * gy).reshape(-1, P)
    # raw support of the inner patch: pixels floor(x - half) .. floor(x + half) + 1
    s = patch_size + 1
    sy, sx = np.mgrid[0:s, 0:s]
    bx = np.floor(loc[idx, 0] - half).astype(np.int64)[:, None] + sx.ravel()[None, :]
    by = np.floor(loc[idx, 1] - half).astype(np.int64)[:, None] + sy.ravel()[None, :]
    support = raw[np.clip(by, 0, h - 1), np.clip(bx, 0, w - 1)]
    sat[idx] = np.any((support == 0) | (support == 255), axis=1)
    return inten, grad, sat, valid


def extract_patch(image, location, patch_size: int):
    """Single-location wrapper; returns None when the patch would leave the image."""
    inten, grad, _, valid = extract_patches(image, [location], patch_size)
    if not valid[0]:
        return None
    return inten[0], grad[0]


# -- sequence tracking ---------------------------------------------------------------------

@dataclass
class FeatureTracker:
    """Stateful tracker: feed frames in order, get observations per frame."""

    config: TrackerConfig = field(default_factory=TrackerConfig)
    next_id: int = 0
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    last_gain: float = 1.0
    _prev_pyr: list | None = None
    _prev_image: np.ndarray | None = None

    def active_count(self) -> int:
        return len(self.ids)

    def _enforce_spacing(self) -> None:
        # older features (lower id) win when two tracks come too close
        if len(self.ids) < 2:
            return
        pairs = cKDTree(self.positions).query_pairs(self.config.patch_size - 1e-9, output_type="ndarray")
        if len(pairs) == 0:
            return
        keep = np.ones(len(self.ids), dtype=bool)
        # visit conflicting pairs oldest-first so survivors are decided greedily by age
        older = np.where(self.ids[pairs[:, 0]] < self.ids[pairs[:, 1]], pairs[:, 0], pairs[:, 1])
        younger = np.where(older == pairs[:, 0], pairs[:, 1], pairs[:, 0])
        for i in np.argsort(self.ids[older], kind="stable"):
            if keep[older[i]]:
                keep[younger[i]] = False
        self.ids = self.ids[keep]
        self.positions = self.positions[keep]

    def rebase(self, track_image) -> None:
        """Replace the previous frame's tracking image (after the compensation changed)."""
        if self._prev_image is None:
            return
        img = np.asarray(track_image, float)
        self._prev_pyr = build_pyramid(img, self.config.pyramid_levels, self.config.klt_window)
        self._prev_image = img

    def process(self, frame: Frame, track_image=None) -> list[tuple[int, Observation]]:
        """Track into ``frame`` and return its observations.

        ``track_image`` (float, same shape) replaces the raw frame for tracking
        and corner extraction, e.g. a photometrically compensated copy;
        patches are always sampled from the raw frame.
        """
        cfg = self.config
        img = frame.image if track_image is None else np.asarray(track_image, float)
        pyr = build_pyramid(img, cfg.pyramid_levels, cfg.klt_window)
        if self._prev_pyr is not None and len(self.ids):
            res = track_pair_gain_klt(self._prev_image, img, self.positions, cfg, self._prev_pyr, pyr)
            res = forward_backward_filter(self._prev_image, img, res, cfg, self._prev_pyr, pyr)
            self.last_gain = res.gain
            keep = res.status
            self.ids = self.ids[keep]
            self.positions = res.positions[keep]
            self._enforce_spacing()
        new = extract_corners(img, self.positions, cfg)
        if len(new):
            new_ids = np.arange(self.next_id, self.next_id + len(new), dtype=np.int64)
            self.next_id += len(new)
            self.ids = np.concatenate([self.ids, new_ids])
            self.positions = np.concatenate([self.positions, new])
        self._prev_pyr = pyr
        self._prev_image = img

        inten, grad, sat, valid = extract_patches(frame.image, self.positions, cfg.patch_size)
        out = []
        for k in np.flatnonzero(valid):
            obs = Observation(frame.index, (float(self.positions[k, 0]), float(self.positions[k, 1])),
                              inten[k], grad[k], bool(sat[k]))
            out.append((int(self.ids[k]), obs))
        return out


def build_track_database(frames: list[Frame], config: TrackerConfig | None = None,
                         compensate=None) -> TrackDatabase:
    """Track a whole sequence.  ``compensate(frame) -> float image`` optionally
    supplies the images used for tracking (see ``FeatureTracker.process``)."""
    config = config or TrackerConfig()
    if not frames:
        raise ValueError("no frames to track")
    tracker = FeatureTracker(config)
    db = TrackDatabase(frames[0].width, frames[0].height, config.patch_size)
    for frame in frames:
        timg = None if compensate is None else compensate(frame)
        for pid, obs in tracker.process(frame, timg):
            db.add_observation(pid, obs)
        db.frame_indices.append(frame.index)
    # single-frame points carry no correspondence information
    db.points = {pid: p for pid, p in db.points.items() if len(p.observations) >= 2}
    log.info("tracked %d frames, %d points, %d observations", len(frames), len(db), db.n_observations())
    return db
