"""Parametric photometric maps: camera response and radial vignetting.

The response is a linear combination of a sampled mean curve and four
basis curves (EMoR-style), evaluated by cubic Hermite interpolation on a
1024 point grid.  Node tangents are central differences of the samples, so
the interpolant is C1 and stays linear in the coefficients.  Both models carry an ``gamma`` exponent so that the
exponential ambiguity of the image formation model can be represented
exactly:

    f~(x) = f(x ** (1 / gamma)),   V~(x) = V(x) ** gamma
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .core import CalibrationState

SAMPLE_COUNT = 1024
N_COEFFS = 4
ANCHOR_INPUT = 0.5
ANCHOR_OUTPUT = 127.5


class NonMonotoneResponseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ResponseBasis:
    f0: np.ndarray
    h: np.ndarray
    source: str = "analytic-fallback"

    def __post_init__(self):
        f0 = np.asarray(self.f0, dtype=np.float64)
        h = np.asarray(self.h, dtype=np.float64)
        if f0.shape != (SAMPLE_COUNT,):
            raise ValueError(f"f0 must have {SAMPLE_COUNT} samples, got {f0.shape}")
        if h.shape != (N_COEFFS, SAMPLE_COUNT):
            raise ValueError(f"basis must be {N_COEFFS}x{SAMPLE_COUNT}, got {h.shape}")
        f0.flags.writeable = False
        h.flags.writeable = False
        object.__setattr__(self, "f0", f0)
        object.__setattr__(self, "h", h)
        ht = _tangents(h)
        ht.flags.writeable = False
        object.__setattr__(self, "h_tangent", ht)

    @property
    def sample_count(self) -> int:
        return SAMPLE_COUNT

    @property
    def grid(self) -> np.ndarray:
        return _GRID


_GRID = np.linspace(0.0, 1.0, SAMPLE_COUNT)
_GRID.flags.writeable = False


def _normalize_basis(f0: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Affine map f0 onto [0, 255]; strip the linear part from every h_k so
    # the endpoints stay pinned for any coefficient vector.
    f0 = np.asarray(f0, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    span = f0[-1] - f0[0]
    if not span > 0:
        raise ValueError("f0 must increase from its first to its last sample")
    scale = 255.0 / span
    f0n = (f0 - f0[0]) * scale
    f0n[0], f0n[-1] = 0.0, 255.0
    hn = h * scale
    hn = hn - (hn[:, :1] + (hn[:, -1:] - hn[:, :1]) * _GRID[None, :])
    hn[:, 0] = 0.0
    hn[:, -1] = 0.0
    return f0n, hn


def analytic_fallback_basis() -> ResponseBasis:
    """Linear mean response plus four smooth bumps x^k (1 - x), orthogonal on the grid."""
    x = _GRID
    raw = np.stack([x**k * (1.0 - x) for k in range(1, N_COEFFS + 1)])
    q, _ = np.linalg.qr(raw.T)
    h = q.T.copy()
    for k in range(N_COEFFS):
        # sign so each bump is mostly positive; unit RMS scaled to 64 levels
        if h[k].sum() < 0:
            h[k] = -h[k]
        h[k] *= 64.0 / np.sqrt(np.mean(h[k] ** 2))
    h[:, 0] = 0.0
    h[:, -1] = 0.0
    return ResponseBasis(f0=255.0 * x, h=h, source="analytic-fallback")


_CURVE_NAME = re.compile(r"^\s*(f0|h\((\d+)\)|[A-Za-z_][\w()]*)\s*=?\s*(.*)$")


def load_emor_basis(path: str | Path) -> ResponseBasis:
    """Read an EMoR text file: a curve-name line (``f0 =``, ``h(1)=`` ...) then samples.

    Curves other than f0 and h(1)..h(4) (such as the ``E`` grid or higher
    basis functions) are read and ignored.
    """
    path = Path(path)
    curves: dict[str, list[float]] = {}
    current: str | None = None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        try:
            values = [float(tok) for tok in stripped.replace(",", " ").split()]
        except ValueError:
            m = _CURVE_NAME.match(stripped)
            if m is None:
                raise ValueError(f"{path}:{lineno}: cannot parse line {line!r}") from None
            current = m.group(1).replace(" ", "")
            if current in curves:
                raise ValueError(f"{path}:{lineno}: duplicate curve {current!r}")
            curves[current] = []
            rest = m.group(3).strip()
            if rest:
                try:
                    curves[current].extend(float(tok) for tok in rest.replace(",", " ").split())
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad samples after {current!r}") from None
            continue
        if current is None:
            raise ValueError(f"{path}:{lineno}: samples before any curve name")
        curves[current].extend(values)

    needed = ["f0"] + [f"h({k})" for k in range(1, N_COEFFS + 1)]
    missing = [name for name in needed if name not in curves]
    if missing:
        raise ValueError(f"{path}: missing curves {', '.join(missing)}")
    for name in needed:
        if len(curves[name]) != SAMPLE_COUNT:
            raise ValueError(
                f"{path}: curve {name} has {len(curves[name])} samples, expected {SAMPLE_COUNT}"
            )
    f0 = np.array(curves["f0"])
    h = np.array([curves[f"h({k})"] for k in range(1, N_COEFFS + 1)])
    f0n, hn = _normalize_basis(f0, h)
    return ResponseBasis(f0=f0n, h=hn, source="emor-file")


def _tangents(y: np.ndarray) -> np.ndarray:
    # dy/dt per grid cell along the last axis, one-sided at the ends
    m = np.empty_like(y)
    m[..., 1:-1] = 0.5 * (y[..., 2:] - y[..., :-2])
    m[..., 0] = y[..., 1] - y[..., 0]
    m[..., -1] = y[..., -1] - y[..., -2]
    return m


def _hermite(y, m, idx, s):
    s2 = s * s
    s3 = s2 * s
    return ((2 * s3 - 3 * s2 + 1) * y[..., idx] + (s3 - 2 * s2 + s) * m[..., idx]
            + (3 * s2 - 2 * s3) * y[..., idx + 1] + (s3 - s2) * m[..., idx + 1])


def _hermite_dt(y, m, idx, s):
    s2 = s * s
    return ((6 * s2 - 6 * s) * (y[..., idx] - y[..., idx + 1]) + (3 * s2 - 4 * s + 1) * m[..., idx]
            + (3 * s2 - 2 * s) * m[..., idx + 1])


def _cell(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = u * (SAMPLE_COUNT - 1)
    idx = np.minimum(np.floor(t).astype(np.int64), SAMPLE_COUNT - 2)
    idx = np.maximum(idx, 0)
    return idx, t - idx


@dataclass(frozen=True, eq=False)
class ResponseModel:
    """Camera response ``f(x) = f0(u) + sum_k c_k h_k(u)`` with ``u = x ** (1/gamma)``."""

    coeffs: np.ndarray = field(default_factory=lambda: np.zeros(N_COEFFS))
    basis: ResponseBasis = field(default_factory=analytic_fallback_basis)
    gamma: float = 1.0

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64).reshape(N_COEFFS)
        if not np.all(np.isfinite(c)):
            raise ValueError(f"response coefficients must be finite, got {c}")
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)
        curve = self.basis.f0 + c @ self.basis.h
        curve.flags.writeable = False
        object.__setattr__(self, "_curve", curve)
        tangent = _tangents(curve)
        tangent.flags.writeable = False
        object.__setattr__(self, "_tangent", tangent)

    def with_coeffs(self, coeffs) -> ResponseModel:
        return replace(self, coeffs=np.asarray(coeffs, dtype=np.float64))

    @property
    def curve(self) -> np.ndarray:
        """Response sampled at the 1024 basis nodes (in the ``u`` domain)."""
        return self._curve

    def _u(self, x: np.ndarray) -> np.ndarray:
        if self.gamma == 1.0:
            return x
        return np.power(x, 1.0 / self.gamma)

    def evaluate_flagged(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate, clamping the input to [0, 1]; the mask marks clamped inputs."""
        x = np.asarray(x, dtype=np.float64)
        if np.any(np.isnan(x)):
            raise ValueError("response input contains NaN")
        clipped = (x < 0.0) | (x > 1.0)
        xc = np.clip(x, 0.0, 1.0)
        idx, frac = _cell(self._u(xc))
        out = _hermite(self._curve, self._tangent, idx, frac)
        out = np.where(xc == 0.0, 0.0, np.where(xc == 1.0, 255.0, out))
        return out, clipped

    def evaluate(self, x) -> np.ndarray:
        return self.evaluate_flagged(x)[0]

    __call__ = evaluate

    def derivative(self, x) -> np.ndarray:
        """df/dx; zero for inputs outside [0, 1] (saturated)."""
        x = np.asarray(x, dtype=np.float64)
        if np.any(np.isnan(x)):
            raise ValueError("response input contains NaN")
        inside = (x >= 0.0) & (x <= 1.0)
        xc = np.clip(x, 0.0, 1.0)
        u = self._u(xc)
        idx, frac = _cell(u)
        d = _hermite_dt(self._curve, self._tangent, idx, frac) * (SAMPLE_COUNT - 1)
        if self.gamma != 1.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                du = np.where(xc > 0, u / (self.gamma * xc), 0.0)
            d = d * du
        return np.where(inside, d, 0.0)

    def basis_values(self, x) -> np.ndarray:
        """h_k evaluated at x, shape (4, n): the partial derivatives of f wrt c."""
        x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
        idx, frac = _cell(self._u(x))
        return _hermite(self.basis.h, self.basis.h_tangent, idx, frac)

    def monotone_violation(self) -> int | None:
        """Index of the first grid interval where the interpolant may not increase, or None.

        Non-increasing samples are reported first.  Otherwise the node
        tangents must be positive and inside the Fritsch-Carlson region,
        which makes every cubic piece strictly increasing.
        """
        d = np.diff(self._curve)
        bad = np.flatnonzero(d <= 0.0)
        if bad.size:
            return int(bad[0])
        a = self._tangent[:-1] / d
        b = self._tangent[1:] / d
        bad = np.flatnonzero((a <= 0.0) | (b <= 0.0) | (a * a + b * b > 9.0))
        return int(bad[0]) if bad.size else None

    def is_monotone(self) -> bool:
        return self.monotone_violation() is None

    def lut(self) -> np.ndarray:
        """Forward table: f(k / 255) for k = 0..255."""
        return self.evaluate(np.arange(256) / 255.0)

    def invert(self, levels=None) -> np.ndarray:
        """Irradiance x with f(x) = level (default: all 256 output levels)."""
        bad = self.monotone_violation()
        if bad is not None:
            raise NonMonotoneResponseError(
                f"response not strictly increasing on grid interval "
                f"[{bad}, {bad + 1}] (u in [{_GRID[bad]:.6f}, {_GRID[bad + 1]:.6f}])"
            )
        if levels is None:
            levels = np.arange(256, dtype=np.float64)
        y = np.clip(np.asarray(levels, dtype=np.float64), self._curve[0], self._curve[-1])
        c, m = self._curve, self._tangent
        idx = np.clip(np.searchsorted(c, y, side="right") - 1, 0, SAMPLE_COUNT - 2)
        s = (y - c[idx]) / (c[idx + 1] - c[idx])
        for _ in range(8):
            # Newton on the cell cubic, which is monotone
            s = np.clip(s - (_hermite(c, m, idx, s) - y) / _hermite_dt(c, m, idx, s), 0.0, 1.0)
        u = (idx + s) / (SAMPLE_COUNT - 1)
        return u if self.gamma == 1.0 else np.power(u, self.gamma)


def response_invert(model: ResponseModel) -> np.ndarray:
    return model.invert()


@dataclass(frozen=True, eq=False)
class VignetteModel:
    """Radial attenuation ``(1 + v1 R^2 + v2 R^4 + v3 R^6) ** gamma``.

    R is the distance to the image center divided by ``r_norm``.  Pixel
    centers sit at integer coordinates, so the center of a W x H image is
    ((W-1)/2, (H-1)/2).
    """

    coeffs: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r_norm: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)
    gamma: float = 1.0

    def __post_init__(self):
        v = np.array(self.coeffs, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(v)):
            raise ValueError(f"vignette coefficients must be finite, got {v}")
        if not self.r_norm > 0:
            raise ValueError("r_norm must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        v.flags.writeable = False
        object.__setattr__(self, "coeffs", v)
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @classmethod
    def for_image(cls, width: int, height: int, coeffs=(0.0, 0.0, 0.0), gamma: float = 1.0):
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        return cls(coeffs=np.asarray(coeffs, float), r_norm=math.hypot(cx, cy), center=(cx, cy), gamma=gamma)

    def with_coeffs(self, coeffs) -> VignetteModel:
        return replace(self, coeffs=np.asarray(coeffs, dtype=np.float64))

    def radius_sq(self, x, y) -> np.ndarray:
        dx = (np.asarray(x, dtype=np.float64) - self.center[0]) / self.r_norm
        dy = (np.asarray(y, dtype=np.float64) - self.center[1]) / self.r_norm
        return dx * dx + dy * dy

    def polynomial_r2(self, r2) -> np.ndarray:
        v1, v2, v3 = self.coeffs
        r2 = np.asarray(r2, dtype=np.float64)
        return 1.0 + r2 * (v1 + r2 * (v2 + r2 * v3))

    def evaluate_r2(self, r2) -> np.ndarray:
        p = self.polynomial_r2(r2)
        if self.gamma == 1.0:
            return p
        return np.power(np.maximum(p, 0.0), self.gamma)

    def evaluate_r(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        return self.evaluate_r2(r * r)

    def evaluate(self, x, y) -> np.ndarray:
        return self.evaluate_r2(self.radius_sq(x, y))

    __call__ = evaluate

    def gradient_r2(self, r2) -> np.ndarray:
        """dV/dv for each coefficient, shape (3, n)."""
        r2 = np.asarray(r2, dtype=np.float64)
        terms = np.stack([r2, r2 * r2, r2 * r2 * r2])
        if self.gamma == 1.0:
            return terms
        p = np.maximum(self.polynomial_r2(r2), 1e-300)
        return terms * (self.gamma * np.power(p, self.gamma - 1.0))

    def min_value(self, samples: int = 256) -> float:
        return float(np.min(self.evaluate_r(np.linspace(0.0, 1.0, samples))))

    def image(self, width: int, height: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        return self.evaluate(xx, yy)


def vignette_eval(model: VignetteModel, x, y) -> np.ndarray:
    return model.evaluate(x, y)


def forward_model(response: ResponseModel, vignette: VignetteModel, exposure, radiance, x, y):
    """Image formation ``O = f(e V(x) L)``; returns (intensity, saturated mask).

    Saturated means the accumulated irradiance falls outside (0, 1).
    """
    acc = np.asarray(exposure, float) * vignette.evaluate(x, y) * np.asarray(radiance, float)
    out, _ = response.evaluate_flagged(acc)
    saturated = (acc <= 0.0) | (acc >= 1.0)
    return out, saturated


def apply_gamma_ambiguity(state: CalibrationState, gamma: float) -> CalibrationState:
    """Move ``state`` along the exponential ambiguity; every residual is unchanged."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if gamma == 1.0:
        return state
    return replace(
        state,
        response=replace(state.response, gamma=state.response.gamma * gamma),
        vignette=replace(state.vignette, gamma=state.vignette.gamma * gamma),
        exposures=np.power(state.exposures, gamma),
        radiances=np.power(state.radiances, gamma),
    )


def anchor_gamma(response: ResponseModel) -> float:
    """Exponent that makes the transformed response pass through (0.5, 127.5)."""
    if not response.is_monotone():
        raise NonMonotoneResponseError("cannot anchor a non-monotone response")
    x_star = float(response.invert([ANCHOR_OUTPUT])[0])
    if not 0.0 < x_star < 1.0:
        raise ValueError(f"response does not reach {ANCHOR_OUTPUT} inside (0, 1)")
    return math.log(ANCHOR_INPUT) / math.log(x_star)


def fix_gamma(state: CalibrationState) -> tuple[ResponseModel, float]:
    gamma = anchor_gamma(state.response)
    return replace(state.response, gamma=state.response.gamma * gamma), gamma
