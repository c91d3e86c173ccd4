"""Domain types, image sequence I/O and the calibration file format."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator

import numpy as np
from PIL import Image

if TYPE_CHECKING:
    from .models import ResponseModel, VignetteModel

IMAGE_SUFFIXES = (".pgm", ".png")


class SequenceError(ValueError):
    """Bad input images or metadata."""


class CalibrationFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    image: np.ndarray
    gt_exposure: float | None = None

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 2 or img.shape[0] == 0 or img.shape[1] == 0:
            raise ValueError(f"frame {self.index}: expected a non-empty 2-D image, got shape {img.shape}")
        if img.dtype != np.uint8:
            raise ValueError(f"frame {self.index}: expected uint8 pixels, got {img.dtype}")
        if self.gt_exposure is not None and not self.gt_exposure > 0:
            raise ValueError(f"frame {self.index}: exposure must be positive, got {self.gt_exposure}")
        object.__setattr__(self, "image", img)

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def intensities(self) -> np.ndarray:
        return self.image.reshape(-1)


@dataclass(eq=False)
class Observation:
    frame_index: int
    location: tuple[float, float]
    patch_intensities: np.ndarray
    patch_gradient_sq: np.ndarray
    saturated: bool = False


@dataclass(eq=False)
class ScenePoint:
    id: int
    observations: list[Observation] = field(default_factory=list)
    radiance: np.ndarray | None = None

    def frames(self) -> list[int]:
        return [o.frame_index for o in self.observations]


@dataclass(eq=False)
class TrackDatabase:
    """Scene points with their per-frame patch observations."""

    width: int
    height: int
    patch_size: int
    frame_indices: list[int] = field(default_factory=list)
    points: dict[int, ScenePoint] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self) -> Iterator[ScenePoint]:
        return iter(self.points.values())

    def add_observation(self, point_id: int, obs: Observation) -> None:
        point = self.points.get(point_id)
        if point is None:
            point = self.points[point_id] = ScenePoint(point_id)
        elif point.observations and point.observations[-1].frame_index >= obs.frame_index:
            raise ValueError(f"point {point_id}: observations must have increasing frame index")
        point.observations.append(obs)

    def n_observations(self) -> int:
        return sum(len(p.observations) for p in self.points.values())

    def slice(self, start: int, stop: int, min_observations: int = 2) -> TrackDatabase:
        """Observations with ``start <= frame_index < stop``; short tracks dropped."""
        out = TrackDatabase(
            self.width, self.height, self.patch_size,
            [f for f in self.frame_indices if start <= f < stop],
        )
        for pid, point in self.points.items():
            obs = [o for o in point.observations if start <= o.frame_index < stop]
            if len(obs) >= min_observations:
                out.points[pid] = ScenePoint(pid, obs)
        return out

    def write_debug_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["point_id", "frame", "x", "y", "status"])
            for point in self.points.values():
                for o in point.observations:
                    status = "saturated" if o.saturated else "tracked"
                    w.writerow([point.id, o.frame_index, f"{o.location[0]:.4f}", f"{o.location[1]:.4f}", status])


@dataclass(eq=False)
class CalibrationState:
    """Unknowns of the photometric energy for one block.

    ``radiances`` has one row per scene point (in database order) and one
    column per patch pixel.  ``exposures`` is aligned with ``frame_indices``.
    """

    response: ResponseModel
    vignette: VignetteModel
    exposures: np.ndarray
    radiances: np.ndarray
    frame_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.exposures = np.asarray(self.exposures, dtype=np.float64)
        self.radiances = np.asarray(self.radiances, dtype=np.float64)
        if np.any(self.exposures <= 0):
            raise ValueError("exposures must be strictly positive")
        if self.frame_indices and len(self.frame_indices) != len(self.exposures):
            raise ValueError("one exposure per frame required")


@dataclass(eq=False)
class CalibrationResult:
    """Exported calibration after the gamma ambiguity has been fixed.

    ``response_lut[k]`` is the output intensity for irradiance ``k/255``;
    ``inverse_lut[k]`` is the irradiance producing intensity ``k``.  The
    effective vignette is ``(1 + v1 R^2 + v2 R^4 + v3 R^6) ** gamma_applied``.
    """

    response_lut: np.ndarray
    inverse_lut: np.ndarray
    vignette_coeffs: np.ndarray
    exposures: np.ndarray
    gamma_applied: float = 1.0
    width: int = 0
    height: int = 0
    frame_indices: list[int] | None = None

    def __post_init__(self):
        self.response_lut = np.asarray(self.response_lut, dtype=np.float64)
        self.inverse_lut = np.asarray(self.inverse_lut, dtype=np.float64)
        self.vignette_coeffs = np.asarray(self.vignette_coeffs, dtype=np.float64).reshape(3)
        self.exposures = np.asarray(self.exposures, dtype=np.float64)
        if self.response_lut.shape != (256,) or self.inverse_lut.shape != (256,):
            raise ValueError("response and inverse tables need 256 entries")

    def validate(self) -> None:
        bad = np.flatnonzero(np.diff(self.response_lut) <= 0)
        if bad.size:
            k = int(bad[0])
            raise CalibrationFormatError(
                f"response LUT not strictly increasing at entries {k}->{k + 1} "
                f"({self.response_lut[k]!r} -> {self.response_lut[k + 1]!r})"
            )
        if np.any(np.diff(self.inverse_lut) < 0):
            raise CalibrationFormatError("inverse LUT must be non-decreasing")
        if np.any(self.exposures <= 0):
            raise CalibrationFormatError("exposures must be positive")
        if not self.gamma_applied > 0:
            raise CalibrationFormatError("gamma must be positive")

    def vignette_model(self) -> VignetteModel:
        from .models import VignetteModel

        return VignetteModel.for_image(self.width, self.height, self.vignette_coeffs, gamma=self.gamma_applied)

    def vignette_r(self, r) -> np.ndarray:
        r2 = np.asarray(r, dtype=np.float64) ** 2
        v1, v2, v3 = self.vignette_coeffs
        p = 1.0 + r2 * (v1 + r2 * (v2 + r2 * v3))
        return np.power(np.maximum(p, 0.0), self.gamma_applied)

    def response(self, x) -> np.ndarray:
        return np.interp(np.asarray(x, dtype=np.float64), np.arange(256) / 255.0, self.response_lut)

    def inverse(self, levels) -> np.ndarray:
        return np.interp(np.asarray(levels, dtype=np.float64), np.arange(256.0), self.inverse_lut)

    def with_size(self, width: int, height: int) -> CalibrationResult:
        """Same calibration bound to an image size (the vignette center depends on it)."""
        if (self.width, self.height) == (width, height):
            return self
        if self.width and self.height:
            raise ValueError(f"calibration is for {self.width}x{self.height}, frame is {width}x{height}")
        return replace(self, width=width, height=height)

    @classmethod
    def identity(cls, width: int, height: int, n_frames: int = 0) -> CalibrationResult:
        k = np.arange(256, dtype=np.float64)
        return cls(k.copy(), k / 255.0, np.zeros(3), np.ones(n_frames), 1.0, width, height)


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode == "1":
                raise SequenceError(f"{path.name}: 1-bit images are not supported")
            if mode != "L":
                raise SequenceError(f"{path.name}: expected 8-bit grayscale, got mode {mode!r}")
            return np.array(im, dtype=np.uint8)
    except SequenceError:
        raise
    except (OSError, ValueError) as exc:
        raise SequenceError(f"{path.name}: unreadable image ({exc})") from exc


def read_times_file(path: str | Path) -> dict[int, float]:
    """Parse ``id timestamp exposure_ms`` lines into {id: exposure}."""
    out: dict[int, float] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 3:
            raise SequenceError(f"times file line {lineno}: expected 'id timestamp exposure', got {line!r}")
        try:
            idx = int(parts[0])
            exposure = float(parts[2])
        except ValueError:
            raise SequenceError(f"times file line {lineno}: cannot parse {line!r}") from None
        if not exposure > 0 or not math.isfinite(exposure):
            raise SequenceError(f"times file line {lineno} (id {idx}): exposure must be positive, got {parts[2]}")
        if idx in out:
            raise SequenceError(f"times file line {lineno}: duplicate id {idx}")
        out[idx] = exposure
    return out


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise SequenceError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def load_sequence(directory: str | Path, times_file: str | Path | None = None) -> list[Frame]:
    """Load 8-bit grayscale PGM/PNG frames in filename order.

    With a times file, filename stems must be the integer ids listed in it;
    frames are then ordered and indexed by id and carry ``gt_exposure``.
    """
    paths = list_images(directory)
    if not paths:
        raise SequenceError(f"{directory}: no PGM/PNG images found")
    if times_file is None:
        return [Frame(i, _read_image(p)) for i, p in enumerate(paths)]

    times = read_times_file(times_file)
    by_id: dict[int, Path] = {}
    for p in paths:
        try:
            idx = int(p.stem)
        except ValueError:
            raise SequenceError(f"{p.name}: filename is not an integer id, cannot match times file") from None
        by_id[idx] = p
    for idx in sorted(by_id):
        if idx not in times:
            raise SequenceError(f"{by_id[idx].name}: id {idx} has no entry in times file")
    for idx in sorted(times):
        if idx not in by_id:
            raise SequenceError(f"times file id {idx} has no matching image")
    return [Frame(idx, _read_image(by_id[idx]), times[idx]) for idx in sorted(by_id)]


def iter_sequence(directory: str | Path) -> Iterator[Frame]:
    for i, p in enumerate(list_images(directory)):
        yield Frame(i, _read_image(p))


# -- calibration file ------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_calibration(result: CalibrationResult, path: str | Path) -> None:
    result.validate()
    lines = ["# photometric calibration", "[meta]"]
    lines.append(f"width = {int(result.width)}")
    lines.append(f"height = {int(result.height)}")
    lines.append(f"gamma = {_fmt(result.gamma_applied)}")
    lines.append(f"frames = {len(result.exposures)}")
    if result.frame_indices is not None:
        lines.append("frame_indices = " + " ".join(str(int(i)) for i in result.frame_indices))
    lines.append("[response]")
    lines.append("# output intensity at irradiance k/255, k = 0..255")
    lines.extend(_fmt(v) for v in result.response_lut)
    lines.append("[inverse]")
    lines.append("# irradiance producing output intensity k, k = 0..255")
    lines.extend(_fmt(v) for v in result.inverse_lut)
    lines.append("[vignette]")
    lines.append("# V = (1 + v1 R^2 + v2 R^4 + v3 R^6) ** gamma")
    lines.extend(_fmt(v) for v in result.vignette_coeffs)
    lines.append("[exposures]")
    lines.extend(_fmt(v) for v in result.exposures)
    Path(path).write_text("\n".join(lines) + "\n")


def read_calibration(path: str | Path) -> CalibrationResult:
    path = Path(path)
    sections: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current in sections:
                raise CalibrationFormatError(f"{path}:{lineno}: duplicate section [{current}]")
            sections[current] = []
            continue
        if current is None:
            raise CalibrationFormatError(f"{path}:{lineno}: content before first section")
        sections[current].append(line)

    for name in ("meta", "response", "vignette", "exposures"):
        if name not in sections:
            raise CalibrationFormatError(f"{path}: missing section [{name}]")

    meta: dict[str, str] = {}
    for line in sections["meta"]:
        key, sep, value = line.partition("=")
        if not sep:
            raise CalibrationFormatError(f"{path}: bad meta line {line!r}")
        meta[key.strip()] = value.strip()

    def floats(name: str) -> np.ndarray:
        try:
            return np.array([float(v) for v in sections[name]], dtype=np.float64)
        except ValueError as exc:
            raise CalibrationFormatError(f"{path}: bad number in [{name}]: {exc}") from None

    lut = floats("response")
    if lut.shape != (256,):
        raise CalibrationFormatError(f"{path}: [response] needs 256 values, found {lut.size}")
    if "inverse" in sections:
        inv = floats("inverse")
        if inv.shape != (256,):
            raise CalibrationFormatError(f"{path}: [inverse] needs 256 values, found {inv.size}")
    else:
        inv = None
    vig = floats("vignette")
    if vig.shape != (3,):
        raise CalibrationFormatError(f"{path}: [vignette] needs 3 values, found {vig.size}")
    exposures = floats("exposures")
    try:
        width = int(meta.get("width", 0))
        height = int(meta.get("height", 0))
        gamma = float(meta.get("gamma", 1.0))
        frame_indices = [int(t) for t in meta["frame_indices"].split()] if "frame_indices" in meta else None
    except ValueError as exc:
        raise CalibrationFormatError(f"{path}: bad [meta] value: {exc}") from None
    if "frames" in meta and int(meta["frames"]) != len(exposures):
        raise CalibrationFormatError(f"{path}: meta says {meta['frames']} frames, found {len(exposures)} exposures")
    if frame_indices is not None and len(frame_indices) != len(exposures):
        raise CalibrationFormatError(f"{path}: frame_indices length does not match exposures")

    bad = np.flatnonzero(np.diff(lut) <= 0)
    if bad.size:
        k = int(bad[0])
        raise CalibrationFormatError(f"{path}: response LUT decreases at entry {k + 1} ({lut[k]} -> {lut[k + 1]})")
    if inv is None:
        inv = np.interp(np.arange(256.0), lut, np.arange(256) / 255.0)
    result = CalibrationResult(lut, inv, vig, exposures, gamma, width, height, frame_indices)
    result.validate()
    return result


def write_exposures_csv(path: str | Path, frame_indices: Iterable[int], exposures: Iterable[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "exposure"])
        for i, e in zip(frame_indices, exposures):
            w.writerow([int(i), _fmt(e)])


def read_exposures_csv(path: str | Path) -> tuple[list[int], np.ndarray]:
    idx, vals = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["frame_index", "exposure"]:
            raise CalibrationFormatError(f"{path}: expected header 'frame_index,exposure'")
        for row in reader:
            if not row:
                continue
            idx.append(int(row[0]))
            vals.append(float(row[1]))
    return idx, np.array(vals)
