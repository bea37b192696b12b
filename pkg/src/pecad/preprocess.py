"""CT preprocessing: intensity windowing, lung localization, lung-focused
crop/resize, and three-slice channel stacks.

The window maps Hounsfield units to the unit interval by clipping to
[level - width/2, level + width/2] and scaling; the default setting centres
on contrast-enhanced vasculature.  Lung localization thresholds dark voxels,
discards components connected to the slice border (ambient air) and
components below a minimum area, and returns the padded union bounding box.
Each slice is cropped to that box, resampled bilinearly to a square, and
stacked with its two neighbours so the classifier sees local z-context.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import HuVolume
from .errors import ConfigError, CorruptVolumeError, IngestError, NoLungFoundError
from .fileio import atomic_write_bytes, atomic_write_json

__all__ = [
    "CropBox",
    "LungFinderConfig",
    "PreprocConfig",
    "PreprocessedExam",
    "WindowSpec",
    "apply_window",
    "crop_resize",
    "load_preprocessed",
    "localize_lungs",
    "make_triplet",
    "preprocess_exam",
    "save_preprocessed",
]


@dataclass(frozen=True)
class WindowSpec:
    """Intensity window: clip HU to [level - width/2, level + width/2]."""

    level: float = 100.0
    width: float = 700.0

    def __post_init__(self) -> None:
        if not self.width > 0:
            raise ConfigError(f"window width must be positive, got {self.width}")

    @property
    def low(self) -> float:
        return self.level - self.width / 2.0

    @property
    def high(self) -> float:
        return self.level + self.width / 2.0


def apply_window(voxels: HuVolume | np.ndarray, window: WindowSpec = WindowSpec()) -> np.ndarray:
    """Clip to the window and rescale to [0, 1] as float32.

    The mapping is exactly ``(clip(v, low, high) - low) / width`` computed in
    float64 and cast once to float32; shape is preserved.
    """
    arr = voxels.voxels if isinstance(voxels, HuVolume) else np.asarray(voxels)
    clipped = np.clip(arr.astype(np.float64), window.low, window.high)
    return ((clipped - window.low) / window.width).astype(np.float32)


@dataclass(frozen=True)
class CropBox:
    """Half-open pixel box (y0:y1, x0:x1) in slice coordinates."""

    y0: int
    y1: int
    x0: int
    x1: int

    def __post_init__(self) -> None:
        for name in ("y0", "y1", "x0", "x1"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.y0 < 0 or self.x0 < 0 or self.y1 <= self.y0 or self.x1 <= self.x0:
            raise ValueError(f"invalid crop box ({self.y0}, {self.y1}, {self.x0}, {self.x1})")

    @classmethod
    def full_frame(cls, height: int, width: int) -> "CropBox":
        return cls(y0=0, y1=height, x0=0, x1=width)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.y0, self.y1, self.x0, self.x1)


@dataclass(frozen=True)
class LungFinderConfig:
    """Thresholding parameters for lung localization."""

    threshold_hu: float = -320.0
    min_area_fraction: float = 0.005
    margin: int = 8

    def __post_init__(self) -> None:
        if not 0.0 <= self.min_area_fraction < 1.0:
            raise ConfigError(f"min_area_fraction must be in [0, 1), got {self.min_area_fraction}")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")


def _grow_to_minimum(lo: int, hi: int, minimum: int, limit: int) -> tuple[int, int]:
    target = min(minimum, limit)
    if hi - lo >= target:
        return lo, hi
    lo = max(0, lo - (target - (hi - lo)) // 2)
    hi = min(limit, lo + target)
    lo = max(0, hi - target)
    return lo, hi


def localize_lungs(volume: HuVolume, cfg: LungFinderConfig = LungFinderConfig()) -> CropBox:
    """Find the padded bounding box of the lung fields.

    Per slice, voxels below the threshold are grouped into connected
    components; components touching the slice border are ambient air and
    components smaller than the minimum area are noise, so both are dropped.
    The union of surviving components over all slices, expanded by ``margin``
    and clamped to the frame, is the crop box.  Raises ``NoLungFoundError``
    when no slice contributes a component.
    """
    voxels = volume.voxels
    n, h, w = voxels.shape
    min_pixels = cfg.min_area_fraction * h * w
    union = np.zeros((h, w), dtype=bool)
    found = False
    for i in range(n):
        mask = voxels[i] < cfg.threshold_hu
        if not mask.any():
            continue
        labeled, n_components = ndimage.label(mask)
        if n_components == 0:
            continue
        keep = np.ones(n_components + 1, dtype=bool)
        keep[0] = False
        border_labels = np.unique(
            np.concatenate([labeled[0], labeled[-1], labeled[:, 0], labeled[:, -1]])
        )
        keep[border_labels] = False
        counts = np.bincount(labeled.ravel(), minlength=n_components + 1)
        keep[counts < min_pixels] = False
        if keep.any():
            union |= keep[labeled]
            found = True
    if not found:
        raise NoLungFoundError(
            f"no lung-sized air component below {cfg.threshold_hu} HU in exam {volume.exam_id}"
        )
    ys, xs = np.nonzero(union)
    y0 = max(0, int(ys.min()) - cfg.margin)
    y1 = min(h, int(ys.max()) + 1 + cfg.margin)
    x0 = max(0, int(xs.min()) - cfg.margin)
    x1 = min(w, int(xs.max()) + 1 + cfg.margin)
    y0, y1 = _grow_to_minimum(y0, y1, 16, h)
    x0, x1 = _grow_to_minimum(x0, x1, 16, w)
    return CropBox(y0=y0, y1=y1, x0=x0, x1=x1)


def crop_resize(image: np.ndarray, box: CropBox, out_size: int) -> np.ndarray:
    """Crop ``image`` to ``box`` and resample to (out_size, out_size).

    Bilinear with pixel-center alignment: output pixel j samples source
    coordinate (j + 0.5) * in/out - 0.5, clamped to the valid range, and the
    four neighbours are combined in lerp form, so constant regions map to the
    same constant and a full-frame same-size call is the identity.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D slice, got shape {img.shape}")
    if out_size < 1:
        raise ValueError(f"out_size must be >= 1, got {out_size}")
    h, w = img.shape
    if box.y1 > h or box.x1 > w:
        raise ValueError(f"crop box {box.as_tuple()} does not fit image of shape {img.shape}")
    sub = img[box.y0 : box.y1, box.x0 : box.x1].astype(np.float64)
    in_h, in_w = sub.shape

    def sample_coords(n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coords = (np.arange(out_size, dtype=np.float64) + 0.5) * (n_in / out_size) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        low = np.floor(coords).astype(np.int64)
        high = np.minimum(low + 1, n_in - 1)
        return low, high, coords - low

    y_low, y_high, fy = sample_coords(in_h)
    x_low, x_high, fx = sample_coords(in_w)
    a = sub[y_low[:, None], x_low[None, :]]
    b = sub[y_low[:, None], x_high[None, :]]
    c = sub[y_high[:, None], x_low[None, :]]
    d = sub[y_high[:, None], x_high[None, :]]
    top = a + fx[None, :] * (b - a)
    bottom = c + fx[None, :] * (d - c)
    return (top + fy[:, None] * (bottom - top)).astype(np.float32)


def make_triplet(windowed: np.ndarray, index: int) -> np.ndarray:
    """Stack slice ``index`` with its two z-neighbours as channels.

    The first and last slices replicate themselves in place of the missing
    neighbour, so the output is always (3, H, W).
    """
    stack = np.asarray(windowed)
    if stack.ndim != 3:
        raise ValueError(f"expected a slice stack (N, H, W), got shape {stack.shape}")
    n = stack.shape[0]
    if not 0 <= index < n:
        raise ValueError(f"slice index {index} out of range for {n} slices")
    return np.stack([stack[max(index - 1, 0)], stack[index], stack[min(index + 1, n - 1)]])


@dataclass(frozen=True)
class PreprocConfig:
    """End-to-end preprocessing parameters."""

    window: WindowSpec = field(default_factory=WindowSpec)
    lung: LungFinderConfig = field(default_factory=LungFinderConfig)
    out_size: int = 576

    def __post_init__(self) -> None:
        if self.out_size < 32:
            raise ConfigError(f"out_size must be >= 32, got {self.out_size}")


@dataclass
class PreprocessedExam:
    """Windowed, lung-cropped, resized slice triplets for one exam."""

    exam_id: str
    images: np.ndarray  # (n_slices, 3, out_size, out_size) float32
    box: CropBox
    fallback_full_frame: bool
    window: WindowSpec


def preprocess_exam(volume: HuVolume, cfg: PreprocConfig = PreprocConfig()) -> PreprocessedExam:
    """Window, localize, crop/resize, and stack one exam.

    When no lung component is found the full frame is used instead and the
    result is flagged; a ``RuntimeWarning`` is emitted so batch jobs can log
    the exams that fell back.
    """
    windowed = apply_window(volume, cfg.window)
    try:
        box = localize_lungs(volume, cfg.lung)
        fallback = False
    except NoLungFoundError:
        box = CropBox.full_frame(volume.height, volume.width)
        fallback = True
        warnings.warn(
            f"no lung region found in exam {volume.exam_id}; cropping to full frame",
            RuntimeWarning,
            stacklevel=2,
        )
    resized = np.stack(
        [crop_resize(windowed[i], box, cfg.out_size) for i in range(volume.n_slices)]
    )
    images = np.stack([make_triplet(resized, i) for i in range(volume.n_slices)])
    return PreprocessedExam(
        exam_id=volume.exam_id,
        images=images,
        box=box,
        fallback_full_frame=fallback,
        window=cfg.window,
    )


def save_preprocessed(prep: PreprocessedExam, directory: Path | str) -> Path:
    """Write ``prep_<exam_id>.f32`` (little-endian float32) plus JSON sidecar."""
    directory = Path(directory)
    payload_path = directory / f"prep_{prep.exam_id}.f32"
    sidecar = {
        "exam_id": prep.exam_id,
        "n_slices": int(prep.images.shape[0]),
        "out_size": int(prep.images.shape[-1]),
        "layout": "slice,channel,y,x",
        "dtype": "float32-le",
        "window": {"level": prep.window.level, "width": prep.window.width},
        "box": list(prep.box.as_tuple()),
        "fallback_full_frame": bool(prep.fallback_full_frame),
    }
    atomic_write_bytes(payload_path, prep.images.astype("<f4").tobytes())
    atomic_write_json(directory / f"prep_{prep.exam_id}.json", sidecar)
    return payload_path


def load_preprocessed(directory: Path | str, exam_id: str) -> PreprocessedExam:
    directory = Path(directory)
    payload_path = directory / f"prep_{exam_id}.f32"
    sidecar_path = directory / f"prep_{exam_id}.json"
    if not payload_path.is_file() or not sidecar_path.is_file():
        raise IngestError(f"no preprocessed exam {exam_id!r} under {directory}")
    try:
        sidecar = json.loads(sidecar_path.read_text())
        n = int(sidecar["n_slices"])
        size = int(sidecar["out_size"])
        window = WindowSpec(**sidecar["window"])
        box = CropBox(*sidecar["box"])
        fallback = bool(sidecar["fallback_full_frame"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise IngestError(f"malformed sidecar for exam {exam_id!r}: {exc}") from exc
    blob = payload_path.read_bytes()
    expected = n * 3 * size * size * 4
    if len(blob) != expected:
        raise CorruptVolumeError(
            f"prep_{exam_id}.f32 holds {len(blob)} bytes, expected {expected} for ({n}, 3, {size}, {size})"
        )
    images = np.frombuffer(blob, dtype="<f4").reshape(n, 3, size, size)
    return PreprocessedExam(
        exam_id=exam_id,
        images=images,
        box=box,
        fallback_full_frame=fallback,
        window=window,
    )
