"""Exam records, volume storage, dataset manifests, splits, and a synthetic
chest-CT generator.

An exam is a stack of axial Hounsfield-unit slices plus one binary flag per
slice (does this slice show an embolus?) and nine study-level labels covering
polarity, laterality, right-heart strain, and chronicity.  Volumes are stored
as raw little-endian int16 alongside a JSON header; datasets are described by
a two-column CSV manifest so splits and benchmark runs can reference exams
without copying them.

The generator paints desk-scale volumes with a soft-tissue body, two
low-attenuation lungs, a contrast-filled heart, and optional hyperdense
emboli.  Every study label corresponds to a visible image property (lesion
presence and x-position, heart size, lesion intensity band, banding
artifacts), so each of the nine labels is learnable from pixels alone, and
ground-truth geometry is available for tests and demos.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    CorruptVolumeError,
    DegenerateConfigError,
    IngestError,
    LabelValidationError,
    SplitError,
)
from .fileio import atomic_write_bytes, atomic_write_text

__all__ = [
    "HU_MAX",
    "HU_MIN",
    "LABEL_NAMES",
    "DatasetManifest",
    "ExamLabels",
    "ExamRecord",
    "ExamTruth",
    "HuVolume",
    "LesionTruth",
    "SplitSpec",
    "SynthConfig",
    "SynthExam",
    "load_exam",
    "read_labels_csv",
    "save_dataset",
    "save_exam",
    "split_dataset",
    "synth_generate",
    "synth_generate_with_truth",
    "validate_labels",
    "write_labels_csv",
]

HU_MIN = -1024
HU_MAX = 3071

LABEL_NAMES: tuple[str, ...] = (
    "negative_exam_for_pe",
    "indeterminate",
    "leftsided_pe",
    "rightsided_pe",
    "central_pe",
    "rv_lv_ratio_gte_1",
    "rv_lv_ratio_lt_1",
    "chronic_pe",
    "acute_and_chronic_pe",
)

_EXAM_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


@dataclass(frozen=True)
class ExamLabels:
    """The nine binary study-level labels, in canonical column order."""

    negative_exam_for_pe: int = 0
    indeterminate: int = 0
    leftsided_pe: int = 0
    rightsided_pe: int = 0
    central_pe: int = 0
    rv_lv_ratio_gte_1: int = 0
    rv_lv_ratio_lt_1: int = 0
    chronic_pe: int = 0
    acute_and_chronic_pe: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if value not in (0, 1):
                raise LabelValidationError(f"label {f.name} must be 0 or 1, got {value!r}")
            object.__setattr__(self, f.name, int(value))

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in LABEL_NAMES], dtype=np.int64)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "ExamLabels":
        arr = np.asarray(values).ravel()
        if arr.shape != (len(LABEL_NAMES),):
            raise LabelValidationError(f"expected {len(LABEL_NAMES)} label values, got shape {arr.shape}")
        return cls(**{name: int(v) for name, v in zip(LABEL_NAMES, arr)})

    def to_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in LABEL_NAMES}

    @classmethod
    def from_dict(cls, mapping: Mapping[str, int]) -> "ExamLabels":
        missing = [name for name in LABEL_NAMES if name not in mapping]
        if missing:
            raise LabelValidationError(f"missing label columns: {', '.join(missing)}")
        return cls(**{name: int(mapping[name]) for name in LABEL_NAMES})


@dataclass
class HuVolume:
    """A stack of axial CT slices in Hounsfield units.

    Voxels are clamped to the representable CT domain [-1024, 3071] and held
    as int16 with shape (n_slices, height, width).
    """

    exam_id: str
    voxels: np.ndarray

    def __post_init__(self) -> None:
        if not _EXAM_ID_RE.match(self.exam_id or ""):
            raise ValueError(f"invalid exam id {self.exam_id!r}")
        arr = np.asarray(self.voxels)
        if arr.ndim != 3:
            raise ValueError(f"volume must be 3-D (slices, height, width), got shape {arr.shape}")
        n, h, w = arr.shape
        if n < 1 or h < 8 or w < 8:
            raise ValueError(f"volume too small: shape {arr.shape}, need n >= 1 and height, width >= 8")
        self.voxels = np.clip(arr, HU_MIN, HU_MAX).astype(np.int16)

    @property
    def n_slices(self) -> int:
        return int(self.voxels.shape[0])

    @property
    def height(self) -> int:
        return int(self.voxels.shape[1])

    @property
    def width(self) -> int:
        return int(self.voxels.shape[2])


@dataclass
class ExamRecord:
    """Study labels plus the per-slice embolus flags for one exam."""

    exam_id: str
    labels: ExamLabels
    image_labels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.image_labels)
        if arr.ndim != 1:
            raise ValueError(f"image_labels must be 1-D, got shape {arr.shape}")
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise ValueError("image_labels must contain only 0 and 1")
        self.image_labels = arr.astype(np.uint8)


def validate_labels(record: ExamRecord) -> list[str]:
    """Return the names of every labelling rule the record violates.

    Rules: the two right-heart ratio flags are mutually exclusive; the two
    chronicity flags are mutually exclusive; a negative exam carries no
    laterality flag.  An empty list means the labels are consistent.
    """
    labels = record.labels
    violations: list[str] = []
    if labels.rv_lv_ratio_gte_1 and labels.rv_lv_ratio_lt_1:
        violations.append("rv_lv_exclusive")
    if labels.chronic_pe and labels.acute_and_chronic_pe:
        violations.append("chronicity_exclusive")
    if labels.negative_exam_for_pe and (
        labels.leftsided_pe or labels.rightsided_pe or labels.central_pe
    ):
        violations.append("negative_excludes_laterality")
    return violations


# --------------------------------------------------------------------------
# Exam directory format: meta.json + volume.i16 (little-endian int16,
# slice-major).


def save_exam(volume: HuVolume, record: ExamRecord, directory: Path | str) -> None:
    """Write one exam to ``directory`` as meta.json + volume.i16.

    Validates before touching the filesystem: nothing is written for an
    inconsistent record.
    """
    if volume.exam_id != record.exam_id:
        raise ValueError(f"exam id mismatch: volume {volume.exam_id!r} vs record {record.exam_id!r}")
    if record.image_labels.shape[0] != volume.n_slices:
        raise ValueError(
            f"image_labels length {record.image_labels.shape[0]} != n_slices {volume.n_slices}"
        )
    violations = validate_labels(record)
    if violations:
        raise LabelValidationError(f"labels violate rules: {', '.join(violations)}")
    directory = Path(directory)
    meta = {
        "exam_id": record.exam_id,
        "n_slices": volume.n_slices,
        "height": volume.height,
        "width": volume.width,
        "dtype": "int16-le",
        "labels": record.labels.to_dict(),
        "image_labels": record.image_labels.tolist(),
    }
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_text(directory / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    atomic_write_bytes(directory / "volume.i16", volume.voxels.astype("<i2").tobytes())


def load_exam(directory: Path | str) -> tuple[HuVolume, ExamRecord]:
    """Read one exam directory back into memory.

    Raises ``IngestError`` for missing or malformed files,
    ``CorruptVolumeError`` when the voxel payload does not match the declared
    shape, and ``LabelValidationError`` (naming the rule) for inconsistent
    labels on disk.
    """
    directory = Path(directory)
    meta_path = directory / "meta.json"
    volume_path = directory / "volume.i16"
    if not directory.is_dir():
        raise IngestError(f"exam directory not found: {directory}")
    if not meta_path.is_file():
        raise IngestError(f"missing meta.json in {directory}")
    if not volume_path.is_file():
        raise IngestError(f"missing volume.i16 in {directory}")
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"unreadable meta.json in {directory}: {exc}") from exc
    try:
        exam_id = meta["exam_id"]
        n, h, w = int(meta["n_slices"]), int(meta["height"]), int(meta["width"])
        label_dict = meta["labels"]
        image_labels = np.asarray(meta["image_labels"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"malformed meta.json in {directory}: {exc}") from exc
    blob = volume_path.read_bytes()
    expected = n * h * w * 2
    if len(blob) != expected:
        raise CorruptVolumeError(
            f"volume.i16 in {directory} holds {len(blob)} bytes, expected {expected} for shape ({n}, {h}, {w})"
        )
    voxels = np.frombuffer(blob, dtype="<i2").reshape(n, h, w)
    labels = ExamLabels.from_dict(label_dict)
    if image_labels.shape[0] != n:
        raise IngestError(
            f"meta.json in {directory} lists {image_labels.shape[0]} image labels for {n} slices"
        )
    record = ExamRecord(exam_id=exam_id, labels=labels, image_labels=image_labels)
    violations = validate_labels(record)
    if violations:
        raise LabelValidationError(f"labels in {directory} violate rules: {', '.join(violations)}")
    return HuVolume(exam_id=exam_id, voxels=voxels), record


# --------------------------------------------------------------------------
# Manifests, label tables, and splits.


@dataclass
class DatasetManifest:
    """Ordered (exam_id, relative path) listing of a dataset."""

    entries: list[tuple[str, str]]
    base: Path | None = None

    def __post_init__(self) -> None:
        self.entries = [(str(e), str(p)) for e, p in self.entries]
        ids = [e for e, _ in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({e for e in ids if ids.count(e) > 1})
            raise ValueError(f"duplicate exam ids in manifest: {', '.join(dupes)}")

    def fingerprint(self) -> str:
        """Content hash of the (id, path) pairs, independent of row order."""
        digest = hashlib.sha256()
        for exam_id, path in sorted(self.entries):
            digest.update(f"{exam_id},{path}\n".encode("utf-8"))
        return digest.hexdigest()

    def exam_dir(self, exam_id: str) -> Path:
        mapping = dict(self.entries)
        if exam_id not in mapping:
            raise IngestError(f"exam {exam_id!r} not in manifest")
        path = Path(mapping[exam_id])
        return (self.base / path) if self.base is not None and not path.is_absolute() else path

    def save(self, path: Path | str) -> None:
        path = Path(path)
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["exam_id", "path"])
        for exam_id, rel in sorted(self.entries):
            writer.writerow([exam_id, rel])
        atomic_write_text(path, buffer.getvalue())

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise IngestError(f"manifest not found: {path}")
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        if not rows or rows[0] != ["exam_id", "path"]:
            raise IngestError(f"manifest {path} must start with header 'exam_id,path'")
        entries = [(r[0], r[1]) for r in rows[1:] if r]
        return cls(entries=entries, base=path.parent)


def write_labels_csv(
    rows: Mapping[str, ExamLabels] | Iterable[tuple[str, ExamLabels]],
    path: Path | str,
) -> None:
    """Write the study-label table: one row per exam, canonical column order."""
    items = sorted(rows.items() if isinstance(rows, Mapping) else rows)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["exam_id", *LABEL_NAMES])
    for exam_id, labels in items:
        writer.writerow([exam_id, *labels.to_array().tolist()])
    atomic_write_text(path, buffer.getvalue())


def read_labels_csv(path: Path | str) -> dict[str, ExamLabels]:
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"label table not found: {path}")
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != ["exam_id", *LABEL_NAMES]:
            raise IngestError(f"label table {path} has unexpected columns: {reader.fieldnames}")
        return {row["exam_id"]: ExamLabels.from_dict(row) for row in reader}


@dataclass(frozen=True)
class SplitSpec:
    """Seeded exam-level train/test split request."""

    seed: int
    n_test: int


def split_dataset(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest]:
    """Partition a manifest into disjoint train and test manifests.

    The permutation is drawn from the seed over exam ids in sorted order, so
    the split is independent of manifest row order.  Requires
    0 < n_test < number of exams.
    """
    entries = sorted(manifest.entries)
    if not 0 < spec.n_test < len(entries):
        raise SplitError(
            f"n_test must be strictly between 0 and {len(entries)}, got {spec.n_test}"
        )
    order = np.random.default_rng(spec.seed).permutation(len(entries))
    test_idx = set(order[: spec.n_test].tolist())
    test = [entries[i] for i in sorted(test_idx)]
    train = [entries[i] for i in range(len(entries)) if i not in test_idx]
    return (
        DatasetManifest(entries=train, base=manifest.base),
        DatasetManifest(entries=test, base=manifest.base),
    )


def save_dataset(
    exams: Iterable[tuple[HuVolume, ExamRecord]], root: Path | str
) -> DatasetManifest:
    """Write exams under ``root/exams/<id>/`` plus manifest and label table."""
    root = Path(root)
    entries: list[tuple[str, str]] = []
    labels: dict[str, ExamLabels] = {}
    for volume, record in exams:
        rel = f"exams/{volume.exam_id}"
        save_exam(volume, record, root / rel)
        entries.append((volume.exam_id, rel))
        labels[volume.exam_id] = record.labels
    manifest = DatasetManifest(entries=entries, base=root)
    manifest.save(root / "manifest.csv")
    write_labels_csv(labels, root / "exam_labels.csv")
    return manifest


# --------------------------------------------------------------------------
# Synthetic exam generator.


@dataclass(frozen=True)
class SynthConfig:
    """Geometry and label-rate parameters for the synthetic generator.

    Intensity ranges are in Hounsfield units.  The embolus intensity range
    must not lie entirely inside the lung range, otherwise lesions would be
    invisible and the generated task unlearnable.
    """

    n_exams: int = 100
    slices_per_exam_range: tuple[int, int] = (4, 8)
    image_size: int = 64
    lesion_probability: float = 0.6
    lesion_intensity_range: tuple[float, float] = (150.0, 300.0)
    lung_hu_range: tuple[float, float] = (-900.0, -750.0)
    body_hu_range: tuple[float, float] = (10.0, 60.0)
    noise_std: float = 25.0
    indeterminate_probability: float = 0.08
    rv_enlarged_probability: float = 0.5
    chronic_probability: float = 0.2
    acute_and_chronic_probability: float = 0.2


@dataclass
class LesionTruth:
    """Ground truth for one painted embolus."""

    center: tuple[float, float, float]  # (z, y, x)
    radii: tuple[float, float, float]
    intensity: float
    slice_boxes: dict[int, tuple[int, int, int, int]]  # slice -> (y0, y1, x0, x1), half-open


@dataclass
class ExamTruth:
    """Generator-side geometry for one exam, for tests and demos."""

    lung_box: tuple[int, int, int, int]  # union bounding box (y0, y1, x0, x1), half-open
    lung_span_x: tuple[float, float]
    zone: str | None  # 'left' | 'central' | 'right' for positive exams
    lesions: list[LesionTruth] = field(default_factory=list)


@dataclass
class SynthExam:
    volume: HuVolume
    record: ExamRecord
    truth: ExamTruth


def _validate_synth_config(cfg: SynthConfig) -> None:
    lo, hi = cfg.slices_per_exam_range
    problems = []
    if cfg.n_exams < 1:
        problems.append(f"n_exams must be >= 1, got {cfg.n_exams}")
    if lo < 1 or lo > hi:
        problems.append(f"slices_per_exam_range must satisfy 1 <= min <= max, got ({lo}, {hi})")
    if cfg.image_size < 32:
        problems.append(f"image_size must be >= 32, got {cfg.image_size}")
    for name in (
        "lesion_probability",
        "indeterminate_probability",
        "rv_enlarged_probability",
        "chronic_probability",
        "acute_and_chronic_probability",
    ):
        p = getattr(cfg, name)
        if not 0.0 <= p <= 1.0:
            problems.append(f"{name} must be in [0, 1], got {p}")
    if cfg.chronic_probability + cfg.acute_and_chronic_probability > 1.0:
        problems.append("chronic_probability + acute_and_chronic_probability must be <= 1")
    if cfg.noise_std < 0:
        problems.append(f"noise_std must be >= 0, got {cfg.noise_std}")
    for name in ("lesion_intensity_range", "lung_hu_range", "body_hu_range"):
        a, b = getattr(cfg, name)
        if a > b:
            problems.append(f"{name} must be (low, high), got ({a}, {b})")
    lung_lo, lung_hi = cfg.lung_hu_range
    les_lo, les_hi = cfg.lesion_intensity_range
    if lung_lo <= les_lo and les_hi <= lung_hi:
        problems.append(
            "lesion intensity range lies entirely inside the lung range; lesions would be invisible"
        )
    if problems:
        raise DegenerateConfigError("; ".join(problems))


def _ellipse_mask(
    yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, ay: float, ax: float
) -> np.ndarray:
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


def _sample_lesion_geometry(
    rng: np.random.Generator,
    n: int,
    size: int,
    zone: str,
    lungs: dict[str, tuple[float, float, float, float]],
    span: tuple[float, float],
) -> tuple[float, float, float, float, float, float]:
    """Sample (cz, cy, cx, rz, ry, rx) with the centroid inside the zone."""
    span_lo, span_hi = span
    width = span_hi - span_lo
    t1, t2 = span_lo + width / 3.0, span_lo + 2.0 * width / 3.0
    inset = 0.02 * width
    zone_range = {
        "left": (span_lo + inset, t1 - inset),
        "central": (t1 + inset, t2 - inset),
        "right": (t2 + inset, span_hi - inset),
    }[zone]
    if zone == "left":
        hosts = ["left"]
    elif zone == "right":
        hosts = ["right"]
    else:
        hosts = ["left", "right"]
        rng.shuffle(hosts)
    for host in hosts:
        lx, ly, alx, aly = lungs[host]
        x_lo = max(zone_range[0], lx - 0.8 * alx)
        x_hi = min(zone_range[1], lx + 0.8 * alx)
        if x_lo < x_hi:
            cx = rng.uniform(x_lo, x_hi)
            cy = rng.uniform(ly - 0.55 * aly, ly + 0.55 * aly)
            cz = rng.uniform(0.15 * (n - 1), 0.85 * (n - 1)) if n > 1 else 0.0
            rz = rng.uniform(0.9, 2.0)
            ry = rng.uniform(0.055, 0.095) * size
            rx = rng.uniform(0.055, 0.095) * size
            return cz, cy, cx, rz, ry, rx
    raise DegenerateConfigError(f"no lung region intersects the {zone} zone at image_size {size}")


def synth_generate_with_truth(cfg: SynthConfig, seed: int) -> list[SynthExam]:
    """Generate exams plus the ground-truth geometry used to label them."""
    _validate_synth_config(cfg)
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    scale = size - 1.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    prefix = format(seed % (2**32), "08x")

    body_axes = (0.38 * size, 0.46 * size)
    lungs = {
        "left": (0.30 * scale, 0.50 * scale, 0.14 * size, 0.24 * size),  # (cx, cy, ax, ay)
        "right": (0.70 * scale, 0.50 * scale, 0.14 * size, 0.24 * size),
    }
    span = (lungs["left"][0] - lungs["left"][2], lungs["right"][0] + lungs["right"][2])
    body_mask = _ellipse_mask(yy, xx, 0.50 * scale, 0.50 * scale, *body_axes)

    exams: list[SynthExam] = []
    for index in range(cfg.n_exams):
        exam_id = f"exam-{prefix}-{index:04d}"
        n = int(rng.integers(cfg.slices_per_exam_range[0], cfg.slices_per_exam_range[1] + 1))
        body_hu = rng.uniform(*cfg.body_hu_range)
        lung_hu = rng.uniform(*cfg.lung_hu_range)
        heart_hu = rng.uniform(90.0, 130.0)

        positive = rng.random() < cfg.lesion_probability
        zone: str | None = None
        rv_enlarged = False
        chronic = acute_and_chronic = 0
        indeterminate = 0
        if positive:
            zone = ("left", "central", "right")[int(rng.integers(3))]
            rv_enlarged = rng.random() < cfg.rv_enlarged_probability
            u = rng.random()
            if u < cfg.chronic_probability:
                chronic = 1
            elif u < cfg.chronic_probability + cfg.acute_and_chronic_probability:
                acute_and_chronic = 1
        else:
            indeterminate = int(rng.random() < cfg.indeterminate_probability)

        volume = np.full((n, size, size), -1000.0, dtype=np.float64)
        volume[:, body_mask] = body_hu

        # Lungs taper towards the first and last slices like real apices.
        cz_profile = (n - 1) / 2.0
        az_profile = 0.8 * n
        lung_union = np.zeros((size, size), dtype=bool)
        for i in range(n):
            s = math.sqrt(max(0.0, 1.0 - ((i - cz_profile) / az_profile) ** 2))
            for lx, ly, alx, aly in lungs.values():
                mask = _ellipse_mask(yy, xx, ly, lx, aly * s, alx * s)
                volume[i][mask] = lung_hu
                lung_union |= mask

        heart_factor = 1.45 if rv_enlarged else 1.0
        heart_mask = _ellipse_mask(
            yy, xx, 0.62 * scale, 0.50 * scale, 0.13 * size, 0.11 * size * heart_factor
        )
        volume[:, heart_mask] = heart_hu

        lesions: list[LesionTruth] = []
        if positive:
            les_lo, les_hi = cfg.lesion_intensity_range
            band = (les_hi - les_lo) / 3.0
            if chronic:
                bands = [(les_lo, les_lo + band)]
            elif acute_and_chronic:
                bands = [(les_lo, les_lo + band), (les_hi - band, les_hi)]
            else:
                bands = [(les_hi - band, les_hi)]
            for band_lo, band_hi in bands:
                intensity = rng.uniform(band_lo, band_hi)
                for _ in range(20):
                    cz, cy, cx, rz, ry, rx = _sample_lesion_geometry(rng, n, size, zone, lungs, span)
                    slice_boxes: dict[int, tuple[int, int, int, int]] = {}
                    for i in range(n):
                        dz = (i - cz) / rz
                        if dz * dz >= 1.0:
                            continue
                        s = math.sqrt(1.0 - dz * dz)
                        mask = _ellipse_mask(yy, xx, cy, cx, ry * s, rx * s)
                        if mask.any():
                            volume[i][mask] = intensity
                            slice_boxes[i] = _bbox(mask)
                    if slice_boxes:
                        lesions.append(
                            LesionTruth(
                                center=(cz, cy, cx),
                                radii=(rz, ry, rx),
                                intensity=intensity,
                                slice_boxes=slice_boxes,
                            )
                        )
                        break
                else:  # pragma: no cover - geometry guarantees a paintable blob
                    raise DegenerateConfigError("could not place a visible lesion")

        if indeterminate:
            # Banding artifact: the visual correlate of a non-diagnostic scan.
            stripes = 120.0 * np.sin(2.0 * np.pi * yy / 4.8)
            volume[:, body_mask] += stripes[body_mask]

        if cfg.noise_std > 0:
            volume += rng.normal(0.0, cfg.noise_std, size=volume.shape)

        voxels = np.clip(np.rint(volume), HU_MIN, HU_MAX).astype(np.int16)

        image_labels = np.zeros(n, dtype=np.uint8)
        for lesion in lesions:
            for i in lesion.slice_boxes:
                image_labels[i] = 1

        labels = ExamLabels(
            negative_exam_for_pe=int(not positive),
            indeterminate=indeterminate,
            leftsided_pe=int(zone == "left"),
            rightsided_pe=int(zone == "right"),
            central_pe=int(zone == "central"),
            rv_lv_ratio_gte_1=int(positive and rv_enlarged),
            rv_lv_ratio_lt_1=int(positive and not rv_enlarged),
            chronic_pe=chronic,
            acute_and_chronic_pe=acute_and_chronic,
        )
        record = ExamRecord(exam_id=exam_id, labels=labels, image_labels=image_labels)
        truth = ExamTruth(
            lung_box=_bbox(lung_union),
            lung_span_x=span,
            zone=zone,
            lesions=lesions,
        )
        exams.append(SynthExam(volume=HuVolume(exam_id=exam_id, voxels=voxels), record=record, truth=truth))
    return exams


def synth_generate(cfg: SynthConfig, seed: int) -> list[tuple[HuVolume, ExamRecord]]:
    """Generate ``cfg.n_exams`` synthetic exams; same seed, same bits."""
    return [(exam.volume, exam.record) for exam in synth_generate_with_truth(cfg, seed)]
