"""Per-image classifier training, evaluation, and exam feature extraction.

Training is single-threaded and fully deterministic for a fixed configuration,
model seed, and data: shuffling comes from a dedicated seeded generator and
the kept weights are the ones with the best validation score.  Initialization
is either random (the builder's seed) or transfer from a checkpoint, which
copies every backbone parameter and freshly re-initializes the classification
head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import SynthExam
from .errors import ConfigError, CorruptVolumeError, DataError, IngestError
from .fileio import atomic_write_bytes, atomic_write_json
from .metrics import roc_auc
from .models import ModelHandle, load_checkpoint, save_checkpoint
from .preprocess import PreprocConfig, preprocess_exam

__all__ = [
    "ImageSet",
    "TrainConfig",
    "TrainHistory",
    "evaluate_image_level",
    "extract_exam_features",
    "initialize_from_checkpoint",
    "lesion_size_image_sets",
    "load_exam_features",
    "pe_image_sets",
    "predict_image_logits",
    "save_exam_features",
    "train_image_classifier",
]


@dataclass(frozen=True)
class ImageSet:
    """Preprocessed slices of one exam paired with per-slice binary labels."""

    exam_id: str
    images: np.ndarray  # (n_slices, 3, size, size) float32
    labels: np.ndarray  # (n_slices,) uint8 in {0, 1}

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be (n, 3, h, w), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one per-image training run.

    ``init`` is either ``"random"`` (keep the builder's initialization) or a
    checkpoint path used to warm-start the backbone.  Early stopping halts
    after ``patience`` epochs without a new best validation score.
    """

    epochs: int
    init: str = "random"
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    patience: int = 3
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass
class TrainHistory:
    """Per-epoch training loss and validation score, plus the best epoch."""

    train_loss: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_auc": self.val_auc,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
        }


def _as_module(model: ModelHandle | nn.Module) -> nn.Module:
    return model.module if isinstance(model, ModelHandle) else model


def pe_image_sets(exams: list[SynthExam], cfg: PreprocConfig) -> list[ImageSet]:
    """Preprocess exams and pair slices with their embolism labels."""
    sets = []
    for exam in exams:
        prep = preprocess_exam(exam.volume, cfg)
        sets.append(
            ImageSet(exam_id=prep.exam_id, images=prep.images, labels=exam.record.image_labels)
        )
    return sets


def lesion_size_image_sets(exams: list[SynthExam], cfg: PreprocConfig) -> list[ImageSet]:
    """Source-task labels: is the slice's total lesion footprint above median?

    The median is taken over slices that contain any lesion, so roughly half
    of the lesion-bearing slices are positive — a task related to, but
    distinct from, embolism presence, suitable for warm-start pretraining.
    """
    per_exam_areas = []
    for exam in exams:
        n = exam.volume.voxels.shape[0]
        areas = np.zeros(n, dtype=np.float64)
        for lesion in exam.truth.lesions:
            for i, (y0, y1, x0, x1) in lesion.slice_boxes.items():
                areas[i] += (y1 - y0) * (x1 - x0)
        per_exam_areas.append(areas)
    flat = np.concatenate(per_exam_areas) if per_exam_areas else np.zeros(0)
    positive = flat[flat > 0]
    if positive.size == 0:
        raise DataError("no lesions in the corpus; the size task is undefined")
    threshold = float(np.median(positive))
    sets = []
    for exam, areas in zip(exams, per_exam_areas):
        prep = preprocess_exam(exam.volume, cfg)
        labels = (areas > threshold).astype(np.uint8)
        sets.append(ImageSet(exam_id=prep.exam_id, images=prep.images, labels=labels))
    return sets


def initialize_from_checkpoint(model: ModelHandle, path: Path | str) -> None:
    """Warm-start: copy all backbone parameters, re-initialize the head.

    The checkpoint must have been written for the same architecture
    (fingerprint check); the head is reset under the handle's seed so the
    warm start is still deterministic.
    """
    load_checkpoint(model, path)
    torch.manual_seed(model.seed)
    for layer in model.module.head.modules():
        if hasattr(layer, "reset_parameters"):
            layer.reset_parameters()


def predict_image_logits(
    model: ModelHandle | nn.Module, images: np.ndarray, batch_size: int = 64
) -> np.ndarray:
    """Per-slice logits in input order, computed in eval mode."""
    module = _as_module(model)
    module.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))
            chunks.append(module(x).numpy())
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)


def evaluate_image_level(model: ModelHandle | nn.Module, image_sets: list[ImageSet]) -> float:
    """AUC of per-slice logits against per-slice labels over all exams."""
    if not image_sets:
        raise DataError("no exams to evaluate")
    logits = np.concatenate([predict_image_logits(model, s.images) for s in image_sets])
    labels = np.concatenate([s.labels for s in image_sets])
    return roc_auc(logits, labels)


def _has_both_classes(sets: list[ImageSet]) -> bool:
    labels = np.concatenate([s.labels for s in sets])
    return bool((labels == 0).any() and (labels == 1).any())


def _split_train_val(
    image_sets: list[ImageSet], fraction: float, seed: int
) -> tuple[list[ImageSet], list[ImageSet]]:
    ordered = sorted(image_sets, key=lambda s: s.exam_id)
    n_val = max(1, round(fraction * len(ordered)))
    if n_val >= len(ordered):
        raise DataError(
            f"cannot hold out {n_val} of {len(ordered)} exams for validation; provide more exams"
        )
    perm = np.random.default_rng(seed).permutation(len(ordered))
    val = [ordered[i] for i in perm[:n_val]]
    train = [ordered[i] for i in perm[n_val:]]
    if not _has_both_classes(val):
        # A single-class holdout makes the validation score undefined; swap in
        # the first training exam (in permuted order) that restores both
        # classes.  Deterministic given the seed; if no swap can fix it the
        # evaluation error surfaces as usual.
        for j, candidate in enumerate(train):
            for k in range(len(val)):
                trial = list(val)
                trial[k] = candidate
                if _has_both_classes(trial):
                    train[j] = val[k]
                    val = trial
                    return train, val
    return train, val


def train_image_classifier(
    train_sets: list[ImageSet],
    model: ModelHandle,
    cfg: TrainConfig,
    *,
    val_sets: list[ImageSet] | None = None,
    checkpoint_path: Path | str | None = None,
) -> tuple[ModelHandle, TrainHistory]:
    """Train the per-image classifier; keep the best-validation weights.

    When ``val_sets`` is omitted, ``val_fraction`` of the training exams is
    held out (split by exam, seeded).  On return the handle carries the
    weights of the best validation epoch; if ``checkpoint_path`` is given
    they are also saved there with the history embedded in the sidecar.
    """
    if not train_sets:
        raise DataError("no training exams")
    if val_sets is None:
        train_sets, val_sets = _split_train_val(train_sets, cfg.val_fraction, cfg.seed)
    elif not val_sets:
        raise DataError("validation set is empty")

    torch.set_num_threads(1)
    module = model.module
    if cfg.init != "random":
        initialize_from_checkpoint(model, Path(cfg.init))

    images = np.concatenate([s.images for s in train_sets])
    labels = np.concatenate([s.labels for s in train_sets]).astype(np.float32)
    n = images.shape[0]

    optimizer = torch.optim.Adam(module.parameters(), lr=cfg.lr)
    loss_fn = nn.BCEWithLogitsLoss()
    shuffle_rng = np.random.default_rng(cfg.seed)

    history = TrainHistory()
    best_auc = -np.inf
    best_state: dict[str, torch.Tensor] = {}
    epochs_since_best = 0
    for _ in range(cfg.epochs):
        module.train()
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            x = torch.from_numpy(np.ascontiguousarray(images[rows]))
            y = torch.from_numpy(labels[rows])
            optimizer.zero_grad()
            loss = loss_fn(module(x), y)
            loss.backward()
            optimizer.step()
            batch_losses.append(loss.item())
        history.train_loss.append(float(np.mean(batch_losses)))
        auc = evaluate_image_level(module, val_sets)
        history.val_auc.append(auc)
        if auc > best_auc:
            best_auc = auc
            history.best_epoch = len(history.val_auc) - 1
            best_state = {k: v.detach().clone() for k, v in module.state_dict().items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break

    module.load_state_dict(best_state)
    module.eval()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, history=history.to_dict())
    return model, history


def extract_exam_features(
    model: ModelHandle | nn.Module, images: np.ndarray, batch_size: int = 32
) -> np.ndarray:
    """Feature matrix with one row per slice (row i = features of image i)."""
    module = _as_module(model)
    module.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))
            chunks.append(module.features(x).numpy())
    if not chunks:
        raise DataError("exam has no slices")
    return np.concatenate(chunks).astype(np.float32, copy=False)


def save_exam_features(
    features: np.ndarray, exam_id: str, model_fingerprint: str, directory: Path | str
) -> Path:
    """Write ``feat_<exam_id>.f32`` (little-endian float32, row-major) + sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    features = np.ascontiguousarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    path = directory / f"feat_{exam_id}.f32"
    atomic_write_bytes(path, features.astype("<f4").tobytes())
    sidecar = {
        "exam_id": exam_id,
        "n_slices": int(features.shape[0]),
        "feature_dim": int(features.shape[1]),
        "model_fingerprint": model_fingerprint,
        "dtype": "<f4",
        "layout": "slice,feature",
    }
    atomic_write_json(directory / f"feat_{exam_id}.json", sidecar)
    return path


def load_exam_features(directory: Path | str, exam_id: str) -> tuple[np.ndarray, dict]:
    """Read a feature matrix written by :func:`save_exam_features`."""
    directory = Path(directory)
    path = directory / f"feat_{exam_id}.f32"
    sidecar_path = directory / f"feat_{exam_id}.json"
    if not path.is_file() or not sidecar_path.is_file():
        raise IngestError(f"feature file for exam {exam_id!r} not found in {directory}")
    try:
        meta = json.loads(sidecar_path.read_text())
        shape = (int(meta["n_slices"]), int(meta["feature_dim"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"malformed feature sidecar {sidecar_path}: {exc}") from exc
    blob = path.read_bytes()
    expected = shape[0] * shape[1] * 4
    if len(blob) != expected:
        raise CorruptVolumeError(
            f"feature file {path} holds {len(blob)} bytes, expected {expected}"
        )
    return np.frombuffer(blob, dtype="<f4").reshape(shape).copy(), meta
