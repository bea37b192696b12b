"""Exam-level 9-label heads over frozen per-slice feature sequences.

Two head families share the feature input and the 9-logit output:

* Sequence head: linear resampling of the N×M sequence to a fixed K×M,
  a bidirectional GRU, concat(max, mean) pooling over time, and a fully
  connected layer.
* Bag head (multiple-instance): a permutation-invariant pooling operator —
  element-wise max (MP), tanh attention (AP), or their concatenation (AMP) —
  followed by a fully connected layer.

Pooling is also exposed as a pure numpy function so its algebraic properties
(permutation invariance, the attention simplex) can be checked independently
of the trainable modules.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import LABEL_NAMES, ExamLabels, SynthExam
from .errors import ConfigError, DataError, UndefinedAUCError
from .fileio import atomic_write_text
from .image_level import TrainConfig, TrainHistory, extract_exam_features
from .metrics import roc_auc
from .models import ModelHandle, config_fingerprint, load_checkpoint, save_checkpoint
from .preprocess import PreprocConfig, preprocess_exam

__all__ = [
    "CCHead",
    "CCHeadConfig",
    "ExamEvaluation",
    "ExamPrediction",
    "FeatureSequence",
    "MILConfig",
    "MILHead",
    "balanced_val_split",
    "build_cc_head",
    "build_feature_dataset",
    "build_mil_head",
    "cc_forward",
    "evaluate_exam_level",
    "mil_forward",
    "mil_pool",
    "predict_exam",
    "resample_to_k",
    "train_exam_classifier",
    "write_exam_predictions",
]

N_LABELS = len(LABEL_NAMES)
_MIL_MODES = ("MP", "AP", "AMP")


@dataclass(frozen=True)
class FeatureSequence:
    """One exam's per-slice features: row i describes slice i."""

    exam_id: str
    features: np.ndarray  # (n_slices, feature_dim)

    def __post_init__(self) -> None:
        arr = np.asarray(self.features)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError(f"features for exam {self.exam_id!r} contain non-finite values")


@dataclass(frozen=True)
class CCHeadConfig:
    """Sequence-head shape: resample length and GRU hidden size."""

    resample_k: int = 192
    hidden: int = 64

    def __post_init__(self) -> None:
        if self.resample_k < 2:
            raise ConfigError(f"resample_k must be >= 2, got {self.resample_k}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")


@dataclass(frozen=True, eq=False)
class MILConfig:
    """Bag-head shape: pooling mode and, for attention modes, its parameters.

    ``V`` (L×M) and ``w`` (L) are only consulted by the functional
    :func:`mil_pool`; the trainable :class:`MILHead` owns its own learned
    attention parameters.
    """

    mode: str
    attention_hidden: int = 64
    V: np.ndarray | None = None
    w: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.mode not in _MIL_MODES:
            raise ConfigError(f"mode must be one of {_MIL_MODES}, got {self.mode!r}")
        if self.attention_hidden < 1:
            raise ConfigError(f"attention_hidden must be >= 1, got {self.attention_hidden}")


def resample_to_k(features: np.ndarray, k: int) -> np.ndarray:
    """Linearly resample an N×M sequence to K×M along the slice axis.

    Output row j samples position j·(N−1)/(K−1); a single input row is
    replicated, N = K is the identity, and constant columns are preserved
    exactly (the interpolation uses the a + f·(b − a) form).
    """
    if k < 2:
        raise ConfigError(f"resample length must be >= 2, got {k}")
    rows = np.asarray(features, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError(f"expected a non-empty 2-D sequence, got shape {rows.shape}")
    n = rows.shape[0]
    if n == 1:
        return np.repeat(rows, k, axis=0)
    if n == k:
        return rows.copy()
    positions = np.arange(k) * (n - 1) / (k - 1)
    lo = np.floor(positions).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (positions - lo)[:, None]
    return rows[lo] + frac * (rows[hi] - rows[lo])


def mil_pool(features: np.ndarray, cfg: MILConfig) -> tuple[np.ndarray, np.ndarray | None]:
    """Permutation-invariant pooling of an N×M bag, in float64.

    MP: element-wise max over rows (length M).  AP: tanh attention,
    a = softmax(w^T tanh(V h)), pooled = sum a_k h_k (length M).  AMP:
    concatenation [MP ‖ AP] (length 2M).  Returns (pooled, attention) —
    attention is None for MP.
    """
    bag = np.asarray(features, dtype=np.float64)
    if bag.ndim != 2 or bag.shape[0] < 1:
        raise ValueError(f"expected a non-empty 2-D bag, got shape {bag.shape}")
    max_pooled = bag.max(axis=0)
    if cfg.mode == "MP":
        return max_pooled, None
    if cfg.V is None or cfg.w is None:
        raise ConfigError(f"{cfg.mode} pooling requires attention parameters V and w")
    V = np.asarray(cfg.V, dtype=np.float64)
    w = np.asarray(cfg.w, dtype=np.float64)
    if V.shape != (cfg.attention_hidden, bag.shape[1]) or w.shape != (cfg.attention_hidden,):
        raise ValueError(
            f"attention parameters must have shapes ({cfg.attention_hidden}, {bag.shape[1]}) "
            f"and ({cfg.attention_hidden},), got {V.shape} and {w.shape}"
        )
    scores = np.tanh(bag @ V.T) @ w
    scores = scores - scores.max()
    weights = np.exp(scores)
    attention = weights / weights.sum()
    attn_pooled = attention @ bag
    if cfg.mode == "AP":
        return attn_pooled, attention
    return np.concatenate([max_pooled, attn_pooled]), attention


class CCHead(nn.Module):
    """Resample → bidirectional GRU → concat(max, mean) over time → FC → 9."""

    def __init__(self, resample_k: int, feature_dim: int, hidden: int):
        super().__init__()
        self.resample_k = resample_k
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.gru = nn.GRU(
            input_size=feature_dim, hidden_size=hidden, batch_first=True, bidirectional=True
        )
        self.fc = nn.Linear(4 * hidden, N_LABELS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != self.resample_k or x.shape[2] != self.feature_dim:
            raise ValueError(
                f"expected (batch, {self.resample_k}, {self.feature_dim}) input, "
                f"got {tuple(x.shape)}"
            )
        states, _ = self.gru(x)  # (batch, K, 2h)
        pooled = torch.cat([states.max(dim=1).values, states.mean(dim=1)], dim=-1)
        return self.fc(pooled)

    def exam_logits(self, features: np.ndarray) -> tuple[np.ndarray, None]:
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ValueError(
                f"expected (n_slices, {self.feature_dim}) features, got {features.shape}"
            )
        resampled = resample_to_k(features, self.resample_k).astype(np.float32)
        self.eval()
        with torch.no_grad():
            logits = self(torch.from_numpy(resampled)[None])[0]
        return logits.numpy(), None


class MILHead(nn.Module):
    """Permutation-invariant pooling (MP/AP/AMP) → FC → 9 logits."""

    def __init__(self, mode: str, feature_dim: int, attention_hidden: int = 64):
        super().__init__()
        if mode not in _MIL_MODES:
            raise ConfigError(f"mode must be one of {_MIL_MODES}, got {mode!r}")
        if attention_hidden < 1:
            raise ConfigError(f"attention_hidden must be >= 1, got {attention_hidden}")
        self.mode = mode
        self.feature_dim = feature_dim
        self.attention_hidden = attention_hidden
        if mode != "MP":
            bound_v = 1.0 / feature_dim**0.5
            bound_w = 1.0 / attention_hidden**0.5
            self.attn_V = nn.Parameter(
                torch.empty(attention_hidden, feature_dim).uniform_(-bound_v, bound_v)
            )
            self.attn_w = nn.Parameter(torch.empty(attention_hidden).uniform_(-bound_w, bound_w))
        in_dim = 2 * feature_dim if mode == "AMP" else feature_dim
        self.fc = nn.Linear(in_dim, N_LABELS)

    def pool(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        max_pooled = x.max(dim=1).values
        if self.mode == "MP":
            return max_pooled, None
        scores = torch.tanh(x @ self.attn_V.T) @ self.attn_w  # (batch, N)
        attention = torch.softmax(scores, dim=1)
        attn_pooled = (attention.unsqueeze(-1) * x).sum(dim=1)
        if self.mode == "AP":
            return attn_pooled, attention
        return torch.cat([max_pooled, attn_pooled], dim=-1), attention

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        if x.ndim != 3 or x.shape[2] != self.feature_dim:
            raise ValueError(
                f"expected (batch, n_slices, {self.feature_dim}) input, got {tuple(x.shape)}"
            )
        pooled, attention = self.pool(x)
        return self.fc(pooled), attention

    def exam_logits(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        features = np.ascontiguousarray(features, dtype=np.float32)
        self.eval()
        with torch.no_grad():
            logits, attention = self(torch.from_numpy(features)[None])
        return logits[0].numpy(), None if attention is None else attention[0].numpy()


def build_cc_head(cfg: CCHeadConfig, feature_dim: int, seed: int) -> ModelHandle:
    """Construct a sequence head deterministically from a seed."""
    if feature_dim < 1:
        raise ConfigError(f"feature_dim must be >= 1, got {feature_dim}")
    torch.manual_seed(seed)
    module = CCHead(cfg.resample_k, feature_dim, cfg.hidden)
    fingerprint = config_fingerprint(
        "cc_head",
        {
            "resample_k": cfg.resample_k,
            "hidden": cfg.hidden,
            "feature_dim": feature_dim,
            "labels": N_LABELS,
        },
    )
    return ModelHandle(
        module=module,
        family="cc_head",
        config=cfg,
        fingerprint=fingerprint,
        feature_dim=feature_dim,
        seed=seed,
    )


def build_mil_head(cfg: MILConfig, feature_dim: int, seed: int) -> ModelHandle:
    """Construct a bag head deterministically from a seed."""
    if feature_dim < 1:
        raise ConfigError(f"feature_dim must be >= 1, got {feature_dim}")
    torch.manual_seed(seed)
    module = MILHead(cfg.mode, feature_dim, cfg.attention_hidden)
    fingerprint = config_fingerprint(
        "mil_head",
        {
            "mode": cfg.mode,
            "attention_hidden": cfg.attention_hidden,
            "feature_dim": feature_dim,
            "labels": N_LABELS,
        },
    )
    return ModelHandle(
        module=module,
        family="mil_head",
        config=cfg,
        fingerprint=fingerprint,
        feature_dim=feature_dim,
        seed=seed,
    )


def _as_head(model) -> object:
    head = model.module if isinstance(model, ModelHandle) else model
    if not hasattr(head, "exam_logits"):
        raise TypeError(f"{type(head).__name__} does not expose exam_logits")
    return head


def cc_forward(model: ModelHandle | CCHead, x: np.ndarray) -> np.ndarray:
    """9 logits for one already-resampled K×M matrix."""
    module = model.module if isinstance(model, ModelHandle) else model
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D K×M matrix, got shape {x.shape}")
    module.eval()
    with torch.no_grad():
        return module(torch.from_numpy(x)[None])[0].numpy()


def mil_forward(
    model: ModelHandle | MILHead, features: np.ndarray
) -> tuple[np.ndarray, np.ndarray | None]:
    """9 logits (+ attention for AP/AMP) for one N×M bag."""
    head = _as_head(model)
    return head.exam_logits(np.asarray(features))


@dataclass(frozen=True)
class ExamPrediction:
    """Nine per-label probabilities for one exam, plus optional attention."""

    exam_id: str
    probabilities: np.ndarray
    attention: np.ndarray | None = None

    def __post_init__(self) -> None:
        probs = np.asarray(self.probabilities, dtype=np.float64)
        if probs.shape != (N_LABELS,):
            raise ValueError(f"probabilities must have shape ({N_LABELS},), got {probs.shape}")
        if not ((probs > 0.0) & (probs < 1.0)).all():
            raise ValueError("probabilities must lie strictly inside (0, 1)")
        if self.attention is not None:
            attn = np.asarray(self.attention, dtype=np.float64)
            if attn.ndim != 1 or attn.size < 1:
                raise ValueError(f"attention must be a non-empty vector, got shape {attn.shape}")
            if attn.min() < 0.0 or abs(attn.sum() - 1.0) > 1e-6:
                raise ValueError("attention weights must be nonnegative and sum to 1")


def predict_exam(model: ModelHandle | CCHead | MILHead, sequence: FeatureSequence) -> ExamPrediction:
    """Sigmoid probabilities (and attention, where the head produces it)."""
    head = _as_head(model)
    logits, attention = head.exam_logits(sequence.features)
    probabilities = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    return ExamPrediction(sequence.exam_id, probabilities, attention)


def write_exam_predictions(predictions: list[ExamPrediction], path: Path | str) -> None:
    """Write ``exam_preds.csv``: exam_id, 9 label columns, optional attn_<i>."""
    max_attn = max(
        (p.attention.size for p in predictions if p.attention is not None), default=0
    )
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["exam_id", *LABEL_NAMES, *(f"attn_{i}" for i in range(max_attn))])
    for pred in predictions:
        row = [pred.exam_id] + [str(float(v)) for v in pred.probabilities]
        if max_attn:
            attn = [] if pred.attention is None else [str(float(v)) for v in pred.attention]
            row += attn + [""] * (max_attn - len(attn))
        writer.writerow(row)
    atomic_write_text(Path(path), buffer.getvalue())


@dataclass(frozen=True)
class ExamEvaluation:
    """Per-label AUCs (NaN where undefined) and their unweighted mean."""

    per_label: dict[str, float]
    mean_auc: float
    defined_labels: tuple[str, ...]


def evaluate_exam_level(
    model, dataset: list[tuple[FeatureSequence, ExamLabels]]
) -> ExamEvaluation:
    """Per-label AUC over exams; single-class labels warn and are excluded."""
    if not dataset:
        raise DataError("no exams to evaluate")
    head = _as_head(model)
    scores = np.stack([head.exam_logits(seq.features)[0] for seq, _ in dataset])
    labels = np.stack([lab.to_array() for _, lab in dataset])
    per_label: dict[str, float] = {}
    defined: list[str] = []
    values: list[float] = []
    for j, name in enumerate(LABEL_NAMES):
        column = labels[:, j]
        if column.min() == column.max():
            warnings.warn(
                f"label {name!r} has a single class in the evaluation set; "
                "its AUC is undefined and excluded from the mean",
                RuntimeWarning,
                stacklevel=2,
            )
            per_label[name] = float("nan")
            continue
        auc = roc_auc(scores[:, j], column)
        per_label[name] = auc
        defined.append(name)
        values.append(auc)
    if not values:
        raise UndefinedAUCError("every label is single-class in the evaluation set")
    return ExamEvaluation(per_label=per_label, mean_auc=float(np.mean(values)), defined_labels=tuple(defined))


def build_feature_dataset(
    exams: list[SynthExam], model: ModelHandle, prep_cfg: PreprocConfig
) -> list[tuple[FeatureSequence, ExamLabels]]:
    """Preprocess exams and extract one frozen feature sequence per exam."""
    dataset = []
    for exam in exams:
        prep = preprocess_exam(exam.volume, prep_cfg)
        features = extract_exam_features(model, prep.images)
        dataset.append((FeatureSequence(exam.volume.exam_id, features), exam.record.labels))
    return dataset


def _split_exam_dataset(dataset, fraction: float, seed: int):
    ordered = sorted(dataset, key=lambda pair: pair[0].exam_id)
    n_val = max(1, round(fraction * len(ordered)))
    if n_val >= len(ordered):
        raise DataError(
            f"cannot hold out {n_val} of {len(ordered)} exams for validation; provide more exams"
        )
    perm = np.random.default_rng(seed).permutation(len(ordered))
    return [ordered[i] for i in perm[n_val:]], [ordered[i] for i in perm[:n_val]]


def balanced_val_split(
    dataset: list[tuple[FeatureSequence, ExamLabels]],
    fraction: float,
    seed: int,
    *,
    min_val: int = 2,
) -> tuple[list, list]:
    """Seeded exam holdout that keeps the first label two-class when possible.

    Small validation draws can land entirely on one side of the leading
    (exam-negativity) label, which makes its AUC undefined.  When that
    happens and the corpus contains both values, the first training exam
    carrying the missing value is swapped into the validation slot.
    """
    train, val = _split_exam_dataset(dataset, fraction, seed)
    while len(val) < min(min_val, len(dataset) - 1):
        val.append(train.pop())
    if not train:
        raise DataError("cannot hold out every exam for validation; provide more exams")

    def first_label_values(pairs) -> set[int]:
        return {int(lab.to_array()[0]) for _, lab in pairs}

    seen_val = first_label_values(val)
    if len(seen_val) == 1 and len(first_label_values(dataset)) == 2:
        missing = ({0, 1} - seen_val).pop()
        for i, (_, lab) in enumerate(train):
            if int(lab.to_array()[0]) == missing:
                train[i], val[0] = val[0], train[i]
                break
    return train, val


def _validate_feature_dims(dataset) -> int:
    dims = {seq.features.shape[1] for seq, _ in dataset}
    if len(dims) != 1:
        raise DataError(f"mixed feature dimensions in dataset: {sorted(dims)}")
    return dims.pop()


def train_exam_classifier(
    dataset: list[tuple[FeatureSequence, ExamLabels]],
    model: ModelHandle,
    cfg: TrainConfig,
    *,
    val_dataset: list[tuple[FeatureSequence, ExamLabels]] | None = None,
    checkpoint_path: Path | str | None = None,
) -> tuple[ModelHandle, TrainHistory]:
    """Train an exam head; keep the weights at the best validation mean AUC.

    The loss is the unweighted mean binary cross-entropy over the 9 labels.
    Sequence heads are trained on pre-resampled K×M batches; bag heads see
    one variable-length exam at a time.  ``cfg.init`` may name a checkpoint
    of the same head architecture to warm-start from.
    """
    if not dataset:
        raise DataError("no training exams")
    feature_dim = _validate_feature_dims(dataset)
    module = model.module
    if feature_dim != getattr(module, "feature_dim", feature_dim):
        raise ValueError(
            f"dataset feature dim {feature_dim} does not match head input {module.feature_dim}"
        )
    if val_dataset is None:
        dataset, val_dataset = _split_exam_dataset(dataset, cfg.val_fraction, cfg.seed)
    elif not val_dataset:
        raise DataError("validation set is empty")

    torch.set_num_threads(1)
    if cfg.init != "random":
        load_checkpoint(model, Path(cfg.init))

    targets = torch.from_numpy(
        np.stack([lab.to_array() for _, lab in dataset]).astype(np.float32)
    )
    is_sequence_head = isinstance(module, CCHead)
    if is_sequence_head:
        stacked = np.stack(
            [resample_to_k(seq.features, module.resample_k) for seq, _ in dataset]
        ).astype(np.float32)
        inputs = torch.from_numpy(stacked)
    else:
        bags = [
            torch.from_numpy(np.ascontiguousarray(seq.features, dtype=np.float32))[None]
            for seq, _ in dataset
        ]

    optimizer = torch.optim.Adam(module.parameters(), lr=cfg.lr)
    loss_fn = nn.BCEWithLogitsLoss()
    shuffle_rng = np.random.default_rng(cfg.seed)

    def validation_mean_auc() -> float:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return evaluate_exam_level(module, val_dataset).mean_auc

    history = TrainHistory()
    best_auc = -np.inf
    best_state: dict[str, torch.Tensor] = {}
    epochs_since_best = 0
    n = len(dataset)
    for _ in range(cfg.epochs):
        module.train()
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            if is_sequence_head:
                logits = module(inputs[rows])
            else:
                logits = torch.cat([module(bags[i])[0] for i in rows])
            optimizer.zero_grad()
            loss = loss_fn(logits, targets[rows])
            loss.backward()
            optimizer.step()
            batch_losses.append(loss.item())
        history.train_loss.append(float(np.mean(batch_losses)))
        auc = validation_mean_auc()
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
