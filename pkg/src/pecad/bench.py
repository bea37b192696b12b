"""Config-driven multi-seed benchmark runner.

An experiment is a grid of (arm × seed) cells over one synthetic corpus.
Each cell trains and evaluates one configuration and writes its metrics to
``cells/<arm>/<seed>/``.  Cells are content-addressed: a cell whose stored
key matches the current configuration is reused instead of retrained, so
reruns are free and two runs of the same config produce bit-identical
summary tables.  Exam arms additionally share trained image backbones and
extracted feature sequences through a content-addressed ``stages/`` cache.

Configs are plain TOML or JSON tables; unknown keys are rejected with the
offending path so typos cannot silently change an experiment.
"""

from __future__ import annotations

import dataclasses
import json
import os
import shutil
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

try:  # tomllib landed in the 3.11 stdlib; tomli is the same parser for 3.10
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import __version__
from .data import ExamLabels, SynthConfig, SynthExam, synth_generate_with_truth
from .errors import ConfigError, PecadError
from .exam_level import (
    CCHeadConfig,
    FeatureSequence,
    MILConfig,
    balanced_val_split,
    build_cc_head,
    build_mil_head,
    evaluate_exam_level,
    predict_exam,
    train_exam_classifier,
    write_exam_predictions,
)
from .fileio import atomic_write_json, atomic_write_text
from .image_level import (
    TrainConfig,
    evaluate_image_level,
    extract_exam_features,
    lesion_size_image_sets,
    load_exam_features,
    pe_image_sets,
    save_exam_features,
    train_image_classifier,
)
from .metrics import aggregate_runs, ttest_from_summary
from .models import (
    BackboneConfig,
    ModelHandle,
    ViTConfig,
    build_backbone,
    build_vit,
    config_fingerprint,
)
from .preprocess import PreprocConfig, preprocess_exam

__all__ = [
    "ArmSpec",
    "ComparisonSpec",
    "DataSpec",
    "ExperimentConfig",
    "PretrainSpec",
    "build_head_config",
    "build_model_config",
    "build_synth_config",
    "build_train_config",
    "generate_split",
    "load_config_table",
    "load_experiment_config",
    "parse_experiment_config",
    "run_experiment",
]

_LABEL_CHARS = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-")


# --------------------------------------------------------------------------
# Configuration model.


@dataclass(frozen=True)
class DataSpec:
    """Synthetic corpus plus the seeded train/test split drawn from it."""

    synth: SynthConfig
    seed: int = 0
    n_test: int = 30
    out_size: int = 32


@dataclass(frozen=True)
class PretrainSpec:
    """Warm-start settings: train on the lesion-size source task first."""

    epochs: int
    source_exams: int = 0  # 0 means "same count as the main corpus"
    lr: float = 1e-3
    batch_size: int = 32

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"pretrain epochs must be >= 1, got {self.epochs}")
        if self.source_exams < 0:
            raise ConfigError(f"source_exams must be >= 0, got {self.source_exams}")


@dataclass(frozen=True)
class ComparisonSpec:
    """A planned two-sample t-test between two arms on one metric."""

    label: str
    metric: str
    arm_a: str
    arm_b: str
    tails: int = 1


@dataclass(frozen=True)
class ArmSpec:
    """One experimental configuration, run once per seed."""

    label: str
    kind: str  # "image" or "exam"
    model: BackboneConfig | ViTConfig
    train: TrainConfig
    pretrain: PretrainSpec | None = None
    head: CCHeadConfig | MILConfig | None = None
    image_train: TrainConfig | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    """A named grid of arms × seeds over one synthetic corpus."""

    name: str
    seeds: tuple[int, ...]
    data: DataSpec
    arms: tuple[ArmSpec, ...]
    comparisons: tuple[ComparisonSpec, ...] = ()
    out_dir: str | None = None


# --------------------------------------------------------------------------
# Strict table parsing.


def _reject_unknown(table: Mapping, allowed: set[str], path: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError(f"unknown key {prefix}{unknown[0]}")


def _require_table(value, path: str) -> dict:
    if not isinstance(value, Mapping):
        raise ConfigError(f"{path} must be a table, got {type(value).__name__}")
    return dict(value)


def _as_tuple_fields(table: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in table.items()}


_SYNTH_FIELDS = {f.name for f in dataclasses.fields(SynthConfig)}


def build_synth_config(table: Mapping, path: str = "synth") -> SynthConfig:
    """Build generator settings from a plain table, rejecting unknown keys."""
    table = _require_table(table, path)
    _reject_unknown(table, _SYNTH_FIELDS, path)
    try:
        return SynthConfig(**_as_tuple_fields(table))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


_DATA_EXTRA = {"seed", "n_test", "out_size"}


def _build_data(table: Mapping, path: str = "data") -> DataSpec:
    table = _require_table(table, path)
    extra = {k: table.pop(k) for k in list(table) if k in _DATA_EXTRA}
    for key, value in extra.items():
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path}.{key} must be an integer, got {value!r}")
    synth = build_synth_config(table, path)
    spec = DataSpec(synth=synth, **extra)
    if not 0 < spec.n_test < synth.n_exams:
        raise ConfigError(
            f"{path}.n_test must be strictly between 0 and n_exams={synth.n_exams}, "
            f"got {spec.n_test}"
        )
    if spec.out_size < 32:
        raise ConfigError(f"{path}.out_size must be >= 32, got {spec.out_size}")
    return spec


_TRAIN_KEYS = {"epochs", "lr", "batch_size", "patience", "val_fraction"}


def build_train_config(table: Mapping, path: str = "train") -> TrainConfig:
    """Build training settings from a plain table; seeds are set per cell."""
    table = _require_table(table, path)
    if "seed" in table:
        raise ConfigError(f"{path}.seed is set per cell by the runner; remove it")
    if "init" in table:
        raise ConfigError(f"{path}.init is managed by the runner; use 'pretrain'")
    _reject_unknown(table, _TRAIN_KEYS, path)
    if "epochs" not in table:
        raise ConfigError(f"{path}.epochs is required")
    try:
        return TrainConfig(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


_BACKBONE_KEYS = {"family", "scale", "with_se", "se_ratio"}
_VIT_KEYS = {"patch_size", "dim", "depth", "heads", "mlp_ratio"}


def build_model_config(
    table: Mapping, out_size: int, path: str = "model"
) -> BackboneConfig | ViTConfig:
    """Build a backbone or patch-transformer config from a plain table.

    The table is a transformer when it says ``type = "vit"`` or carries a
    ``patch_size``; its working resolution is inherited from the data spec.
    """
    table = _require_table(table, path)
    kind = table.pop("type", None)
    if kind == "vit" or (kind is None and "patch_size" in table):
        _reject_unknown(table, _VIT_KEYS, path)
        if "patch_size" not in table:
            raise ConfigError(f"{path}.patch_size is required for transformer models")
        try:
            return ViTConfig(image_size=out_size, **table)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if kind in (None, "backbone"):
        _reject_unknown(table, _BACKBONE_KEYS, path)
        if "family" not in table:
            raise ConfigError(f"{path}.family is required")
        try:
            return BackboneConfig(**table)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raise ConfigError(f"{path}.type must be 'backbone' or 'vit', got {kind!r}")


_CC_KEYS = {"resample_k", "hidden"}
_MIL_KEYS = {"mode", "attention_hidden"}


def build_head_config(table: Mapping, path: str = "head") -> CCHeadConfig | MILConfig:
    """Build an exam-head config: sequence head ('cc') or bag head ('mil')."""
    table = _require_table(table, path)
    kind = table.pop("type", None)
    if kind == "cc":
        _reject_unknown(table, _CC_KEYS, path)
        try:
            return CCHeadConfig(**table)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if kind == "mil":
        _reject_unknown(table, _MIL_KEYS, path)
        try:
            return MILConfig(**table)
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raise ConfigError(f"{path}.type must be 'cc' or 'mil', got {kind!r}")


_PRETRAIN_KEYS = {"epochs", "source_exams", "lr", "batch_size"}


def _build_pretrain(table: Mapping, path: str) -> PretrainSpec:
    table = _require_table(table, path)
    _reject_unknown(table, _PRETRAIN_KEYS, path)
    if "epochs" not in table:
        raise ConfigError(f"{path}.epochs is required")
    try:
        return PretrainSpec(**table)
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _check_label(label, path: str) -> str:
    if not isinstance(label, str) or not label:
        raise ConfigError(f"{path} must be a non-empty string")
    if not set(label) <= _LABEL_CHARS:
        raise ConfigError(
            f"{path} must use only letters, digits, '.', '_' and '-', got {label!r}"
        )
    return label


_ARM_KEYS = {"label", "kind", "model", "train", "pretrain", "head", "image_train"}


def _build_arm(table: Mapping, out_size: int, index: int) -> ArmSpec:
    path = f"arms[{index}]"
    table = _require_table(table, path)
    _reject_unknown(table, _ARM_KEYS, path)
    for key in ("label", "kind", "model", "train"):
        if key not in table:
            raise ConfigError(f"{path}.{key} is required")
    label = _check_label(table["label"], f"{path}.label")
    kind = table["kind"]
    if kind not in ("image", "exam"):
        raise ConfigError(f"{path}.kind must be 'image' or 'exam', got {kind!r}")
    model = build_model_config(table["model"], out_size, f"{path}.model")
    train = build_train_config(table["train"], f"{path}.train")
    pretrain = head = image_train = None
    if "pretrain" in table:
        if kind != "image":
            raise ConfigError(f"{path}.pretrain is only supported for image arms")
        pretrain = _build_pretrain(table["pretrain"], f"{path}.pretrain")
    if kind == "exam":
        if "head" not in table or "image_train" not in table:
            raise ConfigError(f"{path}: exam arms require 'head' and 'image_train' tables")
        head = build_head_config(table["head"], f"{path}.head")
        image_train = build_train_config(table["image_train"], f"{path}.image_train")
    else:
        for key in ("head", "image_train"):
            if key in table:
                raise ConfigError(f"{path}.{key} only applies to exam arms")
    return ArmSpec(
        label=label,
        kind=kind,
        model=model,
        train=train,
        pretrain=pretrain,
        head=head,
        image_train=image_train,
    )


_COMPARISON_KEYS = {"label", "metric", "arm_a", "arm_b", "tails"}


def _build_comparison(table: Mapping, index: int, arm_labels: set[str]) -> ComparisonSpec:
    path = f"comparisons[{index}]"
    table = _require_table(table, path)
    _reject_unknown(table, _COMPARISON_KEYS, path)
    for key in ("label", "metric", "arm_a", "arm_b"):
        if key not in table:
            raise ConfigError(f"{path}.{key} is required")
    label = _check_label(table["label"], f"{path}.label")
    tails = table.get("tails", 1)
    if tails not in (1, 2):
        raise ConfigError(f"{path}.tails must be 1 or 2, got {tails!r}")
    for side in ("arm_a", "arm_b"):
        if table[side] not in arm_labels:
            raise ConfigError(f"{path}.{side} references unknown arm {table[side]!r}")
    return ComparisonSpec(
        label=label,
        metric=str(table["metric"]),
        arm_a=table["arm_a"],
        arm_b=table["arm_b"],
        tails=tails,
    )


_TOP_KEYS = {"name", "seeds", "data", "arms", "comparisons", "out_dir"}


def parse_experiment_config(raw: Mapping) -> ExperimentConfig:
    """Validate a plain config table into an ``ExperimentConfig``.

    Unknown keys anywhere in the table are rejected with their full path.
    """
    raw = _require_table(raw, "config")
    _reject_unknown(raw, _TOP_KEYS, "")
    for key in ("name", "seeds", "data", "arms"):
        if key not in raw:
            raise ConfigError(f"{key} is required")
    name = _check_label(raw["name"], "name")
    seeds = raw["seeds"]
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise ConfigError("seeds must be a non-empty list of integers")
    if not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be unique")
    data = _build_data(raw["data"])
    arm_tables = raw["arms"]
    if not isinstance(arm_tables, (list, tuple)) or not arm_tables:
        raise ConfigError("arms must be a non-empty list of tables")
    arms = tuple(_build_arm(t, data.out_size, i) for i, t in enumerate(arm_tables))
    labels = [a.label for a in arms]
    if len(set(labels)) != len(labels):
        dupes = sorted({l for l in labels if labels.count(l) > 1})
        raise ConfigError(f"duplicate arm label: {', '.join(dupes)}")
    comparison_tables = raw.get("comparisons", [])
    if not isinstance(comparison_tables, (list, tuple)):
        raise ConfigError("comparisons must be a list of tables")
    comparisons = tuple(
        _build_comparison(t, i, set(labels)) for i, t in enumerate(comparison_tables)
    )
    out_dir = raw.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string path")
    return ExperimentConfig(
        name=name,
        seeds=tuple(seeds),
        data=data,
        arms=arms,
        comparisons=comparisons,
        out_dir=out_dir,
    )


def load_config_table(path: Path | str) -> dict:
    """Read a TOML or JSON file into a plain dict, by file extension."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            table = json.loads(path.read_text())
        elif path.suffix == ".toml":
            table = tomllib.loads(path.read_text())
        else:
            raise ConfigError(f"config files must end in .toml or .json, got {path.name}")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(table, dict):
        raise ConfigError(f"{path} must contain a table/object at the top level")
    return table


def load_experiment_config(path: Path | str) -> ExperimentConfig:
    """Parse an experiment config from a TOML or JSON file."""
    return parse_experiment_config(load_config_table(path))


# --------------------------------------------------------------------------
# Canonical payloads: resolved-default dicts that round-trip through the
# parser.  They are the hashing substrate for cell/stage keys and the
# on-disk ``config.json`` the report step reads.


def _train_payload(cfg: TrainConfig) -> dict:
    return {
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "patience": cfg.patience,
        "val_fraction": cfg.val_fraction,
    }


def _model_payload(model: BackboneConfig | ViTConfig) -> dict:
    if isinstance(model, ViTConfig):
        return {
            "type": "vit",
            "patch_size": model.patch_size,
            "dim": model.dim,
            "depth": model.depth,
            "heads": model.heads,
            "mlp_ratio": model.mlp_ratio,
        }
    return {
        "type": "backbone",
        "family": model.family,
        "scale": model.scale,
        "with_se": model.with_se,
        "se_ratio": model.se_ratio,
    }


def _head_payload(head: CCHeadConfig | MILConfig) -> dict:
    if isinstance(head, CCHeadConfig):
        return {"type": "cc", "resample_k": head.resample_k, "hidden": head.hidden}
    return {"type": "mil", "mode": head.mode, "attention_hidden": head.attention_hidden}


def _data_payload(data: DataSpec) -> dict:
    payload = dataclasses.asdict(data.synth)
    payload.update(seed=data.seed, n_test=data.n_test, out_size=data.out_size)
    return payload


def _arm_payload(arm: ArmSpec) -> dict:
    payload = {
        "label": arm.label,
        "kind": arm.kind,
        "model": _model_payload(arm.model),
        "train": _train_payload(arm.train),
    }
    if arm.pretrain is not None:
        payload["pretrain"] = dataclasses.asdict(arm.pretrain)
    if arm.head is not None:
        payload["head"] = _head_payload(arm.head)
    if arm.image_train is not None:
        payload["image_train"] = _train_payload(arm.image_train)
    return payload


def config_payload(config: ExperimentConfig) -> dict:
    """The resolved config as a plain dict that reparses to an equal config."""
    payload = {
        "name": config.name,
        "seeds": list(config.seeds),
        "data": _data_payload(config.data),
        "arms": [_arm_payload(a) for a in config.arms],
    }
    if config.comparisons:
        payload["comparisons"] = [dataclasses.asdict(c) for c in config.comparisons]
    if config.out_dir is not None:
        payload["out_dir"] = config.out_dir
    return payload


def _cell_key(config: ExperimentConfig, arm: ArmSpec, seed: int) -> str:
    return config_fingerprint(
        "bench-cell",
        {
            "version": __version__,
            "data": _data_payload(config.data),
            "arm": _arm_payload(arm),
            "seed": seed,
        },
    )


def _stage_key(config: ExperimentConfig, arm: ArmSpec, seed: int) -> str:
    return config_fingerprint(
        "image-stage",
        {
            "version": __version__,
            "data": _data_payload(config.data),
            "model": _model_payload(arm.model),
            "train": _train_payload(arm.image_train),
            "seed": seed,
        },
    )


# --------------------------------------------------------------------------
# Cell execution.


def generate_split(data: DataSpec) -> tuple[list[SynthExam], list[SynthExam]]:
    """Regenerate the corpus and return its seeded (train, test) exam split.

    Uses the same permutation law as the on-disk manifest split: a seeded
    permutation over exams in sorted-id order, test = the first ``n_test``
    drawn indices in corpus order.
    """
    exams = synth_generate_with_truth(data.synth, data.seed)
    ordered = sorted(exams, key=lambda e: e.volume.exam_id)
    order = np.random.default_rng(data.seed).permutation(len(ordered))
    test_idx = set(order[: data.n_test].tolist())
    test = [ordered[i] for i in sorted(test_idx)]
    train = [ordered[i] for i in range(len(ordered)) if i not in test_idx]
    return train, test


def _build_model_handle(model: BackboneConfig | ViTConfig, seed: int) -> ModelHandle:
    if isinstance(model, ViTConfig):
        return build_vit(model, seed)
    return build_backbone(model, seed)


def _run_image_cell(
    config: ExperimentConfig, arm: ArmSpec, seed: int, cell_dir: Path
) -> dict:
    prep = PreprocConfig(out_size=config.data.out_size)
    train_exams, test_exams = generate_split(config.data)
    train_sets = pe_image_sets(train_exams, prep)
    test_sets = pe_image_sets(test_exams, prep)
    train_cfg = dataclasses.replace(arm.train, seed=seed)

    if arm.pretrain is not None:
        n_source = arm.pretrain.source_exams or config.data.synth.n_exams
        source_synth = dataclasses.replace(config.data.synth, n_exams=n_source)
        # A disjoint seed stream keeps the source corpus independent of the
        # target corpus while staying reproducible per cell.
        source_exams = synth_generate_with_truth(
            source_synth, config.data.seed + 50_000 + seed
        )
        source_sets = lesion_size_image_sets(source_exams, prep)
        source_model = _build_model_handle(arm.model, seed)
        source_cfg = TrainConfig(
            epochs=arm.pretrain.epochs,
            lr=arm.pretrain.lr,
            batch_size=arm.pretrain.batch_size,
            seed=seed,
        )
        pretrained_path = cell_dir / "pretrained.f64"
        train_image_classifier(
            source_sets, source_model, source_cfg, checkpoint_path=pretrained_path
        )
        train_cfg = dataclasses.replace(train_cfg, init=str(pretrained_path))

    model = _build_model_handle(arm.model, seed)
    model, _history = train_image_classifier(
        train_sets, model, train_cfg, checkpoint_path=cell_dir / "checkpoint.f64"
    )
    return {"image_auc": evaluate_image_level(model, test_sets)}


def _ensure_image_stage(
    config: ExperimentConfig, arm: ArmSpec, seed: int, stages_dir: Path
) -> Path:
    """Train the shared image backbone and extract features, or reuse them."""
    key = _stage_key(config, arm, seed)
    stage_dir = stages_dir / key[:16]
    meta_path = stage_dir / "stage.json"
    if meta_path.is_file():
        try:
            recorded = json.loads(meta_path.read_text())
        except (OSError, json.JSONDecodeError):
            recorded = None
        if recorded and recorded.get("key") == key:
            return stage_dir

    stages_dir.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=stages_dir, prefix=".building-"))
    try:
        prep = PreprocConfig(out_size=config.data.out_size)
        train_exams, test_exams = generate_split(config.data)
        train_sets = pe_image_sets(train_exams, prep)
        model = _build_model_handle(arm.model, seed)
        image_cfg = dataclasses.replace(arm.image_train, seed=seed)
        model, _history = train_image_classifier(
            train_sets, model, image_cfg, checkpoint_path=tmp / "image.f64"
        )
        labels: dict[str, list[int]] = {}
        for exam in train_exams + test_exams:
            prep_exam = preprocess_exam(exam.volume, prep)
            features = extract_exam_features(model, prep_exam.images)
            save_exam_features(features, exam.volume.exam_id, model.fingerprint, tmp)
            labels[exam.volume.exam_id] = exam.record.labels.to_array().tolist()
        meta = {
            "key": key,
            "train_ids": [e.volume.exam_id for e in train_exams],
            "test_ids": [e.volume.exam_id for e in test_exams],
            "labels": labels,
            "feature_dim": model.feature_dim,
            "model_fingerprint": model.fingerprint,
        }
        atomic_write_json(tmp / "stage.json", meta)
        try:
            os.replace(tmp, stage_dir)
        except OSError:
            # Another worker finished the same stage first; keep theirs.
            if not (stage_dir / "stage.json").is_file():
                raise
            shutil.rmtree(tmp, ignore_errors=True)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return stage_dir


def _load_stage_dataset(
    stage_dir: Path, exam_ids: list[str], labels: dict[str, list[int]]
) -> list[tuple[FeatureSequence, ExamLabels]]:
    dataset = []
    for exam_id in exam_ids:
        features, _meta = load_exam_features(stage_dir, exam_id)
        dataset.append(
            (
                FeatureSequence(exam_id, features.astype(np.float64)),
                ExamLabels.from_array(np.asarray(labels[exam_id])),
            )
        )
    return dataset


def _run_exam_cell(
    config: ExperimentConfig, arm: ArmSpec, seed: int, cell_dir: Path, stages_dir: Path
) -> dict:
    stage_dir = _ensure_image_stage(config, arm, seed, stages_dir)
    meta = json.loads((stage_dir / "stage.json").read_text())
    train_ds = _load_stage_dataset(stage_dir, meta["train_ids"], meta["labels"])
    test_ds = _load_stage_dataset(stage_dir, meta["test_ids"], meta["labels"])
    feature_dim = int(meta["feature_dim"])

    if isinstance(arm.head, CCHeadConfig):
        head = build_cc_head(arm.head, feature_dim, seed)
    else:
        head = build_mil_head(arm.head, feature_dim, seed)
    train_cfg = dataclasses.replace(arm.train, seed=seed)
    train_part, val_part = balanced_val_split(train_ds, train_cfg.val_fraction, seed)
    head, _history = train_exam_classifier(
        train_part,
        head,
        train_cfg,
        val_dataset=val_part,
        checkpoint_path=cell_dir / "head.f64",
    )
    with warnings.catch_warnings():
        # Small test splits leave some labels single-class; their AUC is
        # reported as absent rather than warned about per cell.
        warnings.simplefilter("ignore", RuntimeWarning)
        evaluation = evaluate_exam_level(head, test_ds)
    predictions = [predict_exam(head, seq) for seq, _ in test_ds]
    write_exam_predictions(predictions, cell_dir / "exam_preds.csv")
    metrics = {"exam_mean_auc": evaluation.mean_auc}
    for name in evaluation.defined_labels:
        metrics[f"auc_{name}"] = evaluation.per_label[name]
    return metrics


def _execute_cell(
    config: ExperimentConfig, arm_index: int, seed: int, out: str
) -> tuple[str, int, str, str | None]:
    """Run one (arm, seed) cell in isolation; never raises."""
    torch.set_num_threads(1)
    arm = config.arms[arm_index]
    out_path = Path(out)
    cell_dir = out_path / "cells" / arm.label / str(seed)
    if cell_dir.exists():
        shutil.rmtree(cell_dir)
    cell_dir.mkdir(parents=True)
    key = _cell_key(config, arm, seed)
    try:
        if arm.kind == "image":
            metrics = _run_image_cell(config, arm, seed, cell_dir)
        else:
            metrics = _run_exam_cell(config, arm, seed, cell_dir, out_path / "stages")
        atomic_write_json(cell_dir / "metrics.json", metrics)
        atomic_write_json(cell_dir / "cell.json", {"key": key, "status": "ok"})
        return arm.label, seed, "ok", None
    except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
        error = f"{type(exc).__name__}: {exc}"
        atomic_write_json(
            cell_dir / "cell.json", {"key": key, "status": "failed", "error": error}
        )
        return arm.label, seed, "failed", error


def _is_cached(cell_dir: Path, key: str) -> bool:
    try:
        recorded = json.loads((cell_dir / "cell.json").read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return (
        recorded.get("key") == key
        and recorded.get("status") == "ok"
        and (cell_dir / "metrics.json").is_file()
    )


# --------------------------------------------------------------------------
# The experiment driver.


def _write_summary(out: Path, config: ExperimentConfig, statuses: dict) -> dict:
    """Aggregate per-cell metrics into summary.csv; returns the aggregates."""
    aggregates: dict[tuple[str, str], object] = {}
    lines = ["arm,metric,mean,std,n"]
    for arm in config.arms:
        cells = []
        for seed in config.seeds:
            if statuses[f"{arm.label}/{seed}"]["status"] != "ok":
                continue
            metrics_path = out / "cells" / arm.label / str(seed) / "metrics.json"
            cells.append(json.loads(metrics_path.read_text()))
        if not cells:
            continue
        metric_names = sorted({name for cell in cells for name in cell})
        for metric in metric_names:
            values = [cell[metric] for cell in cells if metric in cell]
            agg = aggregate_runs(values, metric=metric)
            aggregates[(arm.label, metric)] = agg
            lines.append(
                f"{arm.label},{metric},{float(agg.mean)},{float(agg.std)},{agg.n}"
            )
    atomic_write_text(out / "summary.csv", "\n".join(lines) + "\n")
    return aggregates


def _write_comparisons(out: Path, config: ExperimentConfig, aggregates: dict) -> list[str]:
    """Run the planned t-tests; returns notes for comparisons not computable."""
    skipped: list[str] = []
    lines = ["label,metric,arm_a,arm_b,t,df,p,tails"]
    for comparison in config.comparisons:
        agg_a = aggregates.get((comparison.arm_a, comparison.metric))
        agg_b = aggregates.get((comparison.arm_b, comparison.metric))
        if agg_a is None or agg_b is None:
            skipped.append(
                f"{comparison.label}: no aggregate for metric {comparison.metric!r} "
                "on one or both arms"
            )
            continue
        try:
            result = ttest_from_summary(
                agg_a.mean, agg_a.std, agg_a.n,
                agg_b.mean, agg_b.std, agg_b.n,
                tails=comparison.tails,
            )
        except (PecadError, ValueError) as exc:
            skipped.append(f"{comparison.label}: {exc}")
            continue
        lines.append(
            f"{comparison.label},{comparison.metric},{comparison.arm_a},"
            f"{comparison.arm_b},{float(result.t)},{result.df},{float(result.p)},"
            f"{result.tails}"
        )
    atomic_write_text(out / "comparisons.csv", "\n".join(lines) + "\n")
    return skipped


def run_experiment(
    config: ExperimentConfig, out_dir: Path | str | None = None, jobs: int = 1
) -> Path:
    """Run every (arm × seed) cell, then aggregate and compare.

    Finished cells are reused when their stored content key matches the
    current configuration, so rerunning a completed experiment retrains
    nothing and rewrites identical tables.  A failing cell is recorded in
    the manifest and excluded from aggregation; it never stops other cells.
    Set ``jobs`` above 1 to run cells in separate processes.
    """
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    resolved = out_dir if out_dir is not None else config.out_dir
    if resolved is None:
        raise ConfigError("no output directory: pass out_dir or set it in the config")
    out = Path(resolved)
    out.mkdir(parents=True, exist_ok=True)
    payload = config_payload(config)
    atomic_write_json(out / "config.json", payload)
    started = datetime.now(timezone.utc).isoformat()

    statuses: dict[str, dict] = {}
    pending: list[tuple[int, int]] = []
    for arm_index, arm in enumerate(config.arms):
        for seed in config.seeds:
            cell_dir = out / "cells" / arm.label / str(seed)
            if _is_cached(cell_dir, _cell_key(config, arm, seed)):
                statuses[f"{arm.label}/{seed}"] = {"status": "ok", "cached": True}
            else:
                pending.append((arm_index, seed))

    if jobs == 1 or len(pending) <= 1:
        outcomes = [
            _execute_cell(config, arm_index, seed, str(out))
            for arm_index, seed in pending
        ]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_execute_cell, config, arm_index, seed, str(out))
                for arm_index, seed in pending
            ]
            outcomes = [f.result() for f in futures]
    for label, seed, status, error in outcomes:
        entry: dict = {"status": status, "cached": False}
        if error is not None:
            entry["error"] = error
        statuses[f"{label}/{seed}"] = entry

    aggregates = _write_summary(out, config, statuses)
    skipped = _write_comparisons(out, config, aggregates) if config.comparisons else []

    manifest = {
        "name": config.name,
        "config_hash": config_fingerprint("experiment", payload),
        "package_version": __version__,
        "versions": {
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "jobs": jobs,
        "cells": statuses,
    }
    if skipped:
        manifest["comparisons_skipped"] = skipped
    atomic_write_json(out / "manifest.json", manifest)
    return out
