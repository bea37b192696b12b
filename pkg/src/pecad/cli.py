"""Command-line entry points for the synthetic PE pipeline.

Every subcommand shares ``--config``, ``--seed``, ``--jobs`` and ``--out``;
data locations are positional.  Exit codes: 0 on success, 2 for
configuration problems, 3 for unreadable or invalid data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .bench import (
    build_head_config,
    build_model_config,
    build_synth_config,
    build_train_config,
    load_config_table,
    load_experiment_config,
    run_experiment,
)
from .data import (
    DatasetManifest,
    ExamRecord,
    HuVolume,
    load_exam,
    read_labels_csv,
    save_dataset,
    synth_generate,
)
from .errors import ConfigError, DataError, IngestError
from .exam_level import (
    CCHeadConfig,
    FeatureSequence,
    balanced_val_split,
    build_cc_head,
    build_mil_head,
    predict_exam,
    train_exam_classifier,
    write_exam_predictions,
)
from .fileio import atomic_write_json
from .image_level import (
    ImageSet,
    load_exam_features,
    save_exam_features,
    extract_exam_features,
    train_image_classifier,
)
from .models import build_backbone, build_vit, load_checkpoint_model
from .models import BackboneConfig, ViTConfig
from .preprocess import PreprocConfig, preprocess_exam, save_preprocessed
from .report import report

__all__ = ["main"]


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"this command requires {flag}")
    return value


def _load_dataset(dataset_dir: str) -> list[tuple[HuVolume, ExamRecord]]:
    manifest = DatasetManifest.load(Path(dataset_dir) / "manifest.csv")
    return [load_exam(manifest.exam_dir(exam_id)) for exam_id, _ in manifest.entries]


def _prep_config(table: dict) -> PreprocConfig:
    return PreprocConfig(out_size=int(table.get("out_size", 32)))


def _build_model_handle(model_cfg, seed: int):
    if isinstance(model_cfg, ViTConfig):
        return build_vit(model_cfg, seed)
    return build_backbone(model_cfg, seed)


def _model_name(model_cfg) -> str:
    if isinstance(model_cfg, ViTConfig):
        return f"vit/p{model_cfg.patch_size}"
    return f"{model_cfg.family}/{model_cfg.scale}"


def _image_sets(pairs: list[tuple[HuVolume, ExamRecord]], prep_cfg: PreprocConfig):
    sets = []
    for volume, record in pairs:
        prep = preprocess_exam(volume, prep_cfg)
        sets.append(ImageSet(exam_id=prep.exam_id, images=prep.images, labels=record.image_labels))
    return sets


def _cmd_synth(args) -> int:
    table = load_config_table(_require(args.config, "--config"))
    cfg = build_synth_config(table, path="synth")
    out = Path(_require(args.out, "--out"))
    manifest = save_dataset(synth_generate(cfg, args.seed), out)
    print(f"wrote {len(manifest.entries)} exams to {out}")
    return 0


def _cmd_preprocess(args) -> int:
    table = load_config_table(args.config) if args.config else {}
    prep_cfg = _prep_config(table)
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    pairs = _load_dataset(args.dataset)
    for volume, _record in pairs:
        save_preprocessed(preprocess_exam(volume, prep_cfg), out)
    print(f"preprocessed {len(pairs)} exams into {out}")
    return 0


def _load_model_table(args) -> tuple[BackboneConfig | ViTConfig, dict, int]:
    table = load_config_table(_require(args.config, "--config"))
    unknown = sorted(set(table) - {"model", "train", "out_size"})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    if "model" not in table:
        raise ConfigError("model table is required")
    out_size = int(table.get("out_size", 32))
    model_cfg = build_model_config(table["model"], out_size, "model")
    return model_cfg, table, out_size


def _cmd_train_image(args) -> int:
    model_cfg, table, out_size = _load_model_table(args)
    if "train" not in table:
        raise ConfigError("train table is required")
    train_cfg = dataclasses.replace(
        build_train_config(table["train"], "train"), seed=args.seed
    )
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    sets = _image_sets(_load_dataset(args.dataset), PreprocConfig(out_size=out_size))
    handle = _build_model_handle(model_cfg, args.seed)
    handle, history = train_image_classifier(
        sets, handle, train_cfg, checkpoint_path=out / "checkpoint.f64"
    )
    # Stamp the preprocessing size into the sidecar so `extract` can rebuild
    # the whole inference path from the checkpoint alone.
    sidecar_path = out / "checkpoint.json"
    sidecar = json.loads(sidecar_path.read_text())
    sidecar["out_size"] = out_size
    atomic_write_json(sidecar_path, sidecar)
    atomic_write_json(
        out / "metrics.json",
        {
            "val_auc": max(history.val_auc),
            "best_epoch": history.best_epoch,
            "epochs_run": history.epochs_run,
        },
    )
    print(f"trained {_model_name(model_cfg)} to {out}")
    return 0


def _cmd_extract(args) -> int:
    out = Path(_require(args.out, "--out"))
    handle, sidecar = load_checkpoint_model(args.checkpoint)
    out_size = sidecar.get("out_size")
    if args.config is not None:
        table = load_config_table(args.config)
        unknown = sorted(set(table) - {"out_size"})
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]}")
        out_size = table.get("out_size", out_size)
    if out_size is None:
        raise ConfigError(
            "checkpoint does not record a preprocessing size; "
            "pass --config with an out_size entry"
        )
    out.mkdir(parents=True, exist_ok=True)
    prep_cfg = PreprocConfig(out_size=int(out_size))
    pairs = _load_dataset(args.dataset)
    for volume, _record in pairs:
        prep = preprocess_exam(volume, prep_cfg)
        features = extract_exam_features(handle, prep.images)
        save_exam_features(features, volume.exam_id, handle.fingerprint, out)
    print(f"extracted features for {len(pairs)} exams into {out}")
    return 0


def _cmd_train_exam(args) -> int:
    table = load_config_table(_require(args.config, "--config"))
    unknown = sorted(set(table) - {"head", "train"})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    for key in ("head", "train"):
        if key not in table:
            raise ConfigError(f"{key} table is required")
    head_cfg = build_head_config(table["head"], "head")
    train_cfg = dataclasses.replace(
        build_train_config(table["train"], "train"), seed=args.seed
    )
    labels = read_labels_csv(args.labels)

    features_dir = Path(args.features)
    exam_ids = sorted(p.name[5:-5] for p in features_dir.glob("feat_*.json"))
    if not exam_ids:
        raise IngestError(f"no feature files under {features_dir}")
    dataset = []
    for exam_id in exam_ids:
        if exam_id not in labels:
            raise IngestError(f"no labels for exam {exam_id!r} in {args.labels}")
        features, _meta = load_exam_features(features_dir, exam_id)
        dataset.append((FeatureSequence(exam_id, features.astype(np.float64)), labels[exam_id]))
    feature_dim = dataset[0][0].features.shape[1]

    if isinstance(head_cfg, CCHeadConfig):
        handle = build_cc_head(head_cfg, feature_dim, args.seed)
    else:
        handle = build_mil_head(head_cfg, feature_dim, args.seed)
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    train_part, val_part = balanced_val_split(dataset, train_cfg.val_fraction, args.seed)
    handle, history = train_exam_classifier(
        train_part,
        handle,
        train_cfg,
        val_dataset=val_part,
        checkpoint_path=out / "head.f64",
    )
    predictions = [predict_exam(handle, seq) for seq, _ in dataset]
    write_exam_predictions(predictions, out / "exam_preds.csv")
    atomic_write_json(
        out / "metrics.json",
        {
            "val_mean_auc": max(history.val_auc),
            "best_epoch": history.best_epoch,
            "epochs_run": history.epochs_run,
        },
    )
    print(f"trained exam head on {len(dataset)} exams to {out}")
    return 0


def _cmd_run(args) -> int:
    config = load_experiment_config(_require(args.config, "--config"))
    out = run_experiment(config, out_dir=args.out, jobs=args.jobs)
    print(f"experiment results in {out}")
    return 0


def _cmd_report(args) -> int:
    written = report(Path(args.results))
    print(f"wrote {len(written)} figure files")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON settings file")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="pecad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="window, crop and resize a dataset")
    p.add_argument("dataset", help="dataset directory (with manifest.csv)")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train-image", parents=[common], help="train a per-slice classifier")
    p.add_argument("dataset", help="dataset directory (with manifest.csv)")
    p.set_defaults(func=_cmd_train_image)

    p = sub.add_parser("extract", parents=[common], help="extract per-slice feature sequences")
    p.add_argument("dataset", help="dataset directory (with manifest.csv)")
    p.add_argument("checkpoint", help="trained image-model checkpoint (.f64)")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train-exam", parents=[common], help="train a 9-label exam head")
    p.add_argument("features", help="directory of feat_<exam>.f32 files")
    p.add_argument("labels", help="exam label CSV")
    p.set_defaults(func=_cmd_train_exam)

    p = sub.add_parser("run", parents=[common], help="run a multi-seed experiment")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", parents=[common], help="render figures for an experiment")
    p.add_argument("results", help="experiment results directory")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    """CLI dispatcher; returns the process exit code."""
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
