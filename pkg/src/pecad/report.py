"""Figures derived from an experiment's summary tables.

Every number a figure shows is also present in a CSV next to it: bar charts
draw straight from ``summary.csv``, and the scatter annotation is written to
``figures/scatter_stats.csv``.  Saliency overlays are rendered from the
first completed convolutional image arm, at the exact pixel resolution of
the preprocessed slices they explain.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .bench import ExperimentConfig, generate_split, parse_experiment_config
from .errors import DataError, ZeroVarianceError
from .fileio import atomic_write_bytes, atomic_write_text
from .gradcam import gradcam_pp, save_heatmap_overlay
from .metrics import pearson_r
from .models import BackboneConfig, build_backbone, load_checkpoint
from .preprocess import PreprocConfig, preprocess_exam

__all__ = ["report"]


def _save_figure(fig: Figure, path: Path) -> None:
    buffer = io.BytesIO()
    FigureCanvasAgg(fig).print_png(buffer)
    atomic_write_bytes(path, buffer.getvalue())


def _read_summary(path: Path) -> list[dict]:
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        raise DataError(f"{path} has no data rows")
    return rows


def _bar_charts(rows: list[dict], figures_dir: Path) -> list[Path]:
    by_metric: dict[str, list[tuple[str, float, float]]] = {}
    for row in rows:
        by_metric.setdefault(row["metric"], []).append(
            (row["arm"], float(row["mean"]), float(row["std"]))
        )
    written = []
    for metric in sorted(by_metric):
        entries = by_metric[metric]
        labels = [arm for arm, _, _ in entries]
        means = [mean for _, mean, _ in entries]
        errors = [0.0 if math.isnan(std) else std for _, _, std in entries]
        fig = Figure(figsize=(max(3.0, 1.0 + 1.2 * len(entries)), 3.2), dpi=128)
        ax = fig.add_subplot(111)
        ax.bar(range(len(entries)), means, yerr=errors, capsize=4, color="#4878a8")
        ax.set_xticks(range(len(entries)))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel(metric)
        ax.set_title(metric)
        fig.subplots_adjust(bottom=0.28, left=0.18)
        path = figures_dir / f"bar_{metric}.png"
        _save_figure(fig, path)
        written.append(path)
    return written


def _scatter(rows: list[dict], figures_dir: Path) -> list[Path]:
    """Cross-metric scatter when every arm reports exactly two shared metrics."""
    arm_metrics: dict[str, dict[str, float]] = {}
    arm_order: list[str] = []
    for row in rows:
        if row["arm"] not in arm_metrics:
            arm_order.append(row["arm"])
        arm_metrics.setdefault(row["arm"], {})[row["metric"]] = float(row["mean"])
    if len(arm_order) < 2:
        return []
    common = set.intersection(*(set(m) for m in arm_metrics.values()))
    if len(common) != 2:
        return []
    metric_x, metric_y = sorted(common)
    xs = [arm_metrics[arm][metric_x] for arm in arm_order]
    ys = [arm_metrics[arm][metric_y] for arm in arm_order]
    try:
        r = pearson_r(xs, ys)
    except ZeroVarianceError:
        r = None

    fig = Figure(figsize=(4, 4), dpi=128)
    ax = fig.add_subplot(111)
    ax.scatter(xs, ys, color="#4878a8")
    for arm, x, y in zip(arm_order, xs, ys):
        ax.annotate(arm, (x, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel(metric_x)
    ax.set_ylabel(metric_y)
    if r is not None:
        ax.set_title(f"r = {r:.4f}")
    fig.subplots_adjust(bottom=0.15, left=0.18)
    png_path = figures_dir / f"scatter_{metric_x}_vs_{metric_y}.png"
    _save_figure(fig, png_path)
    written = [png_path]
    if r is not None:
        stats_path = figures_dir / "scatter_stats.csv"
        atomic_write_text(
            stats_path,
            "metric_x,metric_y,pearson_r\n"
            f"{metric_x},{metric_y},{float(r)}\n",
        )
        written.append(stats_path)
    return written


def _pick_overlay_source(results: Path, config: ExperimentConfig):
    """First convolutional image arm with a saved cell checkpoint, if any."""
    for arm in config.arms:
        if arm.kind != "image" or not isinstance(arm.model, BackboneConfig):
            continue
        for seed in config.seeds:
            checkpoint = results / "cells" / arm.label / str(seed) / "checkpoint.f64"
            if checkpoint.is_file():
                return arm, seed, checkpoint
    return None


def _overlay_images(config: ExperimentConfig, samples: int) -> list[np.ndarray]:
    """Deterministic sample of held-out slices, lesion-bearing ones first."""
    _train, test = generate_split(config.data)
    prep_cfg = PreprocConfig(out_size=config.data.out_size)
    preferred: list[np.ndarray] = []
    remainder: list[np.ndarray] = []
    for exam in test:
        prep = preprocess_exam(exam.volume, prep_cfg)
        flags = np.asarray(exam.record.image_labels)
        positives = np.flatnonzero(flags)
        first = int(positives[0]) if positives.size else 0
        preferred.append(prep.images[first])
        for i in range(prep.images.shape[0]):
            if i != first:
                remainder.append(prep.images[i])
    return (preferred + remainder)[:samples]


def _overlays(results: Path, figures_dir: Path, samples: int) -> list[Path]:
    config_path = results / "config.json"
    if samples < 1 or not config_path.is_file():
        return []
    config = parse_experiment_config(json.loads(config_path.read_text()))
    source = _pick_overlay_source(results, config)
    if source is None:
        return []
    arm, seed, checkpoint = source
    handle = build_backbone(arm.model, seed)
    load_checkpoint(handle, checkpoint)
    written = []
    for i, image in enumerate(_overlay_images(config, samples)):
        heatmap = gradcam_pp(handle, image)
        path = figures_dir / f"overlay_{i}.png"
        save_heatmap_overlay(image, heatmap, path)
        written.append(path)
    return written


def report(results_dir: Path | str, overlay_samples: int = 4) -> list[Path]:
    """Render figures for a finished experiment; returns the written paths.

    Produces one bar chart per metric (mean with spread whiskers), a
    cross-metric scatter with its correlation when the arms share exactly
    two metrics, and saliency overlays from the first convolutional image
    arm's checkpoint.  Raises ``DataError`` when there is no summary table.
    """
    results = Path(results_dir)
    summary_path = results / "summary.csv"
    if not summary_path.is_file():
        raise DataError(f"no summary.csv under {results}; run the experiment first")
    rows = _read_summary(summary_path)
    figures_dir = results / "figures"
    figures_dir.mkdir(parents=True, exist_ok=True)
    written = _bar_charts(rows, figures_dir)
    written += _scatter(rows, figures_dir)
    written += _overlays(results, figures_dir, overlay_samples)
    return written
