"""Tests for the config-driven multi-seed experiment runner and reporting."""

import csv
import json

import numpy as np
import pytest

from pecad.bench import (
    ExperimentConfig,
    load_experiment_config,
    parse_experiment_config,
    run_experiment,
)
from pecad.errors import ConfigError, DataError
from pecad.metrics import aggregate_runs, pearson_r, ttest_from_summary
from pecad.report import report

BASE = {
    "name": "demo",
    "seeds": [0, 1],
    "data": {
        "n_exams": 12,
        "image_size": 48,
        "slices_per_exam_range": [2, 3],
        "seed": 7,
        "n_test": 4,
        "out_size": 32,
    },
    "arms": [
        {
            "label": "plain",
            "kind": "image",
            "model": {"family": "residual"},
            "train": {"epochs": 1},
        }
    ],
}


def config_dict(**overrides):
    raw = json.loads(json.dumps(BASE))
    raw.update(overrides)
    return raw


def read_summary(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def png_dims(blob: bytes) -> tuple[int, int]:
    assert blob.startswith(b"\x89PNG\r\n\x1a\n")
    return int.from_bytes(blob[16:20], "big"), int.from_bytes(blob[20:24], "big")


class TestConfigParsing:
    def test_minimal_round_trip(self):
        cfg = parse_experiment_config(config_dict())
        assert cfg.name == "demo"
        assert cfg.seeds == (0, 1)
        assert cfg.data.synth.n_exams == 12
        assert cfg.data.n_test == 4
        assert len(cfg.arms) == 1
        assert cfg.arms[0].model.family == "residual"

    def test_toml_and_json_files_parse_identically(self, tmp_path):
        toml_text = """
name = "demo"
seeds = [0, 1]

[data]
n_exams = 12
image_size = 48
slices_per_exam_range = [2, 3]
seed = 7
n_test = 4
out_size = 32

[[arms]]
label = "plain"
kind = "image"
model = { family = "residual" }
train = { epochs = 1 }
"""
        toml_path = tmp_path / "exp.toml"
        toml_path.write_text(toml_text)
        json_path = tmp_path / "exp.json"
        json_path.write_text(json.dumps(config_dict()))
        assert load_experiment_config(toml_path) == load_experiment_config(json_path)

    def test_unknown_key_is_named_with_its_path(self):
        raw = config_dict()
        raw["data"]["bogus"] = 1
        with pytest.raises(ConfigError, match="data.bogus"):
            parse_experiment_config(raw)

    def test_unknown_arm_key_names_the_arm_index(self):
        raw = config_dict()
        raw["arms"][0]["mystery"] = True
        with pytest.raises(ConfigError, match=r"arms\[0\].mystery"):
            parse_experiment_config(raw)

    def test_duplicate_labels_rejected(self):
        raw = config_dict()
        raw["arms"] = [raw["arms"][0], json.loads(json.dumps(raw["arms"][0]))]
        with pytest.raises(ConfigError, match="label"):
            parse_experiment_config(raw)

    def test_empty_seeds_rejected(self):
        with pytest.raises(ConfigError, match="seeds"):
            parse_experiment_config(config_dict(seeds=[]))

    def test_comparison_must_reference_existing_arms(self):
        raw = config_dict()
        raw["comparisons"] = [
            {"label": "c", "metric": "image_auc", "arm_a": "plain", "arm_b": "ghost"}
        ]
        with pytest.raises(ConfigError, match="ghost"):
            parse_experiment_config(raw)

    def test_exam_arm_requires_head_and_image_train(self):
        raw = config_dict()
        raw["arms"][0]["kind"] = "exam"
        with pytest.raises(ConfigError, match=r"arms\[0\]"):
            parse_experiment_config(raw)

    def test_vit_patch_must_divide_working_size(self):
        raw = config_dict()
        raw["arms"][0]["model"] = {"type": "vit", "patch_size": 5, "dim": 16, "heads": 2, "depth": 1}
        with pytest.raises(ConfigError, match=r"arms\[0\].model"):
            parse_experiment_config(raw)

    def test_train_seed_is_managed_by_the_runner(self):
        raw = config_dict()
        raw["arms"][0]["train"]["seed"] = 3
        with pytest.raises(ConfigError, match="seed"):
            parse_experiment_config(raw)


class TestRunExperiment:
    def two_arm_config(self):
        raw = config_dict(seeds=[0, 1, 2])
        raw["arms"] = [
            {
                "label": "residual",
                "kind": "image",
                "model": {"family": "residual"},
                "train": {"epochs": 1},
            },
            {
                "label": "xception",
                "kind": "image",
                "model": {"family": "xception"},
                "train": {"epochs": 1},
            },
        ]
        return parse_experiment_config(raw)

    def test_two_arms_three_seeds_bookkeeping(self, tmp_path):
        out = run_experiment(self.two_arm_config(), out_dir=tmp_path / "run")
        rows = read_summary(out / "summary.csv")
        auc_rows = [r for r in rows if r["metric"] == "image_auc"]
        assert sorted(r["arm"] for r in auc_rows) == ["residual", "xception"]
        assert all(r["n"] == "3" for r in auc_rows)
        for arm in ("residual", "xception"):
            for seed in (0, 1, 2):
                cell = out / "cells" / arm / str(seed)
                assert (cell / "metrics.json").is_file()
                assert (cell / "checkpoint.f64").is_file()
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["cells"]) == 6
        assert all(c["status"] == "ok" for c in manifest["cells"].values())
        # aggregates must equal recomputation from the per-cell metrics
        for row in auc_rows:
            values = [
                json.loads((out / "cells" / row["arm"] / str(s) / "metrics.json").read_text())[
                    "image_auc"
                ]
                for s in (0, 1, 2)
            ]
            agg = aggregate_runs(values)
            assert float(row["mean"]) == agg.mean
            assert float(row["std"]) == agg.std

    def test_rerun_reuses_every_cell_and_reproduces_the_csv(self, tmp_path):
        cfg = self.two_arm_config()
        out = run_experiment(cfg, out_dir=tmp_path / "run")
        first = (out / "summary.csv").read_bytes()
        manifest = json.loads((out / "manifest.json").read_text())
        assert all(not c["cached"] for c in manifest["cells"].values())
        out2 = run_experiment(cfg, out_dir=tmp_path / "run")
        manifest2 = json.loads((out2 / "manifest.json").read_text())
        assert all(c["cached"] for c in manifest2["cells"].values())
        assert (out2 / "summary.csv").read_bytes() == first

    def test_fresh_directory_reproduces_csv_bit_exactly(self, tmp_path):
        cfg = self.two_arm_config()
        a = run_experiment(cfg, out_dir=tmp_path / "a")
        b = run_experiment(cfg, out_dir=tmp_path / "b")
        assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()

    def test_failed_arm_is_recorded_and_others_continue(self, tmp_path):
        raw = config_dict(seeds=[0])
        raw["arms"] = [
            raw["arms"][0],
            {
                "label": "doomed",
                "kind": "image",
                "model": {"family": "residual"},
                "train": {"epochs": 1, "val_fraction": 0.99},
            },
        ]
        cfg = parse_experiment_config(raw)
        out = run_experiment(cfg, out_dir=tmp_path / "run")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["cells"]["plain/0"]["status"] == "ok"
        assert manifest["cells"]["doomed/0"]["status"] == "failed"
        assert manifest["cells"]["doomed/0"]["error"]
        arms_in_summary = {r["arm"] for r in read_summary(out / "summary.csv")}
        assert arms_in_summary == {"plain"}

    def test_comparison_row_matches_direct_statistics(self, tmp_path):
        raw = config_dict(seeds=[0, 1])
        raw["arms"] = [
            {
                "label": "with_se",
                "kind": "image",
                "model": {"family": "xception", "with_se": True},
                "train": {"epochs": 1},
            },
            {
                "label": "without_se",
                "kind": "image",
                "model": {"family": "xception"},
                "train": {"epochs": 1},
            },
        ]
        raw["comparisons"] = [
            {
                "label": "se_effect",
                "metric": "image_auc",
                "arm_a": "with_se",
                "arm_b": "without_se",
                "tails": 1,
            }
        ]
        cfg = parse_experiment_config(raw)
        out = run_experiment(cfg, out_dir=tmp_path / "run")
        with open(out / "comparisons.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        values = {}
        for arm in ("with_se", "without_se"):
            values[arm] = [
                json.loads((out / "cells" / arm / str(s) / "metrics.json").read_text())[
                    "image_auc"
                ]
                for s in (0, 1)
            ]
        agg_a = aggregate_runs(values["with_se"])
        agg_b = aggregate_runs(values["without_se"])
        expected = ttest_from_summary(
            agg_a.mean, agg_a.std, agg_a.n, agg_b.mean, agg_b.std, agg_b.n, tails=1
        )
        assert float(rows[0]["t"]) == expected.t
        assert float(rows[0]["p"]) == expected.p
        assert rows[0]["df"] == str(expected.df)

    def test_exam_arms_share_the_image_stage(self, tmp_path):
        raw = config_dict(seeds=[0])
        raw["data"]["n_exams"] = 14
        raw["arms"] = [
            {
                "label": "cc",
                "kind": "exam",
                "model": {"family": "residual"},
                "image_train": {"epochs": 1},
                "head": {"type": "cc", "resample_k": 8, "hidden": 4},
                "train": {"epochs": 2, "lr": 0.01},
            },
            {
                "label": "amp",
                "kind": "exam",
                "model": {"family": "residual"},
                "image_train": {"epochs": 1},
                "head": {"type": "mil", "mode": "AMP", "attention_hidden": 8},
                "train": {"epochs": 2, "lr": 0.01},
            },
        ]
        cfg = parse_experiment_config(raw)
        out = run_experiment(cfg, out_dir=tmp_path / "run")
        rows = read_summary(out / "summary.csv")
        means = {r["arm"]: r for r in rows if r["metric"] == "exam_mean_auc"}
        assert set(means) == {"cc", "amp"}
        for arm in ("cc", "amp"):
            cell = out / "cells" / arm / "0"
            assert (cell / "exam_preds.csv").is_file()
            assert (cell / "head.f64").is_file()
        stages = [p for p in (out / "stages").iterdir() if p.is_dir()]
        assert len(stages) == 1  # both arms reused one trained image stage

    def test_transfer_arm_pretrains_then_finetunes(self, tmp_path):
        raw = config_dict(seeds=[0])
        raw["arms"] = [
            {
                "label": "transfer",
                "kind": "image",
                "model": {"family": "residual"},
                "train": {"epochs": 1},
                "pretrain": {"epochs": 1, "source_exams": 10},
            }
        ]
        cfg = parse_experiment_config(raw)
        out = run_experiment(cfg, out_dir=tmp_path / "run")
        cell = out / "cells" / "transfer" / "0"
        assert (cell / "pretrained.f64").is_file()
        assert (cell / "checkpoint.f64").is_file()
        metrics = json.loads((cell / "metrics.json").read_text())
        assert 0.0 <= metrics["image_auc"] <= 1.0

    def test_parallel_jobs_match_sequential_results(self, tmp_path):
        cfg = self.two_arm_config()
        seq = run_experiment(cfg, out_dir=tmp_path / "seq", jobs=1)
        par = run_experiment(cfg, out_dir=tmp_path / "par", jobs=2)
        assert (seq / "summary.csv").read_bytes() == (par / "summary.csv").read_bytes()


class TestReport:
    def run_once(self, tmp_path):
        raw = config_dict(seeds=[0, 1])
        raw["arms"] = [
            raw["arms"][0],
            {
                "label": "xception",
                "kind": "image",
                "model": {"family": "xception"},
                "train": {"epochs": 1},
            },
        ]
        cfg = parse_experiment_config(raw)
        return run_experiment(cfg, out_dir=tmp_path / "run")

    def test_bar_chart_and_overlays_written(self, tmp_path):
        out = self.run_once(tmp_path)
        figures = report(out, overlay_samples=2)
        names = {p.name for p in figures}
        assert "bar_image_auc.png" in names
        bar = next(p for p in figures if p.name == "bar_image_auc.png")
        assert bar.read_bytes().startswith(b"\x89PNG\r\n\x1a\n")
        overlays = sorted(p for p in figures if p.name.startswith("overlay_"))
        assert len(overlays) == 2
        for path in overlays:
            assert png_dims(path.read_bytes()) == (32, 32)

    def test_empty_results_dir_is_a_data_error(self, tmp_path):
        with pytest.raises(DataError):
            report(tmp_path / "nothing")

    def test_scatter_annotation_matches_pearson(self, tmp_path):
        results = tmp_path / "results"
        results.mkdir()
        rows = [
            ("a", "metric_one", 0.1, 0.01, 3),
            ("a", "metric_two", 0.5, 0.01, 3),
            ("b", "metric_one", 0.3, 0.01, 3),
            ("b", "metric_two", 0.55, 0.01, 3),
            ("c", "metric_one", 0.7, 0.01, 3),
            ("c", "metric_two", 0.9, 0.01, 3),
        ]
        with open(results / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arm", "metric", "mean", "std", "n"])
            writer.writerows(rows)
        figures = report(results)
        scatter = [p for p in figures if p.name.startswith("scatter_")]
        assert any(p.suffix == ".png" for p in scatter)
        stats_path = next(p for p in scatter if p.name == "scatter_stats.csv")
        with open(stats_path, newline="") as fh:
            stats = list(csv.DictReader(fh))
        expected = pearson_r([0.1, 0.3, 0.7], [0.5, 0.55, 0.9])
        assert float(stats[0]["pearson_r"]) == pytest.approx(expected, abs=1e-12)
