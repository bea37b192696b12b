"""
Config-driven experiments: arms x seeds, cached and compared
============================================================

The benchmark runner turns a plain TOML or JSON config into a grid of
(arm x seed) training cells, aggregates each arm's metrics into
summary.csv, runs planned t-tests between arms, and caches every finished
cell by a content hash — rerunning a finished experiment retrains nothing
and reproduces the tables bit-for-bit.  The report step renders bar
charts, a cross-metric scatter, and saliency overlays from the trained
checkpoints.
"""

import json
import time
from pathlib import Path

from pecad.bench import load_experiment_config, run_experiment
from pecad.report import report

out_dir = Path("demo_output/05_experiment")
out_dir.mkdir(parents=True, exist_ok=True)

# --- the whole experiment is one declarative file -------------------------
config_text = """\
name = "se-ablation-demo"
seeds = [0, 1, 2]

[data]
n_exams = 40
image_size = 48
slices_per_exam_range = [3, 5]
seed = 9
n_test = 10
out_size = 32

[[arms]]
label = "plain"
kind = "image"
model = { family = "xception" }
train = { epochs = 2 }

[[arms]]
label = "with_se"
kind = "image"
model = { family = "xception", with_se = true }
train = { epochs = 2 }

[[comparisons]]
label = "se_effect"
metric = "image_auc"
arm_a = "with_se"
arm_b = "plain"
tails = 1
"""
config_path = out_dir / "experiment.toml"
config_path.write_text(config_text)
config = load_experiment_config(config_path)
print(f"experiment '{config.name}': {len(config.arms)} arms x {len(config.seeds)} seeds")

# --- first run trains everything -------------------------------------------
results_dir = out_dir / "results"
t0 = time.perf_counter()
run_experiment(config, out_dir=results_dir)
print(f"\nfirst run: {time.perf_counter() - t0:.1f}s")
print((results_dir / "summary.csv").read_text())
print((results_dir / "comparisons.csv").read_text())

# --- second run reuses every cached cell -----------------------------------
t0 = time.perf_counter()
run_experiment(config, out_dir=results_dir)
manifest = json.loads((results_dir / "manifest.json").read_text())
cached = sum(1 for cell in manifest["cells"].values() if cell["cached"])
print(f"second run: {time.perf_counter() - t0:.1f}s, "
      f"{cached}/{len(manifest['cells'])} cells served from cache")

# --- figures ----------------------------------------------------------------
written = report(results_dir, overlay_samples=3)
print("\nreport wrote:")
for path in written:
    print(f"  {path}")
