"""
Training a per-slice classifier and reading its attention maps
==============================================================

The image level answers one question per slice: does this slice show an
embolus?  A small separable-convolution backbone (optionally with channel
attention blocks) is trained with a binary logit per slice, evaluated by
AUC on held-out exams, and inspected with gradient-weighted attention
heatmaps.  As a soft sanity check — reported, not asserted — we count how
often the heatmap's hottest pixel falls inside a true lesion box.
"""

from pathlib import Path

import numpy as np

from pecad.data import SynthConfig, synth_generate_with_truth
from pecad.gradcam import gradcam_pp, save_heatmap_overlay
from pecad.image_level import TrainConfig, evaluate_image_level, pe_image_sets
from pecad.image_level import train_image_classifier
from pecad.models import BackboneConfig, build_backbone
from pecad.preprocess import PreprocConfig, preprocess_exam

out_dir = Path("demo_output/03_image_classifier")
out_dir.mkdir(parents=True, exist_ok=True)

# --- data: 100 train exams, 30 held-out exams ----------------------------
prep_cfg = PreprocConfig(out_size=32)
exams = synth_generate_with_truth(SynthConfig(n_exams=130), seed=1)
train_exams, test_exams = exams[:100], exams[100:]
train_sets = pe_image_sets(train_exams, prep_cfg)
test_sets = pe_image_sets(test_exams, prep_cfg)
n_train = sum(s.labels.size for s in train_sets)
print(f"{len(train_sets)} train exams ({n_train} slices), {len(test_sets)} held-out exams")

# --- model and training ---------------------------------------------------
# The 'mini' scale keeps the demo quick; 'full' reproduces the published
# architecture sizes.  Training holds out a slice of exams for validation
# and keeps the weights from the best validation epoch.
model = build_backbone(BackboneConfig(family="xception", scale="mini"), seed=0)
model, history = train_image_classifier(
    train_sets, model, TrainConfig(epochs=4, seed=0),
    checkpoint_path=out_dir / "image_model.f64",
)
print(f"validation AUC per epoch: {[round(a, 4) for a in history.val_auc]}")

auc = evaluate_image_level(model, test_sets)
print(f"held-out slice-level AUC: {auc:.4f}")

# --- attention heatmaps ----------------------------------------------------
# For each lesion-bearing held-out slice, compute the heatmap, find its
# hottest pixel, map it back to volume coordinates through the crop box,
# and check whether it lands inside (a slightly padded) true lesion box.
hits = total = 0
saved = 0
for exam in test_exams:
    if not exam.truth.lesions:
        continue
    prep = preprocess_exam(exam.volume, prep_cfg)
    y0, y1, x0, x1 = prep.box.as_tuple()
    size = prep_cfg.out_size
    for i in range(prep.images.shape[0]):
        boxes = [
            lesion.slice_boxes[i]
            for lesion in exam.truth.lesions
            if i in lesion.slice_boxes
        ]
        if not boxes:
            continue
        heat = gradcam_pp(model, prep.images[i])
        r, c = np.unravel_index(int(heat.argmax()), heat.shape)
        # map the crop-space argmax back into volume pixel coordinates
        vy = y0 + (r + 0.5) * (y1 - y0) / size
        vx = x0 + (c + 0.5) * (x1 - x0) / size
        pad = 2.0
        total += 1
        if any(
            by0 - pad <= vy < by1 + pad and bx0 - pad <= vx < bx1 + pad
            for by0, by1, bx0, bx1 in boxes
        ):
            hits += 1
        if saved < 3:
            path = out_dir / f"heatmap_{exam.volume.exam_id}_slice{i}.png"
            save_heatmap_overlay(prep.images[i], heat, path)
            saved += 1

print(f"heatmap argmax inside a lesion box: {hits} of {total} "
      f"lesion-bearing slices ({hits / max(total, 1):.0%}) — reported, not asserted")
print(f"wrote {saved} overlay PNGs under {out_dir}")
