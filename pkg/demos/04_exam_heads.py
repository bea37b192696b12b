"""
Exam-level 9-label heads over frozen slice features
===================================================

An exam is a variable-length stack of slices.  After the per-slice model
is trained, each exam becomes an N x M feature sequence (one M-vector per
slice, extracted by the frozen backbone), and a small head predicts all
9 study labels at once.  Two head families are compared:

* the sequence head resamples every exam to a fixed K x M grid and runs a
  bidirectional GRU over it (order matters);
* the bag heads treat the exam as an unordered set and pool with max
  (MP), attention (AP), or both concatenated (AMP) — the attention weights
  say which slices drove the call.
"""

from pathlib import Path

import numpy as np

from pecad.data import SynthConfig, synth_generate_with_truth
from pecad.exam_level import (
    CCHeadConfig,
    MILConfig,
    balanced_val_split,
    build_cc_head,
    build_feature_dataset,
    build_mil_head,
    evaluate_exam_level,
    predict_exam,
    train_exam_classifier,
    write_exam_predictions,
)
from pecad.image_level import TrainConfig, pe_image_sets, train_image_classifier
from pecad.models import BackboneConfig, build_backbone
from pecad.preprocess import PreprocConfig

out_dir = Path("demo_output/04_exam_heads")
out_dir.mkdir(parents=True, exist_ok=True)

# --- stage 1: train the slice model, freeze it, extract features ----------
prep_cfg = PreprocConfig(out_size=32)
exams = synth_generate_with_truth(SynthConfig(n_exams=160), seed=4)
train_exams, test_exams = exams[:120], exams[120:]

backbone = build_backbone(BackboneConfig(family="xception", scale="mini"), seed=0)
backbone, _ = train_image_classifier(
    pe_image_sets(train_exams, prep_cfg), backbone, TrainConfig(epochs=4, seed=0)
)
train_ds = build_feature_dataset(train_exams, backbone, prep_cfg)
test_ds = build_feature_dataset(test_exams, backbone, prep_cfg)
n, m = train_ds[0][0].features.shape
print(f"feature sequences ready: e.g. {train_ds[0][0].exam_id} is {n} slices x {m} features")

# --- stage 2: train both head families on the frozen features -------------
train_part, val_part = balanced_val_split(train_ds, 0.1, seed=0)
head_cfg = TrainConfig(epochs=40, lr=0.01, patience=6, seed=0)

cc_head = build_cc_head(CCHeadConfig(resample_k=192, hidden=64), m, seed=0)
cc_head, _ = train_exam_classifier(train_part, cc_head, head_cfg, val_dataset=val_part)

amp_head = build_mil_head(MILConfig(mode="AMP", attention_hidden=64), m, seed=0)
amp_head, _ = train_exam_classifier(train_part, amp_head, head_cfg, val_dataset=val_part)

# --- evaluation: one AUC per label, averaged over the defined ones --------
for name, head in [("sequence head (CC)", cc_head), ("bag head (AMP)", amp_head)]:
    result = evaluate_exam_level(head, test_ds)
    print(f"\n{name}: mean AUC {result.mean_auc:.4f} "
          f"over {len(result.defined_labels)} defined labels")
    for label, auc in result.per_label.items():
        shown = f"{auc:.4f}" if not np.isnan(auc) else "undefined (single class)"
        print(f"  {label:24s} {shown}")

# --- attention tells you which slices mattered -----------------------------
prediction = predict_exam(amp_head, test_ds[0][0])
print(f"\nattention over {test_ds[0][0].exam_id}'s slices "
      f"(sums to {prediction.attention.sum():.6f}):")
print("  " + "  ".join(f"{w:.3f}" for w in prediction.attention))

predictions = [predict_exam(amp_head, seq) for seq, _ in test_ds]
write_exam_predictions(predictions, out_dir / "exam_predictions.csv")
print(f"\nwrote per-exam probabilities and attention to {out_dir / 'exam_predictions.csv'}")
