"""
From raw HU volumes to model-ready slice triplets
=================================================

Preprocessing runs in four steps, each usable on its own:

1. window the HU values (level 100, width 700 by default, i.e. clip to
   [-250, 450] and rescale to [0, 1]) so vascular structure stands out;
2. locate the lungs and compute one square crop box per exam;
3. crop and resize every slice to a fixed working resolution with
   pixel-center bilinear interpolation;
4. stack each slice with its neighbors into a 3-channel triplet, so a
   2-D network sees a little through-plane context.
"""

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from pecad.data import SynthConfig, synth_generate_with_truth
from pecad.preprocess import (
    PreprocConfig,
    WindowSpec,
    apply_window,
    localize_lungs,
    make_triplet,
    preprocess_exam,
)

out_dir = Path("demo_output/02_preprocessing")
out_dir.mkdir(parents=True, exist_ok=True)

exam = synth_generate_with_truth(SynthConfig(n_exams=1, image_size=96), seed=7)[0]
volume = exam.volume.voxels.astype(np.float64)

# --- step 1: windowing ---------------------------------------------------
window = WindowSpec()  # level 100, width 700
lo, hi = window.level - window.width / 2, window.level + window.width / 2
print(f"window level {window.level}, width {window.width} -> clip to [{lo:.0f}, {hi:.0f}]")
windowed = apply_window(volume, window)
print(f"windowed range: [{windowed.min():.3f}, {windowed.max():.3f}] (always within [0, 1])")

# --- step 2: lung localization ------------------------------------------
# The finder thresholds air-like voxels inside the body, keeps the two
# largest components, and returns a square crop box with a margin.
box = localize_lungs(exam.volume)
print(f"lung crop box (y0, y1, x0, x1): {box.as_tuple()}")
true_y0, true_y1, true_x0, true_x1 = exam.truth.lung_box
print(f"true lung bounding box:        ({true_y0}, {true_y1}, {true_x0}, {true_x1})")

# --- steps 3-4: the full pipeline ----------------------------------------
cfg = PreprocConfig(out_size=64)
prep = preprocess_exam(exam.volume, cfg)
print(f"\npreprocessed tensor: {prep.images.shape} {prep.images.dtype} "
      f"(slices, channels, height, width)")
print(f"fell back to the full frame: {prep.fallback_full_frame}")

# Triplets replicate the edge slices, so channel 0 of the first slice is
# the slice itself.
middle = prep.images.shape[0] // 2
triplet = make_triplet(apply_window(volume, window), middle)
print(f"one triplet alone: {triplet.shape}; channels are slices "
      f"{middle - 1}, {middle}, {middle + 1}")

# --- a look at the result -------------------------------------------------
fig = Figure(figsize=(9, 3), dpi=110)
for i, (title, image) in enumerate(
    [
        ("raw HU (middle slice)", volume[middle]),
        ("windowed", windowed[middle]),
        ("lung crop, resized", prep.images[middle, 1]),
    ]
):
    ax = fig.add_subplot(1, 3, i + 1)
    ax.imshow(image, cmap="gray")
    ax.set_title(title, fontsize=9)
    ax.set_axis_off()
canvas = FigureCanvasAgg(fig)
canvas.print_png(str(out_dir / "pipeline_stages.png"))
print(f"\nwrote {out_dir / 'pipeline_stages.png'}")
