"""Gradient-weighted attention maps over the last convolutional feature grid.

Per-channel pixel weights follow the closed form
``alpha = g^2 / (2 g^2 + (sum_space A) * g^3)`` with ``g`` the gradient of the
single logit with respect to the feature grid ``A`` (term-wise, denominators
below 1e-12 zero the weight).  Channel weights are ``sum_space alpha *
relu(g)``; the map is ``relu(sum_k w_k A_k)``, bilinearly upsampled to the
input size and max-normalized to [0, 1] (identically-zero maps stay zero).
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from torch import nn

from .errors import UnsupportedArchitectureError
from .fileio import atomic_write_bytes
from .models import ModelHandle, ViTBackbone
from .preprocess import CropBox, crop_resize

__all__ = ["gradcam_pp", "save_heatmap_overlay"]

_DENOM_GUARD = 1e-12


def gradcam_pp(model: ModelHandle | nn.Module, image: np.ndarray) -> np.ndarray:
    """Attention heatmap for one image, same spatial size, values in [0, 1].

    Requires a convolutional model exposing ``spatial_features`` and a linear
    ``head``; patch-transformer models have no convolutional feature grid and
    raise ``UnsupportedArchitectureError``.  A logit with zero gradient
    yields an all-zero map rather than an error.
    """
    module = model.module if isinstance(model, ModelHandle) else model
    if isinstance(module, ViTBackbone):
        raise UnsupportedArchitectureError(
            "attention maps require a convolutional feature grid; "
            "patch-transformer models are not supported"
        )
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        raise ValueError(f"expected one (3, size, size) image, got shape {image.shape}")
    size = image.shape[1]

    module.eval()
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    x.requires_grad_(True)
    grids = module.spatial_features(x)
    logit = module.head(grids.mean(dim=(2, 3))).squeeze()
    grads = torch.autograd.grad(logit, grids, allow_unused=True)[0]

    a = grids.detach().numpy()[0].astype(np.float64)  # (channels, h, w)
    if grads is None:
        g = np.zeros_like(a)
    else:
        g = grads.detach().numpy()[0].astype(np.float64)
    space_sum = a.sum(axis=(1, 2), keepdims=True)
    denom = 2.0 * g**2 + space_sum * g**3
    safe = np.abs(denom) >= _DENOM_GUARD
    alpha = np.zeros_like(g)
    alpha[safe] = g[safe] ** 2 / denom[safe]
    channel_weights = (alpha * np.maximum(g, 0.0)).sum(axis=(1, 2))
    cam = np.maximum((channel_weights[:, None, None] * a).sum(axis=0), 0.0)

    up = crop_resize(cam, CropBox.full_frame(*cam.shape), size).astype(np.float64)
    peak = up.max()
    if peak > 0:
        up = up / peak
    return up.astype(np.float32)


def save_heatmap_overlay(image: np.ndarray, heatmap: np.ndarray, path: Path | str) -> None:
    """Render the heatmap over the image's center channel and write a PNG.

    The PNG is written pixel-for-pixel at the input resolution (one figure
    inch at a DPI equal to the image side), so downstream checks can match
    overlay dimensions against the data they were computed from.
    """
    image = np.asarray(image)
    base = image[image.shape[0] // 2] if image.ndim == 3 else image
    fig = Figure(figsize=(1, 1), dpi=base.shape[-1])
    canvas = FigureCanvasAgg(fig)
    ax = fig.add_axes((0.0, 0.0, 1.0, 1.0))
    ax.set_axis_off()
    ax.imshow(base, cmap="gray", vmin=float(base.min()), vmax=float(max(base.max(), base.min() + 1e-9)))
    ax.imshow(heatmap, cmap="inferno", alpha=0.5, vmin=0.0, vmax=1.0)
    buffer = io.BytesIO()
    canvas.print_png(buffer)
    atomic_write_bytes(Path(path), buffer.getvalue())
