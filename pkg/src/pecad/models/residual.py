"""Plain residual backbone built from two-conv basic blocks.

The full scale is the standard 18-layer arrangement (7x7 stem, four stages of
two basic blocks at 64/128/256/512 channels) with a single-logit head; the
mini scale is a three-stage 16/32/64 version for desk-scale training.
Squeeze-excite gates, when enabled, recalibrate each block's residual branch
before the skip addition.
"""

from __future__ import annotations

import torch
from torch import nn

from .se import SEBlock


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 se_ratio: int | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.downsample: nn.Module | None = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.downsample = None
        self.se = SEBlock(out_channels, se_ratio) if se_ratio is not None else None
        self.relu = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.bn2(self.conv2(self.relu(self.bn1(self.conv1(x)))))
        if self.se is not None:
            out = self.se(out)
        skip = self.downsample(x) if self.downsample is not None else x
        return self.relu(out + skip)


_LAYOUTS = {
    # (stem spec, block specs (in, out, stride))
    "full": (
        ("deep", 64),
        [
            (64, 64, 1), (64, 64, 1),
            (64, 128, 2), (128, 128, 1),
            (128, 256, 2), (256, 256, 1),
            (256, 512, 2), (512, 512, 1),
        ],
    ),
    "mini": (
        ("light", 16),
        [
            (16, 16, 1), (16, 16, 1),
            (16, 32, 2), (32, 32, 1),
            (32, 64, 2), (64, 64, 1),
        ],
    ),
}


class ResidualBackbone(nn.Module):
    """Residual classifier emitting one logit per slice triplet."""

    def __init__(self, scale: str = "mini", se_ratio: int | None = None):
        super().__init__()
        (stem_kind, stem_width), block_specs = _LAYOUTS[scale]
        if stem_kind == "deep":
            self.stem = nn.Sequential(
                nn.Conv2d(3, stem_width, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(stem_width),
                nn.ReLU(),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, stem_width, 3, stride=1, padding=1, bias=False),
                nn.BatchNorm2d(stem_width),
                nn.ReLU(),
            )
        self.blocks = nn.Sequential(
            *[ResidualBlock(i, o, s, se_ratio) for (i, o, s) in block_specs]
        )
        self.feature_dim = block_specs[-1][1]
        self.head = nn.Linear(self.feature_dim, 1)

    def spatial_features(self, x: torch.Tensor) -> torch.Tensor:
        """Last post-activation feature map, shape (B, feature_dim, h, w)."""
        return self.blocks(self.stem(x))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial_features(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)
