"""Depthwise-separable convolution backbone with residual blocks.

The full scale follows the classic entry / middle / exit flow layout: two
plain stem convolutions, three downsampling blocks growing 64 -> 128 -> 256
-> 728 channels, eight width-preserving middle blocks, a 728 -> 1024 exit
block, and two final separable convolutions to 1536 and 2048 channels, ending
in a single-logit head.  The mini scale keeps the same block grammar at a
fraction of the width for desk-scale training.  Squeeze-excite gates can be
attached to every residual block's output.
"""

from __future__ import annotations

import torch
from torch import nn

from .se import SEBlock


class SeparableConv2d(nn.Module):
    """Depthwise conv (groups = channels) followed by a 1x1 pointwise conv."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.depthwise = nn.Conv2d(
            in_channels, in_channels, kernel_size, stride, padding,
            groups=in_channels, bias=False,
        )
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pointwise(self.depthwise(x))


class XceptionBlock(nn.Module):
    """A stack of relu/separable-conv/norm repeats with a projection skip."""

    def __init__(self, in_filters: int, out_filters: int, reps: int, strides: int = 1,
                 start_with_relu: bool = True, grow_first: bool = True,
                 se_ratio: int | None = None):
        super().__init__()
        if out_filters != in_filters or strides != 1:
            self.skip = nn.Conv2d(in_filters, out_filters, 1, stride=strides, bias=False)
            self.skip_bn = nn.BatchNorm2d(out_filters)
        else:
            self.skip = None
            self.skip_bn = None

        layers: list[nn.Module] = []
        filters = in_filters
        if grow_first:
            layers += [
                nn.ReLU(),
                SeparableConv2d(in_filters, out_filters, 3, 1, 1),
                nn.BatchNorm2d(out_filters),
            ]
            filters = out_filters
        for _ in range(reps - 1):
            layers += [
                nn.ReLU(),
                SeparableConv2d(filters, filters, 3, 1, 1),
                nn.BatchNorm2d(filters),
            ]
        if not grow_first:
            layers += [
                nn.ReLU(),
                SeparableConv2d(in_filters, out_filters, 3, 1, 1),
                nn.BatchNorm2d(out_filters),
            ]
        if not start_with_relu:
            layers = layers[1:]
        if strides != 1:
            layers.append(nn.MaxPool2d(3, strides, 1))
        self.rep = nn.Sequential(*layers)
        self.se = SEBlock(out_filters, se_ratio) if se_ratio is not None else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.rep(x)
        skip = self.skip_bn(self.skip(x)) if self.skip is not None else x
        out = out + skip
        if self.se is not None:
            out = self.se(out)
        return out


_LAYOUTS = {
    # (stem widths, block specs (in, out, reps, strides, start_relu, grow_first),
    #  exit separable conv widths)
    "full": (
        (32, 64),
        [
            (64, 128, 2, 2, False, True),
            (128, 256, 2, 2, True, True),
            (256, 728, 2, 2, True, True),
            *[(728, 728, 3, 1, True, True)] * 8,
            (728, 1024, 2, 2, True, False),
        ],
        [(1024, 1536), (1536, 2048)],
    ),
    "mini": (
        (16, 32),
        [
            (32, 64, 2, 2, False, True),
            (64, 128, 2, 2, True, True),
            (128, 128, 3, 1, True, True),
            (128, 128, 3, 1, True, True),
        ],
        [(128, 256)],
    ),
}


class XceptionBackbone(nn.Module):
    """Separable-conv classifier emitting one logit per slice triplet."""

    def __init__(self, scale: str = "mini", se_ratio: int | None = None):
        super().__init__()
        stem, block_specs, exit_convs = _LAYOUTS[scale]
        self.conv1 = nn.Conv2d(3, stem[0], 3, stride=2, padding=0, bias=False)
        self.bn1 = nn.BatchNorm2d(stem[0])
        self.conv2 = nn.Conv2d(stem[0], stem[1], 3, padding=0, bias=False)
        self.bn2 = nn.BatchNorm2d(stem[1])
        self.blocks = nn.Sequential(
            *[
                XceptionBlock(i, o, reps, s, swr, gf, se_ratio)
                for (i, o, reps, s, swr, gf) in block_specs
            ]
        )
        tail: list[nn.Module] = []
        for in_c, out_c in exit_convs:
            tail += [SeparableConv2d(in_c, out_c, 3, 1, 1), nn.BatchNorm2d(out_c), nn.ReLU()]
        self.tail = nn.Sequential(*tail)
        self.feature_dim = exit_convs[-1][1]
        self.head = nn.Linear(self.feature_dim, 1)
        self.relu = nn.ReLU()

    def spatial_features(self, x: torch.Tensor) -> torch.Tensor:
        """Last post-activation feature map, shape (B, feature_dim, h, w)."""
        x = self.relu(self.bn1(self.conv1(x)))
        x = self.relu(self.bn2(self.conv2(x)))
        x = self.blocks(x)
        return self.tail(x)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial_features(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)
