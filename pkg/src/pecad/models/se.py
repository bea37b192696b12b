"""Squeeze-excite channel recalibration."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class SEBlock(nn.Module):
    """Global-pool -> bottleneck MLP -> sigmoid gate, applied channelwise.

    The feature map is average-pooled to one value per channel, squeezed
    through a ``channels // ratio`` bottleneck with ReLU, expanded back, and
    the sigmoid of the result rescales each input channel.
    """

    def __init__(self, channels: int, ratio: int = 16):
        super().__init__()
        reduced = max(1, channels // ratio)
        self.reduce = nn.Linear(channels, reduced)
        self.expand = nn.Linear(reduced, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.expand(F.relu(self.reduce(pooled))))
        return x * gate[:, :, None, None]


def se_param_count(channels: int, ratio: int = 16) -> int:
    """Closed-form trainable parameter count of one squeeze-excite block.

    With reduced width d = max(1, channels // ratio): the two biased linears
    hold (channels * d + d) + (d * channels + channels) parameters, which for
    divisible ratios simplifies to 2 C^2 / r + C / r + C.
    """
    reduced = max(1, channels // ratio)
    return 2 * channels * reduced + reduced + channels
