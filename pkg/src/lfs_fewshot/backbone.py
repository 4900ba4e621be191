"""Conv-4 embedding network."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from . import numerics as nx


class ConvBlock(nn.Module):
    """3x3 conv (padding 1) -> batch norm -> ReLU -> 2x2 max-pool."""

    def __init__(self, in_channels: int, out_channels: int, generator: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3, dtype=nx.DTYPE))
        self.bn_gain = nn.Parameter(torch.ones(out_channels, dtype=nx.DTYPE))
        self.bn_bias = nn.Parameter(torch.zeros(out_channels, dtype=nx.DTYPE))
        self.register_buffer("running_mean", torch.zeros(out_channels, dtype=nx.DTYPE))
        self.register_buffer("running_var", torch.ones(out_channels, dtype=nx.DTYPE))
        # conv bias omitted: batch norm cancels it
        std = math.sqrt(2.0 / (in_channels * 9))
        with torch.no_grad():
            self.weight.normal_(0.0, std, generator=generator)

    def forward(self, x):
        return conv_block(x, self)


def conv_block(x: torch.Tensor, block: ConvBlock) -> torch.Tensor:
    y = nx.conv2d(x, block.weight, padding=1)
    y = nx.batch_norm(y, block.bn_gain, block.bn_bias, block.running_mean, block.running_var, block.training)
    return nx.max_pool2d(nx.relu(y))


class Conv4(nn.Module):
    def __init__(self, channels: int = 64, in_channels: int = 3, generator: torch.Generator | None = None):
        super().__init__()
        self.channels = channels
        widths = [in_channels] + [channels] * 4
        self.blocks = nn.ModuleList(
            ConvBlock(widths[i], widths[i + 1], generator) for i in range(4)
        )

    @staticmethod
    def output_size(image_size: int) -> int:
        s = image_size
        for _ in range(4):
            s //= 2
        return s

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return conv4_forward(images, self)


def conv4_forward(images: torch.Tensor, net: Conv4) -> torch.Tensor:
    x = images
    for block in net.blocks:
        x = block(x)
    return x
