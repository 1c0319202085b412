"""Channel-then-spatial attention and the residual block that hosts it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm, Conv2d, Linear, Module, global_avg_pool, global_max_pool
from .tensor import ShapeError, Tensor, concat, relu, sigmoid, tmax, tmean


@dataclass(frozen=True)
class CbamConfig:
    reduction_ratio: int = 16
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be positive")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ValueError("spatial_kernel must be a positive odd integer")

    def hidden(self, channels: int) -> int:
        return max(1, channels // self.reduction_ratio)


class ChannelAttention(Module):
    """Shared two-layer MLP over avg- and max-pooled channel descriptors."""

    def __init__(self, channels: int, config: CbamConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        hidden = config.hidden(channels)
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)

    def mlp(self, v: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(v)))

    def forward(self, x: Tensor) -> Tensor:
        return channel_attention(x, self)


class SpatialAttention(Module):
    def __init__(self, config: CbamConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        k = config.spatial_kernel
        self.conv = Conv2d(2, 1, k, rng, stride=1, pad=k // 2, bias=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return spatial_attention(x, self)


def channel_attention(x: Tensor, ca: ChannelAttention) -> Tensor:
    """(N, C, H, W) -> (N, C) map in (0, 1)."""
    if x.ndim != 4 or x.shape[1] != ca.fc1.weight.shape[1]:
        raise ShapeError(f"channel attention: bad input shape {x.shape}")
    return sigmoid(ca.mlp(global_avg_pool(x)) + ca.mlp(global_max_pool(x)))


def channel_pool_maps(x: Tensor) -> Tensor:
    """Stack of channel-mean and channel-max maps, shape (N, 2, H, W)."""
    return concat([tmean(x, axis=1, keepdims=True), tmax(x, axis=1, keepdims=True)], axis=1)


def spatial_attention(x: Tensor, sa: SpatialAttention) -> Tensor:
    """(N, C, H, W) -> (N, 1, H, W) map in (0, 1); spatial size preserved."""
    return sigmoid(sa.conv(channel_pool_maps(x)))


class Cbam(Module):
    def __init__(self, channels: int, config: CbamConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        self.ca = ChannelAttention(channels, config, rng, dtype)
        self.sa = SpatialAttention(config, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return cbam_apply(x, self)


def cbam_apply(x: Tensor, cbam: Cbam) -> Tensor:
    n, c = x.shape[:2]
    refined = x * channel_attention(x, cbam.ca).reshape(n, c, 1, 1)
    return refined * spatial_attention(refined, cbam.sa)


class BasicBlock(Module):
    """Two 3x3 conv-BN stages plus shortcut; optional CBAM on the residual branch.

    CBAM acts on the branch output after the second batch norm and before
    the addition.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 rng: np.random.Generator, cbam: CbamConfig | None = None, dtype=np.float32):
        super().__init__()
        # stride-2 3x3 with pad 1 on even sizes drops the trailing pad row
        exact = stride == 1
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, pad=1,
                            exact=exact, dtype=dtype)
        self.bn1 = BatchNorm(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, stride=1, pad=1, dtype=dtype)
        self.bn2 = BatchNorm(out_channels, dtype=dtype)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = ShortcutProjection(in_channels, out_channels, stride, rng, dtype)
        self.cbam = Cbam(out_channels, cbam, rng, dtype) if cbam is not None else None

    def forward(self, x: Tensor) -> Tensor:
        return basic_block_cbam_forward(x, self, cbam_on=self.cbam is not None)


class ShortcutProjection(Module):
    def __init__(self, in_channels, out_channels, stride, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, rng, stride=stride, pad=0,
                           exact=False, dtype=dtype)
        self.bn = BatchNorm(out_channels, dtype=dtype)

    def forward(self, x):
        return self.bn(self.conv(x))


def basic_block_cbam_forward(x: Tensor, block: BasicBlock, cbam_on: bool = True) -> Tensor:
    branch = relu(block.bn1(block.conv1(x)))
    branch = block.bn2(block.conv2(branch))
    if cbam_on:
        if block.cbam is None:
            raise ValueError("block was built without CBAM parameters")
        branch = cbam_apply(branch, block.cbam)
    shortcut = x if block.shortcut is None else block.shortcut(x)
    if shortcut.shape != branch.shape:
        raise ShapeError(f"shortcut {shortcut.shape} does not match branch {branch.shape}")
    return relu(branch + shortcut)
