"""Mini-ResNet trunk emitting a classification feature and an uncertainty feature."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .cbam import BasicBlock, CbamConfig
from .layers import BatchNorm, Conv2d, Linear, Module, Sequential, global_avg_pool, linear_forward
from .tensor import ShapeError, Tensor, clamp, exp, max_pool2d, relu

SIGMA_LOG_BOUND = 10.0


@dataclass
class BackboneConfig:
    stage_blocks: list[int] = field(default_factory=lambda: [1, 1, 1])
    base_channels: int = 16
    input_size: int = 32
    in_channels: int = 1
    feature_dim: int = 64
    num_classes: int = 4
    cbam_on: bool = True
    reduction_ratio: int = 16
    spatial_kernel: int = 7
    stem: str = "small"  # "small": 3x3/1; "imagenet": 7x7/2 conv then 2x2 max pool
    head_bias: bool = False

    def __post_init__(self):
        self.stage_blocks = [int(b) for b in self.stage_blocks]
        if not self.stage_blocks or min(self.stage_blocks) < 1:
            raise ValueError("stage_blocks must be a non-empty list of positive ints")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be at least 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.stem not in ("small", "imagenet"):
            raise ValueError(f"unknown stem {self.stem!r}")
        if self.input_size % self.downsampling:
            raise ShapeError(
                f"input_size {self.input_size} not divisible by total downsampling {self.downsampling}"
            )

    @property
    def downsampling(self) -> int:
        stem = 4 if self.stem == "imagenet" else 1
        return stem * 2 ** (len(self.stage_blocks) - 1)

    def cbam_config(self) -> CbamConfig:
        return CbamConfig(self.reduction_ratio, self.spatial_kernel)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BackboneConfig":
        return cls(**json.loads(text))


def resnet18_preset(num_classes: int = 7, cbam_on: bool = True) -> BackboneConfig:
    """Full-size layout: 224x224 RGB, four stages of two blocks, 64 base channels."""
    return BackboneConfig(stage_blocks=[2, 2, 2, 2], base_channels=64, input_size=224,
                          in_channels=3, feature_dim=512, num_classes=num_classes,
                          cbam_on=cbam_on, stem="imagenet")


class FeatureBundle(NamedTuple):
    mu: Tensor
    sigma: Tensor


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        c = config.base_channels
        if config.stem == "imagenet":
            # (224 + 6 - 7) is odd; drop the trailing pad column like frameworks do
            self.stem_conv = Conv2d(config.in_channels, c, 7, rng, stride=2, pad=3,
                                    exact=False, dtype=dtype)
        else:
            self.stem_conv = Conv2d(config.in_channels, c, 3, rng, stride=1, pad=1, dtype=dtype)
        self.stem_bn = BatchNorm(c, dtype=dtype)
        self.stem_pool = config.stem == "imagenet"
        cbam = config.cbam_config() if config.cbam_on else None
        blocks = []
        in_ch = c
        for stage, count in enumerate(config.stage_blocks):
            out_ch = c * 2**stage
            for b in range(count):
                stride = 2 if stage > 0 and b == 0 else 1
                blocks.append(BasicBlock(in_ch, out_ch, stride, rng, cbam, dtype))
                in_ch = out_ch
        self.blocks = Sequential(*blocks)
        self.trunk_channels = in_ch
        self.mu_head = Linear(in_ch, config.feature_dim, rng, dtype=dtype)
        self.sigma_head = Linear(in_ch, config.feature_dim, rng, dtype=dtype)

    def trunk(self, x: Tensor) -> Tensor:
        h = relu(self.stem_bn(self.stem_conv(x)))
        if self.stem_pool:
            h = max_pool2d(h, 2, 2)
        return global_avg_pool(self.blocks(h))

    def forward(self, x: Tensor) -> FeatureBundle:
        return forward_features(x, self)


def forward_features(x: Tensor, backbone: Backbone) -> FeatureBundle:
    """mu from one linear head over the pooled trunk; sigma = exp(clamp(second head))."""
    if x.ndim != 4 or x.shape[1] != backbone.stem_conv.weight.shape[1]:
        raise ShapeError(f"backbone input has shape {x.shape}")
    pooled = backbone.trunk(x)
    mu = backbone.mu_head(pooled)
    s = backbone.sigma_head(pooled)
    sigma = exp(clamp(s, -SIGMA_LOG_BOUND, SIGMA_LOG_BOUND))
    return FeatureBundle(mu, sigma)


class ClassifierHead(Module):
    """Rows of ``weight`` are the per-class classifier vectors."""

    def __init__(self, feature_dim: int, num_classes: int, rng: np.random.Generator,
                 bias: bool = False, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / feature_dim), size=(num_classes, feature_dim)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, features: Tensor) -> Tensor:
        return classify(features, self)


def classify(features: Tensor, head: ClassifierHead) -> Tensor:
    return linear_forward(features, head.weight, head.bias)


class Network(Module):
    """Backbone plus classifier head; ``head`` is the second parameter group."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config, rng, dtype)
        self.head = ClassifierHead(config.feature_dim, config.num_classes, rng,
                                   bias=config.head_bias, dtype=dtype)

    def features(self, x: Tensor) -> FeatureBundle:
        return self.backbone(x)

    def forward(self, x: Tensor) -> Tensor:
        return classify(self.backbone(x).mu, self.head)

    def descriptor(self) -> dict:
        return {"name": "mini-resnet-cbam" if self.config.cbam_on else "mini-resnet",
                "config": json.loads(self.config.to_json())}


def build_backbone(config: BackboneConfig, rng, dtype=np.float32):
    """Return ``(network, descriptor)``; parameters depend only on config and rng state."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    net = Network(config, rng, dtype)
    return net, net.descriptor()
