"""Residual CNN feature extractor built from bottleneck blocks.

Layout: a 7x7/2 convolution stem with batch norm, ReLU and 3x3/2 max
pooling, then four stages of bottleneck blocks. The first block of stages
2-4 downsamples with stride 2 in its 3x3 convolution and a 1x1/2 projection
shortcut. Blocks expand their internal width by :data:`EXPANSION`, so the
feature map has ``d = 4 * stage_widths[-1]`` channels.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

EXPANSION = 4


@dataclass(frozen=True)
class BackboneConfig:
    block_counts: tuple[int, ...] = (3, 4, 6, 3)
    stage_widths: tuple[int, ...] = (64, 128, 256, 512)
    stem_channels: int = 64
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "block_counts", tuple(int(k) for k in self.block_counts))
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if len(self.block_counts) != 4 or any(k < 1 for k in self.block_counts):
            raise ValueError(f"block_counts must be 4 positive ints, got {self.block_counts}")
        if len(self.stage_widths) != 4 or any(w < 1 for w in self.stage_widths):
            raise ValueError(f"stage_widths must be 4 positive ints, got {self.stage_widths}")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ValueError(f"stage_widths must be non-decreasing, got {self.stage_widths}")
        if self.stem_channels < 1 or self.input_channels < 1:
            raise ValueError("stem_channels and input_channels must be positive")

    @property
    def feature_dim(self) -> int:
        return EXPANSION * self.stage_widths[-1]

    @property
    def num_blocks(self) -> int:
        return sum(self.block_counts)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def resnet50_config() -> BackboneConfig:
    return BackboneConfig((3, 4, 6, 3))


def resnet101_config() -> BackboneConfig:
    return BackboneConfig((3, 4, 23, 3))


def resnet152_config() -> BackboneConfig:
    return BackboneConfig((3, 8, 36, 3))


def desk_config() -> BackboneConfig:
    """One block per stage at 1/8 width; trains on a laptop CPU in minutes."""
    return BackboneConfig((1, 1, 1, 1), (8, 16, 32, 64), stem_channels=16)


class Conv:
    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int, padding: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True, name=f"{name}.weight")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding)

    def parameters(self) -> Iterator[Tensor]:
        yield self.weight

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())


class BatchNorm:
    def __init__(self, name: str, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.name = name
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, training)

    def parameters(self) -> Iterator[Tensor]:
        yield self.gamma
        yield self.beta

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{self.name}.running_mean", self.running_mean
        yield f"{self.name}.running_var", self.running_var


class Bottleneck:
    """1x1 -> 3x3 -> 1x1 convolutions with batch norm, plus a skip path."""

    def __init__(self, name: str, cin: int, width: int, stride: int, rng: np.random.Generator):
        cout = EXPANSION * width
        self.in_channels = cin
        self.out_channels = cout
        self.conv1 = Conv(f"{name}.conv1", cin, width, 1, 1, 0, rng)
        self.bn1 = BatchNorm(f"{name}.bn1", width)
        self.conv2 = Conv(f"{name}.conv2", width, width, 3, stride, 1, rng)
        self.bn2 = BatchNorm(f"{name}.bn2", width)
        self.conv3 = Conv(f"{name}.conv3", width, cout, 1, 1, 0, rng)
        self.bn3 = BatchNorm(f"{name}.bn3", cout)
        if stride != 1 or cin != cout:
            self.proj = Conv(f"{name}.proj", cin, cout, 1, stride, 0, rng)
            self.proj_bn = BatchNorm(f"{name}.proj_bn", cout)
        else:
            self.proj = None
            self.proj_bn = None

    def layers(self):
        layers = [self.conv1, self.bn1, self.conv2, self.bn2, self.conv3, self.bn3]
        if self.proj is not None:
            layers += [self.proj, self.proj_bn]
        return layers

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"block expects {self.in_channels} input channels, got {x.shape[1]}")
        out = T.relu(self.bn1(self.conv1(x), training))
        out = T.relu(self.bn2(self.conv2(out), training))
        out = self.bn3(self.conv3(out), training)
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x), training)
        return T.relu(out + shortcut)


class Backbone:
    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.stem_conv = Conv("stem.conv", config.input_channels, config.stem_channels, 7, 2, 3, rng)
        self.stem_bn = BatchNorm("stem.bn", config.stem_channels)
        self.stages: list[list[Bottleneck]] = []
        cin = config.stem_channels
        for s, (count, width) in enumerate(zip(config.block_counts, config.stage_widths)):
            stage = []
            for b in range(count):
                stride = 2 if (b == 0 and s > 0) else 1
                block = Bottleneck(f"layer{s + 1}.{b}", cin, width, stride, rng)
                stage.append(block)
                cin = block.out_channels
            self.stages.append(stage)

    @property
    def blocks(self) -> list[Bottleneck]:
        return [b for stage in self.stages for b in stage]

    def _layers(self):
        yield self.stem_conv
        yield self.stem_bn
        for block in self.blocks:
            yield from block.layers()

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((p.name, p) for layer in self._layers() for p in layer.parameters())

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(b for layer in self._layers() for b in layer.buffers())

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return backbone_forward(self, x, training)


def build_backbone(config: BackboneConfig, seed: int = 0) -> Backbone:
    return Backbone(config, seed)


def feature_extent(size: int) -> int:
    """Spatial extent of the feature map for an input extent of ``size``."""
    size = T.conv_output_size(size, 7, 2, 3)
    size = T.conv_output_size(size, 3, 2, 1)
    for _ in range(3):
        size = T.conv_output_size(size, 3, 2, 1)
    return size


def min_input_size() -> int:
    size = 1
    while feature_extent(size) < 1:
        size += 1
    return size


def backbone_forward(model: Backbone, batch, training: bool = False) -> Tensor:
    """Map ``N x 3 x H x W`` images to ``N x d x h x w`` features."""
    x = T.as_tensor(batch)
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise ValueError(f"expected N x {cfg.input_channels} x H x W input, got {x.shape}")
    smallest = min_input_size()
    if min(x.shape[2:]) < smallest or min(feature_extent(s) for s in x.shape[2:]) < 1:
        raise ValueError(f"input {x.shape[2]}x{x.shape[3]} too small; minimum admissible size is {smallest}x{smallest}")
    out = T.relu(model.stem_bn(model.stem_conv(x), training))
    out = T.pool2d(out, "max", window=3, stride=2, padding=1)
    for block in model.blocks:
        out = block(out, training)
    return out
