"""Toy multi-scale backbone and the flatten/unflatten bridge to token sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import DimensionError, Tensor, concat
from .nn import Conv2d, Module

__all__ = [
    "PyramidLevel",
    "FlattenedFeatures",
    "BackboneConfig",
    "Backbone",
    "extract_pyramid",
    "flatten_levels",
    "unflatten_levels",
]


@dataclass
class PyramidLevel:
    level_index: int
    map: Tensor  # [d, h, w]
    stride: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.map.shape[1], self.map.shape[2]


@dataclass
class FlattenedFeatures:
    """Concatenated per-level maps.

    ``seq`` is ``[d, sum(h_i * w_i)]``; ``level_ranges`` holds the half-open
    span of each level in sequence order.
    """

    seq: Tensor
    level_ranges: list[tuple[int, int]]
    level_shapes: list[tuple[int, int]]

    @property
    def length(self) -> int:
        return self.seq.shape[1]

    @property
    def dim(self) -> int:
        return self.seq.shape[0]

    def tokens(self) -> Tensor:
        """Sequence as ``[length, d]`` rows."""
        return self.seq.T

    def position_of(self, index: int) -> tuple[int, int, int]:
        """Map a sequence index to its 1-based ``(level, y, x)``."""
        for level, ((start, end), (h, w)) in enumerate(zip(self.level_ranges, self.level_shapes), start=1):
            if start <= index < end:
                y, x = divmod(index - start, w)
                return level, y, x
        raise IndexError(f"sequence index {index} out of range [0, {self.length})")

    def index_of(self, level: int, y: int, x: int) -> int:
        start, _ = self.level_ranges[level - 1]
        return start + y * self.level_shapes[level - 1][1] + x


@dataclass(frozen=True)
class BackboneConfig:
    dim: int = 32
    num_levels: int = 3
    in_channels: int = 3
    convs_per_level: int = 1


class Backbone(Module):
    """One stride-2 conv block per level; each block is conv -> ReLU."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.blocks = []
        c_in = config.in_channels
        for _ in range(config.num_levels):
            block = [Conv2d(c_in, config.dim, 3, rng, stride=2, padding=1)]
            block += [Conv2d(config.dim, config.dim, 3, rng, padding=1) for _ in range(config.convs_per_level - 1)]
            self.blocks.append(block)
            c_in = config.dim

    def forward(self, image: Tensor) -> list[PyramidLevel]:
        return extract_pyramid(image, self)


def extract_pyramid(image: Tensor, backbone: Backbone) -> list[PyramidLevel]:
    if image.ndim != 3:
        raise DimensionError(f"image must be [channels, H, W], got {image.shape}")
    cfg = backbone.config
    _, h, w = image.shape
    factor = 2**cfg.num_levels
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by 2^{cfg.num_levels}")
    x = image.reshape(1, *image.shape)
    levels = []
    for i, block in enumerate(backbone.blocks, start=1):
        for conv in block:
            x = conv(x).relu()
        levels.append(PyramidLevel(level_index=i, map=x.reshape(x.shape[1:]), stride=2**i))
    return levels


def flatten_levels(levels: list[PyramidLevel]) -> FlattenedFeatures:
    if not levels:
        raise ValueError("flatten_levels needs at least one level")
    d = levels[0].map.shape[0]
    parts, ranges, shapes = [], [], []
    start = 0
    for lvl in levels:
        c, h, w = lvl.map.shape
        if c != d:
            raise DimensionError(f"level {lvl.level_index} has {c} channels, expected {d}")
        parts.append(lvl.map.reshape(d, h * w))
        ranges.append((start, start + h * w))
        shapes.append((h, w))
        start += h * w
    seq = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    return FlattenedFeatures(seq=seq, level_ranges=ranges, level_shapes=shapes)


def unflatten_levels(flat: FlattenedFeatures, level_shapes: list[tuple[int, int]] | None = None) -> list[PyramidLevel]:
    shapes = flat.level_shapes if level_shapes is None else [tuple(s) for s in level_shapes]
    total = sum(h * w for h, w in shapes)
    if total != flat.length:
        raise DimensionError(f"level shapes cover {total} positions, sequence has {flat.length}")
    d = flat.dim
    levels = []
    start = 0
    for i, (h, w) in enumerate(shapes, start=1):
        part = flat.seq[:, start : start + h * w]
        levels.append(PyramidLevel(level_index=i, map=part.reshape(d, h, w), stride=2**i))
        start += h * w
    return levels
