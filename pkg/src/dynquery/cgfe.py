"""Counting-guided feature enhancement.

Each encoder level ``S_i`` is gated first spatially, by a map computed from
the density features resized to that level, and then per channel:

    W_s = sigmoid(conv7x7([avg_c(conv1x1(F_c,i)), max_c(conv1x1(F_c,i))]))
    E   = W_s * S_i
    W_c = sigmoid(mlp(avg_hw(E)) + mlp(max_hw(E)))
    F_t = W_c * E
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import DimensionError, Tensor, concat
from .counting import ConfigError, DensityMap
from .nn import Conv2d, MLP, Module
from .ops import pool_channel, pool_spatial, resize_bilinear
from .pyramid import PyramidLevel

__all__ = [
    "AttentionMaps",
    "IntensifiedFeatures",
    "downsample_counting",
    "spatial_attention",
    "apply_spatial",
    "channel_attention",
    "apply_channel",
    "CGFE",
]


@dataclass
class AttentionMaps:
    spatial: list[Tensor]  # [1, h_i, w_i]
    channel: list[Tensor]  # [d, 1, 1]


@dataclass
class IntensifiedFeatures:
    levels: list[Tensor]  # [d, h_i, w_i]


def downsample_counting(f_c: DensityMap | Tensor, level_shapes, mixers: list[Conv2d]) -> list[Tensor]:
    """Bilinear resize of the density features to every level, then a 1x1 conv."""
    fmap = f_c.map if isinstance(f_c, DensityMap) else f_c
    if len(mixers) != len(level_shapes):
        raise DimensionError(f"{len(mixers)} mixers for {len(level_shapes)} levels")
    out = []
    for (h, w), conv in zip(level_shapes, mixers):
        resized = resize_bilinear(fmap, h, w)
        mixed = conv(resized.reshape(1, *resized.shape))
        out.append(mixed.reshape(mixed.shape[1:]))
    return out


def spatial_attention(f_ci: Tensor, reduce: Conv2d, conv7: Conv2d) -> Tensor:
    if f_ci.ndim != 3 or min(f_ci.shape[1:]) < 1:
        raise ValueError(f"spatial attention expects [d, h, w] with h, w >= 1, got {f_ci.shape}")
    x = reduce(f_ci.reshape(1, *f_ci.shape))
    pooled = concat([pool_channel(x, "avg"), pool_channel(x, "max")], axis=1)
    w_s = conv7(pooled).sigmoid()
    return w_s.reshape(w_s.shape[1:])


def apply_spatial(w_s: Tensor, s_i: Tensor) -> Tensor:
    if w_s.ndim != 3 or w_s.shape[0] != 1 or w_s.shape[1:] != s_i.shape[1:]:
        raise DimensionError(f"spatial gate {w_s.shape} does not fit feature {s_i.shape}")
    return w_s * s_i


def channel_attention(e_i: Tensor, mlp: MLP) -> Tensor:
    x = e_i.reshape(1, *e_i.shape)
    d = e_i.shape[0]
    avg = pool_spatial(x, "avg").reshape(d)
    mx = pool_spatial(x, "max").reshape(d)
    return (mlp(avg) + mlp(mx)).sigmoid().reshape(d, 1, 1)


def apply_channel(w_c: Tensor, e_i: Tensor) -> Tensor:
    if w_c.shape != (e_i.shape[0], 1, 1):
        raise DimensionError(f"channel gate {w_c.shape} does not fit feature {e_i.shape}")
    return w_c * e_i


class CGFE(Module):
    """Per-level spatial-then-channel gating driven by the density map."""

    def __init__(self, dim: int, num_levels: int, rng: np.random.Generator, reduction: int = 4):
        if reduction < 1 or dim % reduction:
            raise ConfigError(f"channel width {dim} not divisible by reduction ratio {reduction}")
        self.mixers = [Conv2d(dim, dim, 1, rng, gain=1.0) for _ in range(num_levels)]
        self.reducers = [Conv2d(dim, dim, 1, rng, gain=1.0) for _ in range(num_levels)]
        self.spatial_convs = [Conv2d(2, 1, 7, rng, padding=3, gain=1.0) for _ in range(num_levels)]
        self.channel_mlps = [MLP([dim, dim // reduction, dim], rng) for _ in range(num_levels)]

    def forward(self, density: DensityMap, levels: list[PyramidLevel]) -> tuple[IntensifiedFeatures, AttentionMaps]:
        if len(levels) != len(self.mixers):
            raise DimensionError(f"CGFE built for {len(self.mixers)} levels, got {len(levels)}")
        counting_feats = downsample_counting(density, [lvl.shape for lvl in levels], self.mixers)
        outs, spatial, channel = [], [], []
        for i, lvl in enumerate(levels):
            w_s = spatial_attention(counting_feats[i], self.reducers[i], self.spatial_convs[i])
            e_i = apply_spatial(w_s, lvl.map)
            w_c = channel_attention(e_i, self.channel_mlps[i])
            outs.append(apply_channel(w_c, e_i))
            spatial.append(w_s)
            channel.append(w_c)
        return IntensifiedFeatures(outs), AttentionMaps(spatial, channel)
