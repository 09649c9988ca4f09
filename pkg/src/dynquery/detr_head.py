"""Dense-attention transformer encoder and anchor-refining decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import DimensionError, Tensor, concat
from .nn import LayerNorm, Linear, MLP, Module, MultiHeadAttention, param
from .pyramid import FlattenedFeatures
from .query_select import AnchorBox, QuerySet, refine_anchors

__all__ = [
    "sine_embedding",
    "grid_positions",
    "EncoderLayer",
    "Encoder",
    "DecoderLayer",
    "Decoder",
    "LayerOutput",
    "DecoderOutput",
    "encode",
    "decode",
]


def sine_embedding(coords: Tensor | np.ndarray, dim: int) -> Tensor:
    """Sinusoidal code of each coordinate, ``[n, c] -> [n, dim]``.

    Every coordinate gets ``dim // c`` features: sin and cos at frequencies
    ``pi * 2**j``. Differentiable in ``coords``.
    """
    x = coords if isinstance(coords, Tensor) else Tensor(np.asarray(coords, dtype=np.float64))
    n, c = x.shape
    per = dim // c
    if per < 2 or per % 2 or per * c != dim:
        raise DimensionError(f"cannot split width {dim} into sin/cos pairs over {c} coordinates")
    freqs = np.pi * 2.0 ** np.arange(per // 2)
    parts = []
    for j in range(c):
        phase = x[:, j : j + 1] * freqs  # [n, per/2]
        parts += [phase.sin(), phase.cos()]
    return concat(parts, axis=1)


def grid_positions(level_shapes) -> np.ndarray:
    """Normalised ``(x, y)`` cell centres for every flattened position."""
    rows = []
    for h, w in level_shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        rows.append(np.stack([xs.ravel(), ys.ravel()], axis=1))
    return np.concatenate(rows, axis=0)


class EncoderLayer(Module):
    """Pre-norm self-attention + FFN, both residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ffn_dim: int | None = None, zero_residual: bool = False):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, zero_out=zero_residual)
        self.norm2 = LayerNorm(dim)
        self.ffn = MLP([dim, ffn_dim or 2 * dim, dim], rng, zero_last=zero_residual)

    def forward(self, x: Tensor, pos: Tensor | None = None) -> Tensor:
        h = self.norm1(x)
        qk = h if pos is None else h + pos
        x = x + self.attn(qk, qk, h)
        return x + self.ffn(self.norm2(x))


class Encoder(Module):
    def __init__(self, dim: int, heads: int, num_layers: int, num_levels: int, rng: np.random.Generator, zero_residual: bool = False):
        if num_layers < 1:
            raise ValueError("encoder needs at least one layer")
        self.dim = dim
        self.layers = [EncoderLayer(dim, heads, rng, zero_residual=zero_residual) for _ in range(num_layers)]
        self.level_embed = param(rng.standard_normal((num_levels, dim)) * 0.1)

    def positions(self, flat: FlattenedFeatures) -> Tensor:
        """Sine code of cell centres plus a learned per-level offset, ``[length, d]``."""
        pos = sine_embedding(grid_positions(flat.level_shapes), self.dim)
        levels = np.concatenate([np.full(e - s, i) for i, (s, e) in enumerate(flat.level_ranges)])
        return pos + self.level_embed.take_rows(levels)

    def forward(self, flat: FlattenedFeatures) -> FlattenedFeatures:
        pos = self.positions(flat)
        x = flat.tokens()
        for layer in self.layers:
            x = layer(x, pos)
        return FlattenedFeatures(seq=x.T, level_ranges=list(flat.level_ranges), level_shapes=list(flat.level_shapes))


def encode(flat: FlattenedFeatures, encoder: Encoder) -> FlattenedFeatures:
    return encoder(flat)


@dataclass
class LayerOutput:
    class_logits: Tensor  # [k, m]
    boxes: Tensor  # [k, 4] normalised (cx, cy, w, h)

    @property
    def anchor_boxes(self) -> list[AnchorBox]:
        return [AnchorBox(*row) for row in self.boxes.data]


@dataclass
class DecoderOutput:
    per_layer: list[LayerOutput]

    @property
    def final(self) -> LayerOutput:
        return self.per_layer[-1]

    def __len__(self) -> int:
        return len(self.per_layer)


class DecoderLayer(Module):
    def __init__(self, dim: int, heads: int, num_classes: int, rng: np.random.Generator, prior_prob: float = 0.01):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.ffn = MLP([dim, 2 * dim, dim], rng)
        self.norm_out = LayerNorm(dim)
        self.class_head = Linear(dim, num_classes, rng)
        self.class_head.bias.data[:] = -np.log((1.0 - prior_prob) / prior_prob)
        self.box_head = MLP([dim, dim, 4], rng, zero_last=True)

    def forward(self, q: Tensor, qpos: Tensor, anchors: Tensor, memory: Tensor, mem_pos: Tensor) -> tuple[Tensor, LayerOutput]:
        h = self.norm1(q)
        q = q + self.self_attn(h + qpos, h + qpos, h)
        h = self.norm2(q)
        q = q + self.cross_attn(h + qpos, memory + mem_pos, memory)
        q = q + self.ffn(self.norm3(q))
        out = self.norm_out(q)
        boxes = refine_anchors(anchors, self.box_head(out))
        return q, LayerOutput(self.class_head(out), boxes)


class Decoder(Module):
    """Each layer refines the previous layer's boxes in logit space; the
    sine code of the current anchors is the query positional signal."""

    def __init__(self, dim: int, heads: int, num_layers: int, num_classes: int, rng: np.random.Generator, prior_prob: float = 0.01):
        if num_layers < 1:
            raise ValueError("decoder needs at least one layer")
        self.dim = dim
        self.layers = [DecoderLayer(dim, heads, num_classes, rng, prior_prob) for _ in range(num_layers)]
        self.pos_mlp = MLP([dim, dim, dim], rng)

    def forward(self, queries: QuerySet, memory: FlattenedFeatures, mem_pos: Tensor) -> DecoderOutput:
        if len(queries) == 0:
            raise ValueError("decoder received an empty query set")
        if memory.length == 0:
            raise ValueError("decoder memory is empty")
        q = queries.content
        anchors = queries.anchors
        mem = memory.tokens()
        outputs = []
        for layer in self.layers:
            qpos = self.pos_mlp(sine_embedding(anchors, self.dim))
            q, out = layer(q, qpos, anchors, mem, mem_pos)
            outputs.append(out)
            anchors = out.boxes
        return DecoderOutput(outputs)


def decode(queries: QuerySet, memory: FlattenedFeatures, decoder: Decoder, mem_pos: Tensor | None = None) -> DecoderOutput:
    if mem_pos is None:
        mem_pos = sine_embedding(grid_positions(memory.level_shapes), decoder.dim)
    return decoder(queries, memory, mem_pos)
