"""Dynamic query selection: score every position of the enhanced pyramid,
keep the top-K by class confidence, and turn them into decoder queries with
content vectors and refined anchor boxes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, _sigmoid
from .nn import Linear, MLP, Module
from .pyramid import FlattenedFeatures, PyramidLevel, flatten_levels

__all__ = [
    "BudgetError",
    "AnchorBox",
    "Query",
    "QuerySet",
    "score_positions",
    "selection_keys",
    "select_topk",
    "anchor_prior",
    "anchor_priors",
    "refine_anchors",
    "make_queries",
    "QuerySelector",
]

logger = logging.getLogger(__name__)

LOGIT_LIMIT = 30.0


class BudgetError(ValueError):
    """Requested more queries than there are candidate positions."""


@dataclass(frozen=True)
class AnchorBox:
    """Normalised ``(cx, cy, w, h)`` box."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"anchor centre ({self.x}, {self.y}) outside [0, 1]^2")
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValueError(f"anchor extent ({self.w}, {self.h}) must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])


@dataclass(frozen=True)
class Query:
    content: np.ndarray
    anchor: AnchorBox
    source: tuple[int, int, int]


@dataclass
class QuerySet:
    content: Tensor  # [k, d]
    anchors: Tensor  # [k, 4], refined, (cx, cy, w, h)
    priors: np.ndarray  # [k, 4]
    provenance: list[tuple[int, int, int]]
    indices: np.ndarray  # flat sequence indices, descending selection key
    budget: int

    def __len__(self) -> int:
        return self.content.shape[0]

    @property
    def queries(self) -> list[Query]:
        return [
            Query(self.content.data[i], AnchorBox(*self.anchors.data[i]), self.provenance[i])
            for i in range(len(self))
        ]


def score_positions(f_flat: FlattenedFeatures, ffn: MLP) -> Tensor:
    """Per-class logits ``[m, length]`` for every flattened position."""
    return ffn(f_flat.tokens()).T


def selection_keys(scores: Tensor | np.ndarray) -> np.ndarray:
    """Max over classes of the per-class sigmoid probability."""
    logits = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    return _sigmoid(logits.max(axis=0))


def topk_order(keys: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest keys, descending; ties go to the lower index."""
    keys = np.asarray(keys, dtype=np.float64)
    if not 1 <= k <= keys.size:
        raise BudgetError(f"cannot select {k} of {keys.size} positions")
    order = np.lexsort((np.arange(keys.size), -keys))
    return order[:k]


def select_topk(scores: Tensor | np.ndarray, f_flat: FlattenedFeatures, k: int) -> tuple[Tensor, np.ndarray, list[tuple[int, int, int]]]:
    """Gather the top-``k`` feature rows, their flat indices and provenance."""
    keys = selection_keys(scores)
    if keys.size != f_flat.length:
        raise BudgetError(f"{keys.size} scores for a sequence of length {f_flat.length}")
    idx = topk_order(keys, k)
    rows = f_flat.tokens().take_rows(idx)
    return rows, idx, [f_flat.position_of(int(i)) for i in idx]


def anchor_prior(provenance: tuple[int, int, int], level_shapes, base_scale: float = 0.05) -> AnchorBox:
    level, y, x = provenance
    if not 1 <= level <= len(level_shapes):
        raise IndexError(f"level {level} outside 1..{len(level_shapes)}")
    h, w = level_shapes[level - 1]
    if not (0 <= y < h and 0 <= x < w):
        raise IndexError(f"cell ({y}, {x}) outside level {level} of shape {h}x{w}")
    extent = base_scale * 2.0 ** (level - 1)
    return AnchorBox((x + 0.5) / w, (y + 0.5) / h, extent, extent)


def anchor_priors(level_shapes, base_scale: float = 0.05) -> np.ndarray:
    """Priors for every flattened position, ``[length, 4]``, in sequence order."""
    rows = []
    for level, (h, w) in enumerate(level_shapes, start=1):
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        extent = base_scale * 2.0 ** (level - 1)
        block = np.stack(
            [(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h, np.full(h * w, extent), np.full(h * w, extent)],
            axis=1,
        )
        rows.append(block)
    return np.concatenate(rows, axis=0)


def refine_anchors(priors: np.ndarray | Tensor, bias: Tensor) -> Tensor:
    """``sigmoid(logit(prior) + bias)`` per coordinate; always inside (0, 1).

    The logit is clipped to +-30 so extents never underflow to zero.
    """
    base = priors if isinstance(priors, Tensor) else Tensor(priors)
    return (base.inverse_sigmoid() + bias).clip(-LOGIT_LIMIT, LOGIT_LIMIT).sigmoid()


def make_queries(
    f_select: Tensor,
    priors: np.ndarray,
    content_proj: Linear,
    bias_ffn: MLP,
    provenance=None,
    indices=None,
) -> QuerySet:
    k = f_select.shape[0]
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 4)
    if priors.shape[0] != k:
        raise BudgetError(f"{k} selected features but {priors.shape[0]} priors")
    content = content_proj(f_select)
    anchors = refine_anchors(priors, bias_ffn(f_select))
    return QuerySet(
        content=content,
        anchors=anchors,
        priors=priors,
        provenance=list(provenance) if provenance is not None else [],
        indices=np.asarray(indices if indices is not None else np.arange(k)),
        budget=k,
    )


class QuerySelector(Module):
    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator, base_scale: float = 0.05, prior_prob: float = 0.01):
        self.base_scale = base_scale
        self.score_ffn = MLP([dim, dim, num_classes], rng)
        self.score_ffn.layers[-1].bias.data[:] = -np.log((1.0 - prior_prob) / prior_prob)
        self.content_proj = Linear(dim, dim, rng)
        self.bias_ffn = MLP([dim, dim, 4], rng, zero_last=True)

    def forward(self, features: list[PyramidLevel] | list[Tensor], k: int) -> tuple[QuerySet, Tensor, FlattenedFeatures]:
        """Select ``k`` queries; returns the set, all-position scores and the flat features."""
        if features and isinstance(features[0], Tensor):
            features = [PyramidLevel(i + 1, f, 2 ** (i + 1)) for i, f in enumerate(features)]
        flat = flatten_levels(features)
        scores = score_positions(flat, self.score_ffn)
        if k > flat.length:
            logger.warning("query budget %d exceeds %d positions; clamping", k, flat.length)
            k = flat.length
        rows, idx, prov = select_topk(scores, flat, k)
        priors = anchor_priors(flat.level_shapes, self.base_scale)[idx]
        qs = make_queries(rows, priors, self.content_proj, self.bias_ffn, prov, idx)
        return qs, scores, flat

    def all_proposals(self, flat: FlattenedFeatures) -> Tensor:
        """Refined anchors for every position, ``[length, 4]``."""
        priors = anchor_priors(flat.level_shapes, self.base_scale)
        return refine_anchors(priors, self.bias_ffn(flat.tokens()))

