"""Categorical counting: density extraction, count-level classification and
the mapping from count levels to decoder query budgets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import DimensionError, Tensor
from .nn import Conv2d, MLP, Module
from .pyramid import PyramidLevel

__all__ = [
    "ConfigError",
    "CountLevel",
    "LevelThresholds",
    "QueryBudget",
    "DensityMap",
    "CountResult",
    "DEFAULT_THRESHOLDS",
    "FIVE_LEVEL_THRESHOLDS",
    "DEFAULT_BUDGETS",
    "DESK_BUDGETS",
    "count_to_level",
    "level_to_budget",
    "derive_thresholds",
    "counting_loss",
    "regression_loss",
    "classify_count",
    "DensityExtractor",
    "CountingHead",
    "CountingModule",
]


class ConfigError(ValueError):
    """Inconsistent tables or hyperparameters."""


@dataclass(frozen=True)
class LevelThresholds:
    """Ascending count cut-offs separating ``len(cuts) + 1`` levels.

    With ``upper_inclusive`` a count equal to a cut belongs to the lower
    level (``n <= 10`` is level 0); otherwise it belongs to the upper one
    (``n < cut`` is the lower level).
    """

    cuts: tuple[float, ...]
    upper_inclusive: bool = True

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        object.__setattr__(self, "cuts", cuts)
        if not cuts:
            raise ConfigError("at least one cut is required")
        if any(c <= 0 for c in cuts):
            raise ConfigError(f"cuts must be positive: {cuts}")
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ConfigError(f"cuts must be strictly ascending: {cuts}")

    @property
    def num_levels(self) -> int:
        return len(self.cuts) + 1

    def scaled(self, factor: float) -> "LevelThresholds":
        return LevelThresholds(tuple(c * factor for c in self.cuts), self.upper_inclusive)


@dataclass(frozen=True, order=True)
class CountLevel:
    index: int
    num_levels: int = 4
    lower: float = 0.0
    upper: float = math.inf

    @property
    def name(self) -> str:
        return f"L{self.index}"


@dataclass(frozen=True)
class QueryBudget:
    k: int


@dataclass
class DensityMap:
    map: Tensor  # [d, h_1, w_1]


@dataclass
class CountResult:
    density: DensityMap
    logits: Tensor
    level: CountLevel
    budget: QueryBudget
    predicted_count: float | None = None


DEFAULT_THRESHOLDS = LevelThresholds((10, 100, 500))
FIVE_LEVEL_THRESHOLDS = LevelThresholds((10, 100, 500, 900))
DEFAULT_BUDGETS = (300, 500, 900, 1500)
DESK_BUDGETS = (30, 50, 90, 150)


def level_from_index(index: int, thresholds: LevelThresholds) -> CountLevel:
    n_levels = thresholds.num_levels
    if not 0 <= index < n_levels:
        raise ConfigError(f"level index {index} outside [0, {n_levels})")
    lower = 0.0 if index == 0 else thresholds.cuts[index - 1]
    upper = math.inf if index == n_levels - 1 else thresholds.cuts[index]
    return CountLevel(index=index, num_levels=n_levels, lower=lower, upper=upper)


def count_to_level(n: float, thresholds: LevelThresholds = DEFAULT_THRESHOLDS) -> CountLevel:
    if n < 0:
        raise ValueError(f"instance count must be non-negative, got {n}")
    index = 0
    for cut in thresholds.cuts:
        if (n <= cut) if thresholds.upper_inclusive else (n < cut):
            break
        index += 1
    return level_from_index(index, thresholds)


def level_to_budget(level: CountLevel, budgets: Sequence[int] = DEFAULT_BUDGETS) -> QueryBudget:
    budgets = tuple(int(b) for b in budgets)
    if len(budgets) != level.num_levels:
        raise ConfigError(f"{len(budgets)} budgets given for {level.num_levels} count levels")
    if any(b <= 0 for b in budgets) or any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ConfigError(f"budgets must be positive and strictly ascending: {budgets}")
    return QueryBudget(budgets[level.index])


def derive_thresholds(counts: Sequence[int], spread: str = "std") -> LevelThresholds:
    """Cut-offs at mean - s, mean, mean + s of the per-image counts.

    ``spread="std"`` uses the population standard deviation; ``"var"`` uses
    the variance literally. Cuts are clamped to >= 1 and forced at least 1
    apart so four non-empty, ordered classes always exist. Classes follow
    ``count < cut`` semantics.
    """
    arr = np.asarray(counts, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("derive_thresholds needs at least one count")
    mean = float(arr.mean())
    if spread == "std":
        s = float(arr.std())
    elif spread == "var":
        s = float(arr.var())
    else:
        raise ValueError(f"spread must be 'std' or 'var', got {spread!r}")
    cuts = [min(mean - s, mean - 1.0), mean, max(mean + s, mean + 1.0)]
    cuts = [max(c, 1.0) for c in cuts]
    for i in range(1, len(cuts)):
        cuts[i] = max(cuts[i], cuts[i - 1] + 1.0)
    return LevelThresholds(tuple(cuts), upper_inclusive=False)


def classify_count(logits: Tensor, thresholds: LevelThresholds = DEFAULT_THRESHOLDS) -> CountLevel:
    """Arg-max level; ``np.argmax`` picks the lowest index among ties."""
    values = logits.data.reshape(-1)
    if values.size != thresholds.num_levels:
        raise DimensionError(f"{values.size} logits for {thresholds.num_levels} levels")
    return level_from_index(int(np.argmax(values)), thresholds)


def counting_loss(logits: Tensor, true_level: CountLevel | int) -> Tensor:
    index = true_level.index if isinstance(true_level, CountLevel) else int(true_level)
    return -logits.reshape(-1).log_softmax()[index]


def regression_loss(prediction: Tensor, true_count: float) -> Tensor:
    return (prediction.reshape(()) - float(true_count)).abs()


class DensityExtractor(Module):
    """Shape-preserving dilated 3x3 convolutions, ReLU between layers."""

    def __init__(self, dim: int, rng: np.random.Generator, dilations: Sequence[int] = (1, 2, 3)):
        self.convs = [Conv2d(dim, dim, 3, rng, padding=r, dilation=r) for r in dilations]

    def forward(self, s1: Tensor) -> DensityMap:
        if s1.ndim != 3:
            raise DimensionError(f"density extractor expects [d, h, w], got {s1.shape}")
        x = s1.reshape(1, *s1.shape)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = x.relu()
        return DensityMap(map=x.reshape(x.shape[1:]))


class CountingHead(Module):
    """Spatial average pool followed by two linear layers.

    In ``classification`` mode the output is one logit per level; in
    ``regression`` mode a single predicted instance count.
    """

    def __init__(self, dim: int, num_levels: int, rng: np.random.Generator, mode: str = "classification"):
        if mode not in ("classification", "regression"):
            raise ConfigError(f"unknown counting mode {mode!r}")
        self.mode = mode
        out = num_levels if mode == "classification" else 1
        self.mlp = MLP([dim, 4 * dim, out], rng)

    def forward(self, density: DensityMap) -> Tensor:
        pooled = density.map.mean(axis=(1, 2))
        return self.mlp(pooled)


class CountingModule(Module):
    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        thresholds: LevelThresholds = DEFAULT_THRESHOLDS,
        budgets: Sequence[int] = DEFAULT_BUDGETS,
        mode: str = "classification",
        dilations: Sequence[int] = (1, 2, 3),
    ):
        self.thresholds = thresholds
        self.budgets = tuple(budgets)
        if len(self.budgets) != thresholds.num_levels:
            raise ConfigError(f"{len(self.budgets)} budgets for {thresholds.num_levels} levels")
        self.extractor = DensityExtractor(dim, rng, dilations)
        self.head = CountingHead(dim, thresholds.num_levels, rng, mode)

    @property
    def mode(self) -> str:
        return self.head.mode

    def forward(self, s1: PyramidLevel) -> CountResult:
        density = self.extractor(s1.map)
        out = self.head(density)
        if self.mode == "classification":
            level = classify_count(out, self.thresholds)
            predicted = None
        else:
            predicted = float(max(0.0, np.rint(out.data.reshape(()))))
            level = count_to_level(predicted, self.thresholds)
        return CountResult(density, out, level, level_to_budget(level, self.budgets), predicted)
