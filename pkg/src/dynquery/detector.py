"""End-to-end detector: backbone, encoder, counting, counting-guided
enhancement, dynamic query selection and the refining decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .cgfe import CGFE, AttentionMaps
from .counting import (
    DESK_BUDGETS,
    ConfigError,
    CountingModule,
    CountResult,
    LevelThresholds,
    count_to_level,
    level_to_budget,
)
from .detr_head import Decoder, DecoderOutput, Encoder, grid_positions, sine_embedding
from .metrics import Detections
from .pyramid import Backbone, BackboneConfig, FlattenedFeatures, PyramidLevel, flatten_levels, unflatten_levels
from .query_select import QuerySelector, QuerySet

__all__ = ["DetectorConfig", "DetectorOutput", "Detector", "to_detections"]


@dataclass(frozen=True)
class DetectorConfig:
    dim: int = 32
    heads: int = 4
    pyramid_levels: int = 3
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_classes: int = 3
    thresholds: tuple[float, ...] = (1.0, 10.0, 50.0)
    budgets: tuple[int, ...] = DESK_BUDGETS
    counting_mode: str = "classification"
    dilations: tuple[int, ...] = (1, 2, 3)
    reduction: int = 4
    base_scale: float = 0.05
    prior_prob: float = 0.01
    use_counting: bool = True
    use_cgfe: bool = True

    def __post_init__(self):
        if len(self.budgets) != len(self.thresholds) + 1:
            raise ConfigError(f"{len(self.budgets)} budgets for {len(self.thresholds) + 1} count levels")
        if self.use_cgfe and not self.use_counting:
            raise ConfigError("feature enhancement needs the counting module")

    @property
    def level_thresholds(self) -> LevelThresholds:
        return LevelThresholds(tuple(self.thresholds))


@dataclass
class DetectorOutput:
    k: int
    queries: QuerySet
    scores: Tensor  # [m, N] selection logits
    flat: FlattenedFeatures  # enhanced, flattened features fed to selection
    decoder: DecoderOutput
    count: CountResult | None = None
    attention: AttentionMaps | None = None
    extras: dict = field(default_factory=dict)


class Detector:
    """Container of the sub-networks plus the forward wiring.

    Every sub-network is always built so checkpoints share one layout; the
    ``use_*`` flags only bypass parts of the forward pass.
    """

    def __init__(self, config: DetectorConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.backbone = Backbone(BackboneConfig(dim=c.dim, num_levels=c.pyramid_levels), rng)
        self.encoder = Encoder(c.dim, c.heads, c.encoder_layers, c.pyramid_levels, rng)
        self.counting = CountingModule(c.dim, rng, c.level_thresholds, c.budgets, c.counting_mode, c.dilations)
        self.cgfe = CGFE(c.dim, c.pyramid_levels, rng, c.reduction)
        self.selector = QuerySelector(c.dim, c.num_classes, rng, c.base_scale, c.prior_prob)
        self.decoder = Decoder(c.dim, c.heads, c.decoder_layers, c.num_classes, rng, c.prior_prob)

    # parameter groups -------------------------------------------------
    def modules(self) -> dict:
        return {
            "backbone": self.backbone,
            "encoder": self.encoder,
            "counting": self.counting,
            "cgfe": self.cgfe,
            "selector": self.selector,
            "decoder": self.decoder,
        }

    def named_parameters(self):
        for name, mod in self.modules().items():
            yield from mod.named_parameters(name + ".")

    def parameters(self, groups: Sequence[str] | None = None) -> list[Tensor]:
        mods = self.modules()
        names = list(mods) if groups is None else list(groups)
        return [p for n in names for p in mods[n].parameters()]

    def counting_parameters(self) -> list[Tensor]:
        return self.parameters(["backbone", "encoder", "counting"])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, mod in self.modules().items():
            prefix = name + "."
            mod.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # forward ----------------------------------------------------------
    def encode(self, image: Tensor) -> tuple[list[PyramidLevel], FlattenedFeatures]:
        """Encoder output both as per-level maps and as the flat sequence."""
        levels = self.backbone(image)
        memory = self.encoder(flatten_levels(levels))
        return unflatten_levels(memory), memory

    def count(self, image: Tensor) -> CountResult:
        emsv, _ = self.encode(image)
        return self.counting(emsv[0])

    def budget_for(self, count: CountResult | None, fixed_k: int | None) -> int:
        if fixed_k is not None:
            return int(fixed_k)
        if count is None:
            raise ConfigError("dynamic query budget needs the counting module; set a fixed k")
        return count.budget.k

    def __call__(self, image: Tensor, fixed_k: int | None = None) -> DetectorOutput:
        c = self.config
        emsv, memory = self.encode(image)
        count = self.counting(emsv[0]) if c.use_counting else None
        attention = None
        if c.use_cgfe:
            enhanced, attention = self.cgfe(count.density, emsv)
            levels = [PyramidLevel(i + 1, f, 2 ** (i + 1)) for i, f in enumerate(enhanced.levels)]
        else:
            levels = emsv
        k = self.budget_for(count, fixed_k)
        queries, scores, flat = self.selector(levels, k)
        mem_pos = sine_embedding(grid_positions(memory.level_shapes), c.dim)
        out = self.decoder(queries, memory, mem_pos)
        return DetectorOutput(len(queries), queries, scores, flat, out, count, attention)

    def true_budget(self, n_objects: int) -> int:
        return level_to_budget(count_to_level(n_objects, self.config.level_thresholds), self.config.budgets).k


def to_detections(output: DetectorOutput, image_size: int) -> Detections:
    """One detection per query: its best class and that class's probability."""
    final = output.decoder.final
    probs = final.class_logits.sigmoid().data
    labels = probs.argmax(axis=1)
    scores = probs[np.arange(len(labels)), labels]
    b = final.boxes.data * image_size
    xywh = np.concatenate([b[:, :2] - b[:, 2:] / 2, b[:, 2:]], axis=1)
    return Detections(xywh, scores, labels)
