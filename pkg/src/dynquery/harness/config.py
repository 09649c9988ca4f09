"""Experiment configuration: a nested JSON document mapped onto dataclasses."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..counting import DEFAULT_THRESHOLDS, DESK_BUDGETS, FIVE_LEVEL_THRESHOLDS, ConfigError
from ..detector import DetectorConfig
from ..matching import LossWeights
from ..metrics import AI_TOD_BUCKETS, EvalConfig
from ..synth import SceneSpec

__all__ = [
    "DataConfig",
    "ModelConfig",
    "LossConfig",
    "OptimConfig",
    "ScheduleConfig",
    "AblationConfig",
    "EvaluationConfig",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "FIVE_LEVEL_DESK_BUDGETS",
]

FIVE_LEVEL_DESK_BUDGETS = (30, 50, 90, 120, 150)


@dataclass
class DataConfig:
    image_size: int = 32
    count_scale: float = 0.1
    size_scale: float = 0.25
    size_range_px: tuple[float, float] = (1.5, 16.0)
    num_classes: int = 3
    noise_std: float = 0.03
    train_images: int = 2000
    val_images: int = 500
    seed: int = 0
    path: str | None = None
    # stratified evaluation set: forced counts in the sparse and dense bands
    eval_sparse_counts: tuple[int, int] = (1, 9)
    eval_dense_counts: tuple[int, int] = (91, 227)
    eval_images_per_band: int = 40

    def scene_spec(self, split: str = "train") -> SceneSpec:
        offsets = {"train": 0, "val": 1000, "eval": 2000}
        if split not in offsets:
            raise ConfigError(f"unknown split {split!r}")
        return SceneSpec(
            image_size=self.image_size,
            count_scale=self.count_scale,
            size_scale=self.size_scale,
            size_range_px=tuple(self.size_range_px),
            num_classes=self.num_classes,
            noise_std=self.noise_std,
            seed=self.seed + offsets[split],
        )


@dataclass
class ModelConfig:
    dim: int = 32
    heads: int = 4
    pyramid_levels: int = 3
    encoder_layers: int = 2
    decoder_layers: int = 2
    dilations: tuple[int, ...] = (1, 2, 3)
    reduction: int = 4
    base_scale: float = 0.05
    prior_prob: float = 0.01
    thresholds: tuple[float, ...] | None = None  # default: count table scaled by count_scale
    budgets: tuple[int, ...] | None = None  # default: desk table for the level count


@dataclass
class LossConfig:
    l1: float = 5.0
    giou: float = 2.0
    focal: float = 1.0
    counting: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0
    selection: bool = True

    def weights(self) -> LossWeights:
        return LossWeights(self.l1, self.giou, self.focal, self.counting, self.alpha, self.gamma)


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 3e-4
    momentum: float = 0.9
    clip: float = 1.0
    lr_schedule: str = "cosine"  # or "constant"


@dataclass
class ScheduleConfig:
    stage1_steps: int = 4000
    stage2_steps: int = 3000
    sampling_power: float = 0.5
    log_every: int = 100


@dataclass
class AblationConfig:
    fixed_k: int | None = None
    counting_mode: str = "classification"
    num_levels: int = 4
    disable_cgfe: bool = False
    disable_dqs: bool = False
    disable_counting: bool = False
    static_k: int = 90


@dataclass
class EvaluationConfig:
    max_detections: int = 1500
    lrp_iou: float = 0.5
    scale_buckets: dict[str, tuple[float, float]] | None = None  # default: benchmark buckets times size_scale


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        self.validate()

    # derived views ----------------------------------------------------
    def thresholds(self) -> tuple[float, ...]:
        if self.model.thresholds is not None:
            return tuple(float(t) for t in self.model.thresholds)
        base = DEFAULT_THRESHOLDS if self.ablation.num_levels == 4 else FIVE_LEVEL_THRESHOLDS
        return base.scaled(self.data.count_scale).cuts

    def budgets(self) -> tuple[int, ...]:
        if self.model.budgets is not None:
            return tuple(int(b) for b in self.model.budgets)
        return DESK_BUDGETS if self.ablation.num_levels == 4 else FIVE_LEVEL_DESK_BUDGETS

    def detector_config(self) -> DetectorConfig:
        m, a = self.model, self.ablation
        return DetectorConfig(
            dim=m.dim,
            heads=m.heads,
            pyramid_levels=m.pyramid_levels,
            encoder_layers=m.encoder_layers,
            decoder_layers=m.decoder_layers,
            num_classes=self.data.num_classes,
            thresholds=self.thresholds(),
            budgets=self.budgets(),
            counting_mode=a.counting_mode,
            dilations=tuple(m.dilations),
            reduction=m.reduction,
            base_scale=m.base_scale,
            prior_prob=m.prior_prob,
            use_counting=not a.disable_counting,
            use_cgfe=not (a.disable_cgfe or a.disable_counting),
        )

    def eval_config(self) -> EvalConfig:
        buckets = self.eval.scale_buckets
        if buckets is None:
            buckets = {k: (lo * self.data.size_scale, hi * self.data.size_scale) for k, (lo, hi) in AI_TOD_BUCKETS.items()}
        th = DEFAULT_THRESHOLDS.scaled(self.data.count_scale)
        return EvalConfig(
            max_detections=self.eval.max_detections,
            scale_buckets={k: tuple(v) for k, v in buckets.items()},
            density_thresholds=th,
            sparse_below=100 * self.data.count_scale,
            dense_above=900 * self.data.count_scale,
            lrp_iou=self.eval.lrp_iou,
        )

    def eval_k(self) -> int | None:
        """Fixed budget for this configuration, or ``None`` for dynamic."""
        a = self.ablation
        if a.fixed_k is not None:
            return a.fixed_k
        if a.disable_dqs or a.disable_counting:
            return a.static_k
        return None

    # validation -------------------------------------------------------
    def validate(self) -> None:
        a, s, d = self.ablation, self.schedule, self.data
        if a.counting_mode not in ("classification", "regression"):
            raise ConfigError(f"counting_mode must be classification or regression, got {a.counting_mode!r}")
        if a.num_levels not in (4, 5):
            raise ConfigError(f"num_levels must be 4 or 5, got {a.num_levels}")
        if s.stage1_steps < 0 or s.stage2_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.optim.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.optim.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.optim.lr_schedule!r}")
        if self.optim.name not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optim.name!r}")
        if a.fixed_k is not None and a.fixed_k < 1:
            raise ConfigError("fixed_k must be positive")
        if d.image_size % (2**self.model.pyramid_levels):
            raise ConfigError(f"image size {d.image_size} not divisible by 2^{self.model.pyramid_levels}")
        if self.model.dim % self.model.heads:
            raise ConfigError("model dim must be divisible by heads")
        self.detector_config()

    # serialisation ----------------------------------------------------
    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        kwargs = {}
        sections = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in doc.items():
            if key not in sections:
                raise ConfigError(f"unknown configuration key {key!r}")
            sub = _SECTION_TYPES.get(key)
            kwargs[key] = _build(sub, value, key) if sub else value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with per-section field overrides, e.g. ``ablation={"fixed_k": 90}``."""
        doc = self.to_dict()
        for name, values in sections.items():
            if isinstance(values, dict):
                doc[name] = {**doc[name], **values}
            else:
                doc[name] = values
        return ExperimentConfig.from_dict(doc)

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("output_dir", None)
        return _digest(doc)

    def arch_hash(self) -> str:
        return _digest(dataclasses.asdict(self.detector_config()))


_SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "schedule": ScheduleConfig,
    "ablation": AblationConfig,
    "eval": EvaluationConfig,
}

_TUPLE_FIELDS = {"size_range_px", "eval_sparse_counts", "eval_dense_counts", "dilations", "thresholds", "budgets"}


def _build(cls, value, name: str):
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(value) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    value = copy.deepcopy(value)
    for k in list(value):
        if k in _TUPLE_FIELDS and isinstance(value[k], list):
            value[k] = tuple(value[k])
    return cls(**value)


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=list).encode()).hexdigest()[:16]


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(doc)


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return p
