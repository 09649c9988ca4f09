"""Tiny-object detection with counting-guided, per-image query budgets,
built on a small numpy autograd kernel."""

from .autograd import DimensionError, Tensor, no_grad
from .counting import ConfigError, CountLevel, LevelThresholds, count_to_level, level_to_budget
from .detector import Detector, DetectorConfig, to_detections
from .matching import GroundTruth, LossBreakdown, LossWeights, hungarian, total_loss
from .metrics import Annotations, Detections, EvalConfig, MetricReport, evaluate
from .synth import Dataset, SceneSpec, generate, load, save

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "Tensor",
    "no_grad",
    "ConfigError",
    "CountLevel",
    "LevelThresholds",
    "count_to_level",
    "level_to_budget",
    "Detector",
    "DetectorConfig",
    "to_detections",
    "GroundTruth",
    "LossBreakdown",
    "LossWeights",
    "hungarian",
    "total_loss",
    "Annotations",
    "Detections",
    "EvalConfig",
    "MetricReport",
    "evaluate",
    "Dataset",
    "SceneSpec",
    "generate",
    "load",
    "save",
]
