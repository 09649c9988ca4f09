"""Experiment harness: configuration, training, evaluation, ablations, reports."""

from .ablate import AXES, AblationResult, ablate
from .config import ExperimentConfig, load_config, save_config
from .evaluate import EvalResult, evaluate_detector, evaluate_run
from .report import render_report
from .train import RunRecord, TrainingDiverged, train

__all__ = [
    "AXES",
    "AblationResult",
    "ablate",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "EvalResult",
    "evaluate_detector",
    "evaluate_run",
    "render_report",
    "RunRecord",
    "TrainingDiverged",
    "train",
]
