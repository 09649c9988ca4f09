"""Checkpoint evaluation with per-count-level rows and density bands."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..autograd import Tensor, no_grad
from ..counting import count_to_level, level_from_index
from ..detector import Detector, to_detections
from ..metrics import Annotations, MetricReport, density_band, evaluate, lrp_components
from ..synth import Dataset
from .config import ExperimentConfig
from .train import load_checkpoint

__all__ = ["LevelRow", "BandRow", "EvalResult", "annotations_of", "run_inference", "evaluate_detector", "evaluate_run"]


@dataclass
class LevelRow:
    level: str
    count_range: str
    queries: str
    num_images: int
    ap: float
    ap50: float
    ap75: float
    ap_by_scale: dict[str, float]


@dataclass
class BandRow:
    band: str
    num_images: int
    ap: float
    lrp_fp: float
    lrp_fn: float


@dataclass
class EvalResult:
    mode: str  # "dynamic" or "fixed k=..."
    report: MetricReport
    levels: list[LevelRow]
    bands: list[BandRow]
    counting_accuracy: float | None
    budgets_used: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "report": self.report.as_dict(),
            "levels": [asdict(r) for r in self.levels],
            "bands": [asdict(b) for b in self.bands],
            "counting_accuracy": self.counting_accuracy,
            "budgets_used": list(self.budgets_used),
        }


def annotations_of(dataset: Dataset) -> list[Annotations]:
    return [Annotations(b, lab) for b, lab in zip(dataset.boxes, dataset.labels)]


def run_inference(detector: Detector, dataset: Dataset, fixed_k: int | None = None):
    """Detections, query budgets and predicted count levels for every image."""
    dets, ks, levels = [], [], []
    with no_grad():
        for i in range(len(dataset)):
            out = detector(Tensor(dataset.images[i]), fixed_k=fixed_k)
            dets.append(to_detections(out, dataset.spec.image_size))
            ks.append(out.k)
            levels.append(out.count.level.index if out.count is not None else -1)
    return dets, ks, levels


def _range_text(lower: float, upper: float) -> str:
    lo = f"{lower:g} < N" if lower > 0 else "N"
    return f"{lo} <= {upper:g}" if math.isfinite(upper) else f"{lower:g} < N"


def _budget_text(ks: list[int]) -> str:
    values = sorted(Counter(ks).items(), key=lambda kv: (-kv[1], kv[0]))
    if len(values) == 1:
        return str(values[0][0])
    return "/".join(str(k) for k, _ in values)


def evaluate_detector(
    detector: Detector,
    dataset: Dataset,
    config: ExperimentConfig,
    fixed_k: int | None = None,
) -> EvalResult:
    ecfg = config.eval_config()
    dets, ks, predicted = run_inference(detector, dataset, fixed_k)
    gts = annotations_of(dataset)
    report = evaluate(dets, gts, ecfg)
    th = detector.config.level_thresholds
    truth = [count_to_level(len(g), th).index for g in gts]
    rows = []
    for li in range(th.num_levels):
        idx = [i for i, t in enumerate(truth) if t == li]
        if not idx:
            continue
        lv = level_from_index(li, th)
        sub = evaluate([dets[i] for i in idx], [gts[i] for i in idx], ecfg)
        rows.append(
            LevelRow(lv.name, _range_text(lv.lower, lv.upper), _budget_text([ks[i] for i in idx]), len(idx), sub.ap, sub.ap50, sub.ap75, sub.ap_by_scale)
        )
    rows.append(LevelRow("overall", "all", "dynamic" if fixed_k is None else str(fixed_k), len(gts), report.ap, report.ap50, report.ap75, report.ap_by_scale))
    bands = []
    for band in ("sparse", "middle", "dense"):
        idx = [i for i, g in enumerate(gts) if density_band(len(g), ecfg) == band]
        if not idx:
            continue
        sub_d = [dets[i] for i in idx]
        sub_g = [gts[i] for i in idx]
        fp, fn = lrp_components(sub_d, sub_g, ecfg.lrp_iou, ecfg.max_detections)
        bands.append(BandRow(band, len(idx), evaluate(sub_d, sub_g, ecfg).ap, fp, fn))
    accuracy = None
    if detector.config.use_counting and predicted and predicted[0] >= 0:
        accuracy = float(np.mean(np.array(predicted) == np.array(truth)))
    mode = "dynamic" if fixed_k is None else f"fixed k={fixed_k}"
    return EvalResult(mode, report, rows, bands, accuracy, ks)


def evaluate_run(
    checkpoint: str | Path,
    dataset: Dataset,
    config: ExperimentConfig,
    fixed_k: int | None = None,
) -> EvalResult:
    """Load ``checkpoint`` (refusing a different architecture) and evaluate.

    ``fixed_k`` overrides the configuration's query budget policy.
    """
    detector, _ = load_checkpoint(checkpoint, config)
    k = fixed_k if fixed_k is not None else config.eval_k()
    return evaluate_detector(detector, dataset, config, k)

