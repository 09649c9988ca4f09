"""Two-stage training: the counting path alone, then the whole detector."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..autograd import Tensor, no_grad
from ..counting import ConfigError, count_to_level, counting_loss, regression_loss
from ..detector import Detector
from ..matching import selection_targets, total_loss
from ..optim import clip_grad_norm, make_optimizer, scheduled_lr
from ..synth import Dataset, generate, load
from .config import ExperimentConfig, save_config

__all__ = [
    "TrainingDiverged",
    "RunRecord",
    "build_detector",
    "load_datasets",
    "stratified_eval_set",
    "sampling_weights",
    "save_checkpoint",
    "load_checkpoint",
    "counting_accuracy",
    "train",
]

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: int, step: int, checkpoint: str):
        super().__init__(f"non-finite loss at stage {stage} step {step}; last good weights in {checkpoint}")
        self.stage = stage
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class RunRecord:
    config_hash: str
    arch_hash: str
    seed: int
    losses: list[dict] = field(default_factory=list)
    counting_accuracy: float | None = None
    stage1_counting_accuracy: float | None = None
    stage1_checkpoint: str | None = None
    final_checkpoint: str | None = None
    metrics: dict | None = None
    wall_clock: float = 0.0

    def comparable(self) -> dict:
        """Everything except timing, for determinism checks."""
        d = asdict(self)
        d.pop("wall_clock")
        d.pop("stage1_checkpoint")
        d.pop("final_checkpoint")
        return d

    def save(self, path: str | Path) -> Path:
        p = Path(path)
        p.write_text(json.dumps(asdict(self), indent=1))
        return p

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def build_detector(config: ExperimentConfig) -> Detector:
    return Detector(config.detector_config(), np.random.default_rng([config.seed, 7]))


def load_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train and validation sets: read from ``data.path`` when given
    (subdirectories ``train`` and ``val``), otherwise generated."""
    d = config.data
    if d.path:
        root = Path(d.path)
        return load(root / "train"), load(root / "val")
    return generate(d.scene_spec("train"), d.train_images), generate(d.scene_spec("val"), d.val_images)


def stratified_eval_set(config: ExperimentConfig) -> Dataset:
    """Equal numbers of sparse and dense scenes with evenly spread counts."""
    d = config.data
    n = d.eval_images_per_band
    sparse = np.linspace(d.eval_sparse_counts[0], d.eval_sparse_counts[1], n).round().astype(int)
    dense = np.linspace(d.eval_dense_counts[0], d.eval_dense_counts[1], n).round().astype(int)
    counts = np.concatenate([sparse, dense])
    return generate(d.scene_spec("eval"), len(counts), counts=counts)


def level_indices(dataset: Dataset, detector: Detector) -> np.ndarray:
    th = detector.config.level_thresholds
    return np.array([count_to_level(int(n), th).index for n in dataset.counts], dtype=np.int64)


def sampling_weights(levels: np.ndarray, power: float) -> np.ndarray:
    """Per-image probabilities so that level ``l`` is drawn with probability
    proportional to ``freq(l) ** power`` (1 = natural, 0 = balanced)."""
    if len(levels) == 0:
        raise ConfigError("training set is empty")
    freq = np.bincount(levels) / len(levels)
    w = freq[levels] ** (power - 1.0)
    return w / w.sum()


def save_checkpoint(path: str | Path, detector: Detector, config: ExperimentConfig, stage: int, step: int) -> str:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    meta = {"arch_hash": config.arch_hash(), "config_hash": config.config_hash(), "stage": stage, "step": step}
    state = detector.state_dict()
    with open(p, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **state)
    return str(p)


def load_checkpoint(path: str | Path, config: ExperimentConfig) -> tuple[Detector, dict]:
    """Rebuild the detector for ``config`` and load weights; refuses
    checkpoints whose architecture hash differs."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            state = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("arch_hash") != config.arch_hash():
        raise ConfigError(
            f"checkpoint {path} was trained with architecture {meta.get('arch_hash')}, config describes {config.arch_hash()}"
        )
    detector = build_detector(config)
    try:
        detector.load_state_dict(state)
    except ValueError as exc:
        raise ConfigError(f"checkpoint {path} does not fit the model: {exc}") from None
    return detector, meta


def counting_accuracy(detector: Detector, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return math.nan
    truth = level_indices(dataset, detector)
    with no_grad():
        pred = np.array([detector.count(Tensor(dataset.images[i])).level.index for i in range(len(dataset))])
    return float(np.mean(pred == truth))


def _counting_target(detector: Detector, n_objects: int):
    if detector.config.counting_mode == "classification":
        return count_to_level(n_objects, detector.config.level_thresholds).index
    return float(n_objects)


def _snapshot(detector: Detector) -> dict[str, np.ndarray]:
    return detector.state_dict()


def train(
    config: ExperimentConfig,
    datasets: tuple[Dataset, Dataset] | None = None,
    run_dir: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
    eval_set: Dataset | None = None,
) -> RunRecord:
    """Stage 1 optimises backbone, encoder and counting with the counting
    loss only; stage 2 optimises everything with the full loss.

    When ``eval_set`` is given the final weights are evaluated on it and the
    report is stored in the record's ``metrics``.
    """
    start = time.perf_counter()
    run_dir = Path(run_dir or config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")
    train_set, val_set = datasets if datasets is not None else load_datasets(config)
    detector = build_detector(config)
    dcfg = detector.config
    weights = config.loss.weights()
    levels = level_indices(train_set, detector)
    probs = sampling_weights(levels, config.schedule.sampling_power)
    rng = np.random.default_rng([config.seed, 11])
    record = RunRecord(config.config_hash(), config.arch_hash(), config.seed)
    log_every = max(1, config.schedule.log_every)

    good = _snapshot(detector)  # weights that last produced a finite loss

    def diverged(stage: int, step: int, good_state) -> TrainingDiverged:
        detector.load_state_dict(good_state)
        path = save_checkpoint(run_dir / "last_good.npz", detector, config, stage, step)
        return TrainingDiverged(stage, step, path)

    # stage 1 ----------------------------------------------------------
    if dcfg.use_counting and config.schedule.stage1_steps:
        params = detector.counting_parameters()
        opt = make_optimizer(config.optim.name, params, config.optim.lr, config.optim.momentum)
        for step in range(1, config.schedule.stage1_steps + 1):
            opt.lr = scheduled_lr(config.optim.lr, step, config.schedule.stage1_steps, config.optim.lr_schedule)
            i = int(rng.choice(len(train_set), p=probs))
            emsv, _ = detector.encode(Tensor(train_set.images[i]))
            result = detector.counting(emsv[0])
            target = _counting_target(detector, len(train_set.boxes[i]))
            if dcfg.counting_mode == "classification":
                loss = counting_loss(result.logits, target) * weights.counting
            else:
                loss = regression_loss(result.logits, target) * weights.counting
            value = loss.item()
            if not math.isfinite(value):
                raise diverged(1, step, good)
            good = _snapshot(detector)
            detector.zero_grad()
            loss.backward()
            clip_grad_norm(params, config.optim.clip)
            opt.step()
            entry = {"stage": 1, "step": step, "counting": value, "total": value}
            record.losses.append(entry)
            if progress and step % log_every == 0:
                progress(entry)
    record.stage1_checkpoint = save_checkpoint(run_dir / "stage1.npz", detector, config, 1, config.schedule.stage1_steps)
    if dcfg.use_counting and config.schedule.stage1_steps:
        record.stage1_counting_accuracy = counting_accuracy(detector, val_set)
        if progress:
            progress({"stage": 1, "counting_accuracy": record.stage1_counting_accuracy})

    # stage 2 ----------------------------------------------------------
    if config.schedule.stage2_steps:
        params = detector.parameters()
        opt = make_optimizer(config.optim.name, params, config.optim.lr, config.optim.momentum)
        fixed_k = config.eval_k()
        for step in range(1, config.schedule.stage2_steps + 1):
            opt.lr = scheduled_lr(config.optim.lr, step, config.schedule.stage2_steps, config.optim.lr_schedule)
            i = int(rng.choice(len(train_set), p=probs))
            gt = train_set.ground_truth(i)
            out = detector(Tensor(train_set.images[i]), fixed_k=fixed_k)
            counting = (out.count.logits, _counting_target(detector, len(gt))) if out.count is not None else None
            selection = None
            if config.loss.selection:
                selection = (out.scores, selection_targets(out.flat.level_shapes, gt, dcfg.num_classes))
            breakdown = total_loss(out.decoder, gt, counting, weights, dcfg.counting_mode, selection)
            if not math.isfinite(breakdown.total):
                raise diverged(2, step, good)
            good = _snapshot(detector)
            detector.zero_grad()
            breakdown.total_tensor.backward()
            clip_grad_norm(params, config.optim.clip)
            opt.step()
            entry = {"stage": 2, "step": step, "k": out.k, **breakdown.as_dict()}
            record.losses.append(entry)
            if progress and step % log_every == 0:
                progress(entry)
    record.final_checkpoint = save_checkpoint(
        run_dir / "final.npz", detector, config, 2, config.schedule.stage2_steps
    )
    if dcfg.use_counting:
        record.counting_accuracy = counting_accuracy(detector, val_set)
    if eval_set is not None:
        from .evaluate import evaluate_detector

        record.metrics = evaluate_detector(detector, eval_set, config, config.eval_k()).as_dict()
    record.wall_clock = time.perf_counter() - start
    record.save(run_dir / "run_record.json")
    return record
