"""COCO-style average precision with scale buckets, density-stratified
reports and the false-positive / false-negative components of optimal LRP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .counting import DEFAULT_THRESHOLDS, LevelThresholds, count_to_level

__all__ = [
    "Detections",
    "Annotations",
    "EvalConfig",
    "MetricReport",
    "AI_TOD_BUCKETS",
    "box_iou",
    "scale_bucket",
    "evaluate",
    "lrp_components",
    "density_band",
]

AI_TOD_BUCKETS: dict[str, tuple[float, float]] = {
    "vt": (2.0, 8.0),
    "t": (8.0, 16.0),
    "s": (16.0, 32.0),
    "m": (32.0, 64.0),
}


def _validate_boxes(boxes: np.ndarray, what: str) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.size == 0:
        return boxes.reshape(0, 4)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError(f"{what}: boxes must be [n, 4], got {boxes.shape}")
    bad = ~np.isfinite(boxes).all(axis=1) | (boxes[:, 2] <= 0) | (boxes[:, 3] <= 0)
    if bad.any():
        raise ValueError(f"{what}: malformed box at index {int(np.flatnonzero(bad)[0])}")
    return boxes


@dataclass
class Annotations:
    """Ground truth of one image: ``[x, y, w, h]`` boxes in pixels."""

    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = _validate_boxes(self.boxes, "annotations")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.boxes):
            raise ValueError("annotations: label count differs from box count")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Detections:
    """Scored detections of one image: ``[x, y, w, h]`` boxes in pixels."""

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = _validate_boxes(self.boxes, "detections")
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not (len(self.scores) == len(self.labels) == len(self.boxes)):
            raise ValueError("detections: boxes, scores and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    max_detections: int = 1500
    scale_buckets: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(AI_TOD_BUCKETS))
    density_thresholds: LevelThresholds = DEFAULT_THRESHOLDS
    sparse_below: float = 100.0
    dense_above: float = 900.0
    lrp_iou: float = 0.5

    def __post_init__(self):
        t = tuple(float(x) for x in self.iou_thresholds)
        if not t or any(not 0 < x < 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"IoU thresholds must be ascending inside (0, 1): {t}")
        self.iou_thresholds = t
        spans = sorted(self.scale_buckets.values())
        if any(lo >= hi for lo, hi in spans) or any(a[1] > b[0] for a, b in zip(spans, spans[1:])):
            raise ValueError(f"scale buckets must be non-empty and disjoint: {self.scale_buckets}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be positive")

    def scaled(self, factor: float) -> "EvalConfig":
        """Bucket edges and density cuts multiplied by ``factor``."""
        return EvalConfig(
            iou_thresholds=self.iou_thresholds,
            max_detections=self.max_detections,
            scale_buckets={k: (lo * factor, hi * factor) for k, (lo, hi) in self.scale_buckets.items()},
            density_thresholds=self.density_thresholds,
            sparse_below=self.sparse_below,
            dense_above=self.dense_above,
            lrp_iou=self.lrp_iou,
        )


@dataclass
class MetricReport:
    ap: float
    ap50: float
    ap75: float
    ap_by_scale: dict[str, float]
    ap_by_density: dict[str, float]
    lrp_fp: float
    lrp_fn: float
    lrp: float = math.nan
    num_images: int = 0
    num_gt: int = 0
    num_detections: int = 0

    def as_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "ap_by_scale": dict(self.ap_by_scale),
            "ap_by_density": dict(self.ap_by_density),
            "lrp": self.lrp,
            "lrp_fp": self.lrp_fp,
            "lrp_fn": self.lrp_fn,
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
        }


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``[x, y, w, h]`` boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def scale_bucket(box, buckets: dict[str, tuple[float, float]] = AI_TOD_BUCKETS, image_size=None) -> str:
    """Bucket of a box by ``sqrt(w * h)`` in pixels, lower edge inclusive.

    ``box`` is ``[x, y, w, h]`` in pixels, or normalised when ``image_size``
    is given. Sizes outside every bucket return ``"other"``.
    """
    b = np.asarray(box, dtype=np.float64).reshape(4)
    w, h = b[2], b[3]
    if image_size is not None:
        w, h = w * image_size, h * image_size
    size = math.sqrt(max(w * h, 0.0))
    for name, (lo, hi) in buckets.items():
        if lo <= size < hi:
            return name
    return "other"


def _sizes(boxes: np.ndarray) -> np.ndarray:
    return np.sqrt(np.clip(boxes[:, 2] * boxes[:, 3], 0, None))


def _match_image(det_boxes, det_sizes, gt_boxes, gt_ignore, t, size_range, ious=None):
    """Greedy match of score-ordered detections at IoU >= ``t``.

    Returns per-detection ``(tp, ignore, iou)`` arrays. ``ious`` may carry a
    precomputed detection-by-ground-truth IoU matrix.
    """
    n_d = len(det_boxes)
    tp = np.zeros(n_d, dtype=bool)
    ign = np.zeros(n_d, dtype=bool)
    ious_out = np.zeros(n_d)
    if n_d == 0:
        return tp, ign, ious_out
    if len(gt_boxes):
        if ious is None:
            ious = box_iou(det_boxes, gt_boxes)
        free = np.ones(len(gt_boxes), dtype=bool)
        thr = min(t, 1 - 1e-10)
        for d in np.flatnonzero(ious.max(axis=1) >= thr):
            cand = free & (ious[d] >= thr)
            if not cand.any():
                continue
            # unignored ground truth takes precedence over ignored
            pool = cand & ~gt_ignore if (cand & ~gt_ignore).any() else cand
            scores = np.where(pool, ious[d], -1.0)
            g = len(scores) - 1 - int(np.argmax(scores[::-1]))
            free[g] = False
            ign[d] = gt_ignore[g]
            tp[d] = not gt_ignore[g]
            ious_out[d] = ious[d, g]
    if size_range is not None:
        lo, hi = size_range
        outside = (det_sizes < lo) | (det_sizes >= hi)
        ign |= (~tp) & (~ign) & outside
    return tp, ign, ious_out


def _gather(dets, gts, label, max_det):
    """Per-image detections of one class, score-sorted and truncated."""
    per_image = []
    for img, (d, g) in enumerate(zip(dets, gts)):
        dm = d.labels == label
        boxes, scores = d.boxes[dm], d.scores[dm]
        # deterministic order: score desc, then coordinates
        order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))[:max_det]
        gm = g.labels == label
        boxes, gt_boxes = boxes[order], g.boxes[gm]
        ious = box_iou(boxes, gt_boxes) if len(boxes) and len(gt_boxes) else None
        per_image.append((boxes, scores[order], gt_boxes, ious))
    return per_image


def _ap_from_matches(scores, tps, ignores, n_pos) -> float:
    if n_pos == 0:
        return math.nan
    keep = ~ignores
    scores, tps = scores[keep], tps[keep]
    order = np.argsort(-scores, kind="mergesort")
    tps = tps[order]
    tp_c = np.cumsum(tps)
    fp_c = np.cumsum(~tps)
    recall = tp_c / n_pos
    precision = tp_c / np.maximum(tp_c + fp_c, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, np.linspace(0.0, 1.0, 101), side="left")
    values = np.zeros(101)
    ok = idx < len(precision)
    values[ok] = precision[idx[ok]]
    return float(np.mean(values))


def _class_ap(per_image, t, size_range) -> float:
    scores, tps, igns = [], [], []
    n_pos = 0
    for boxes, sc, gt_boxes, ious in per_image:
        gt_sizes = _sizes(gt_boxes)
        if size_range is None:
            gt_ignore = np.zeros(len(gt_boxes), dtype=bool)
        else:
            gt_ignore = (gt_sizes < size_range[0]) | (gt_sizes >= size_range[1])
        n_pos += int((~gt_ignore).sum())
        tp, ign, _ = _match_image(boxes, _sizes(boxes), gt_boxes, gt_ignore, t, size_range, ious)
        scores.append(sc)
        tps.append(tp)
        igns.append(ign)
    if not scores:
        return math.nan
    return _ap_from_matches(np.concatenate(scores), np.concatenate(tps), np.concatenate(igns), n_pos)


def _mean_ap(dets, gts, config: EvalConfig, size_range=None) -> np.ndarray:
    """AP per IoU threshold, averaged over classes that have ground truth."""
    labels = np.unique(np.concatenate([g.labels for g in gts])) if gts else np.zeros(0, dtype=np.int64)
    out = np.full(len(config.iou_thresholds), math.nan)
    if len(labels) == 0:
        return out
    gathered = [_gather(dets, gts, int(c), config.max_detections) for c in labels]
    for ti, t in enumerate(config.iou_thresholds):
        values = [_class_ap(per_image, t, size_range) for per_image in gathered]
        values = [v for v in values if not math.isnan(v)]
        out[ti] = float(np.mean(values)) if values else math.nan
    return out


def _pick(per_t: np.ndarray, thresholds, t: float) -> float:
    for i, x in enumerate(thresholds):
        if abs(x - t) < 1e-9:
            return float(per_t[i])
    return math.nan


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x[~np.isnan(x)])) if np.any(~np.isnan(x)) else math.nan


def lrp_components(
    detections: Sequence[Detections],
    ground_truths: Sequence[Annotations],
    iou_t: float = 0.5,
    max_det: int = 1500,
    return_lrp: bool = False,
):
    """``(lrp_fp, lrp_fn)`` at the score threshold minimising LRP, per class,
    averaged over classes with ground truth.

    LRP = (sum(1 - IoU) / (1 - iou_t) + FP + FN) / (TP + FP + FN); the
    components are ``1 - precision`` and ``1 - recall`` at that threshold.
    Ties between thresholds go to the higher threshold.
    """
    gts = list(ground_truths)
    dets = list(detections)
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection sets for {len(gts)} images")
    labels = np.unique(np.concatenate([g.labels for g in gts])) if gts else np.zeros(0, dtype=np.int64)
    fps, fns, lrps = [], [], []
    for c in labels:
        per_image = _gather(dets, gts, int(c), max_det)
        scores, tps, ious = [], [], []
        n_pos = 0
        for boxes, sc, gt_boxes, pair_iou in per_image:
            n_pos += len(gt_boxes)
            tp, _, iou = _match_image(boxes, _sizes(boxes), gt_boxes, np.zeros(len(gt_boxes), dtype=bool), iou_t, None, pair_iou)
            scores.append(sc)
            tps.append(tp)
            ious.append(iou)
        if n_pos == 0:
            continue
        scores = np.concatenate(scores)
        tps = np.concatenate(tps)
        ious = np.concatenate(ious)
        order = np.argsort(-scores, kind="mergesort")
        scores, tps, ious = scores[order], tps[order], ious[order]
        # candidate cut after position i keeps detections [0, i); only cut
        # where the score changes so equal scores are kept or dropped together
        tp_c = np.concatenate([[0], np.cumsum(tps)])
        fp_c = np.concatenate([[0], np.cumsum(~tps)])
        loc_c = np.concatenate([[0.0], np.cumsum(np.where(tps, 1.0 - ious, 0.0))])
        valid = np.ones(len(scores) + 1, dtype=bool)
        if len(scores) > 1:
            valid[1:-1] = scores[1:] != scores[:-1]
        fn_c = n_pos - tp_c
        lrp = (loc_c / (1.0 - iou_t) + fp_c + fn_c) / (tp_c + fp_c + fn_c)
        lrp = np.where(valid, lrp, np.inf)
        best = int(np.argmin(lrp))
        n_det = tp_c[best] + fp_c[best]
        fps.append(float(fp_c[best] / n_det) if n_det else 0.0)
        fns.append(float(fn_c[best] / n_pos))
        lrps.append(float(lrp[best]))
    if not fps:
        out = (math.nan, math.nan, math.nan)
    else:
        out = (float(np.mean(fps)), float(np.mean(fns)), float(np.mean(lrps)))
    return out if return_lrp else out[:2]


def density_band(n: int, config: EvalConfig) -> str:
    if n < config.sparse_below:
        return "sparse"
    if n > config.dense_above:
        return "dense"
    return "middle"


def evaluate(
    detections: Sequence[Detections],
    ground_truths: Sequence[Annotations],
    config: EvalConfig | None = None,
) -> MetricReport:
    """Full report: AP over the IoU grid, AP50/AP75, AP per scale bucket,
    AP per count level and LRP components at ``config.lrp_iou``."""
    config = config or EvalConfig()
    dets = list(detections)
    gts = list(ground_truths)
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection sets for {len(gts)} images")
    per_t = _mean_ap(dets, gts, config)
    by_scale = {name: _nanmean(_mean_ap(dets, gts, config, rng)) for name, rng in config.scale_buckets.items()}
    by_density = {}
    levels = [count_to_level(len(g), config.density_thresholds).name for g in gts]
    for name in sorted(set(levels)):
        idx = [i for i, lv in enumerate(levels) if lv == name]
        by_density[name] = _nanmean(_mean_ap([dets[i] for i in idx], [gts[i] for i in idx], config))
    fp, fn, lrp = lrp_components(dets, gts, config.lrp_iou, config.max_detections, return_lrp=True)
    return MetricReport(
        ap=_nanmean(per_t),
        ap50=_pick(per_t, config.iou_thresholds, 0.5),
        ap75=_pick(per_t, config.iou_thresholds, 0.75),
        ap_by_scale=by_scale,
        ap_by_density=by_density,
        lrp_fp=fp,
        lrp_fn=fn,
        lrp=lrp,
        num_images=len(gts),
        num_gt=int(sum(len(g) for g in gts)),
        num_detections=int(sum(len(d) for d in dets)),
    )
