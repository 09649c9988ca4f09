"""Set-prediction loss: box geometry, focal classification, optimal one-to-one
assignment and the weighted loss breakdown used for training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor, _sigmoid, maximum, minimum
from .counting import CountLevel, counting_loss, regression_loss
from .query_select import AnchorBox

__all__ = [
    "GroundTruth",
    "MatchResult",
    "LossWeights",
    "LossBreakdown",
    "cxcywh_to_xyxy",
    "xyxy_to_cxcywh",
    "giou",
    "giou_xyxy",
    "pairwise_giou",
    "giou_tensor",
    "focal_loss",
    "match_cost",
    "hungarian",
    "hungarian_loss",
    "selection_targets",
    "total_loss",
]


@dataclass
class GroundTruth:
    """Normalised ``(cx, cy, w, h)`` boxes with integer class ids."""

    boxes: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.classes)} class labels")
        if np.any(self.boxes[:, 2:] <= 0):
            raise ValueError("ground-truth boxes need positive width and height")
        if np.any(self.classes < 0):
            raise ValueError("class ids must be non-negative")

    def __len__(self) -> int:
        return len(self.classes)

    @classmethod
    def from_anchor_boxes(cls, boxes: Sequence[AnchorBox], classes: Sequence[int]) -> "GroundTruth":
        return cls(np.array([b.as_array() for b in boxes]).reshape(-1, 4), classes)


@dataclass
class MatchResult:
    """``(prediction, gt)`` pairs sorted by prediction index."""

    pairs: list[tuple[int, int]]
    cost: float = 0.0

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    focal: float = 1.0
    counting: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass
class LossBreakdown:
    l1: float
    giou: float
    focal: float
    hungarian: float
    aux: float
    counting: float
    total: float
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("l1", "giou", "focal", "hungarian", "aux", "counting", "total")}


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU for every pair of corner-format boxes, ``[n, m]``.

    Zero-area boxes get IoU 0; a zero-area enclosure contributes no penalty.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    degenerate = (area_a[:, None] <= 0) | (area_b[None, :] <= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(degenerate | (union <= 0), 0.0, inter / union)
        elt = np.minimum(a[:, None, :2], b[None, :, :2])
        erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
        enclosure = np.prod(np.clip(erb - elt, 0, None), axis=-1)
        penalty = np.where(enclosure > 0, (enclosure - union) / enclosure, 0.0)
    return iou - penalty


def giou_xyxy(a, b) -> float:
    return float(pairwise_giou(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def giou(a: AnchorBox, b: AnchorBox) -> float:
    return giou_xyxy(cxcywh_to_xyxy(a.as_array()), cxcywh_to_xyxy(b.as_array()))


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise GIoU of predicted and target ``(cx, cy, w, h)`` boxes, ``[n]``.

    Predictions come from sigmoids, so their areas are positive.
    """
    target = cxcywh_to_xyxy(np.asarray(target, dtype=np.float64).reshape(-1, 4))
    c, wh = pred[:, 0:2], pred[:, 2:4]
    p1, p2 = c - wh * 0.5, c + wh * 0.5
    t1, t2 = Tensor(target[:, 0:2]), Tensor(target[:, 2:4])
    inter_wh = (minimum(p2, t2) - maximum(p1, t1)).relu()
    inter = inter_wh[:, 0] * inter_wh[:, 1]
    area_p = wh[:, 0] * wh[:, 1]
    area_t = (target[:, 2] - target[:, 0]) * (target[:, 3] - target[:, 1])
    union = area_p + area_t - inter
    enc_wh = maximum(p2, t2) - minimum(p1, t1)
    enclosure = enc_wh[:, 0] * enc_wh[:, 1]
    return inter / union - (enclosure - union) / enclosure


def focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    alpha: float | None = 0.25,
    gamma: float = 2.0,
    normalizer: float | None = None,
) -> Tensor:
    """Sigmoid focal loss summed over classes and averaged over query slots.

    ``alpha=None`` disables the class-balance weight; with ``gamma=0`` the
    result is plain binary cross-entropy. ``normalizer`` replaces the slot
    count as the divisor.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"targets {t.shape} do not match logits {logits.shape}")
    log_p = logits.log_sigmoid()
    log_q = (-logits).log_sigmoid()
    ce = -(log_p * t + log_q * (1.0 - t))
    if gamma:
        p = logits.sigmoid()
        one_minus_pt = p * (1.0 - 2.0 * t) + t  # 1 - p_t
        ce = ce * one_minus_pt**gamma
    if alpha is not None:
        ce = ce * (alpha * t + (1.0 - alpha) * (1.0 - t))
    if normalizer is None:
        normalizer = logits.shape[0] if logits.ndim > 1 else 1
    return ce.sum() / float(normalizer)


def match_cost(
    pred_logits: np.ndarray,
    pred_boxes: np.ndarray,
    gt: GroundTruth,
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """``[k, n_gt]`` matching cost: weighted L1 + (1 - GIoU) + focal class cost."""
    logits = np.asarray(pred_logits.data if isinstance(pred_logits, Tensor) else pred_logits, dtype=np.float64)
    boxes = np.asarray(pred_boxes.data if isinstance(pred_boxes, Tensor) else pred_boxes, dtype=np.float64)
    k = logits.shape[0]
    if len(gt) == 0:
        return np.zeros((k, 0))
    p = _sigmoid(logits[:, gt.classes])
    eps = 1e-12
    pos = weights.alpha * (1 - p) ** weights.gamma * -np.log(p + eps)
    neg = (1 - weights.alpha) * p**weights.gamma * -np.log(1 - p + eps)
    cost_class = pos - neg
    cost_l1 = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(-1)
    cost_giou = 1.0 - pairwise_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt.boxes))
    return weights.l1 * cost_l1 + weights.giou * cost_giou + weights.focal * cost_class


def _assign_rows(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path with potentials for ``n <= m``; returns the
    column of every row."""
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # row (1-based) owning each column, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols


def hungarian(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment of rows (predictions) to columns
    (ground truth); ``min(k, n)`` pairs."""
    c = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        bad = np.argwhere(~np.isfinite(c))[0]
        raise ValueError(f"non-finite cost at entry {tuple(int(i) for i in bad)}")
    k, n = c.shape
    if k == 0 or n == 0:
        return MatchResult([], 0.0)
    if k <= n:
        cols = _assign_rows(c)
        pairs = [(i, int(cols[i])) for i in range(k)]
    else:
        rows = _assign_rows(c.T)
        pairs = sorted((int(rows[j]), j) for j in range(n))
    total = float(sum(c[i, j] for i, j in pairs))
    return MatchResult(pairs, total)


def _class_targets(k: int, num_classes: int, gt: GroundTruth, match: MatchResult) -> np.ndarray:
    t = np.zeros((k, num_classes))
    if match.pairs:
        t[match.pred_indices, gt.classes[match.gt_indices]] = 1.0
    return t


def hungarian_loss(
    logits: Tensor,
    boxes: Tensor,
    gt: GroundTruth,
    weights: LossWeights = LossWeights(),
    match: MatchResult | None = None,
) -> tuple[Tensor, Tensor, Tensor, Tensor, MatchResult]:
    """Weighted matched-pair loss; returns ``(hungarian, l1, giou, focal, match)``.

    Box terms are summed over matched pairs and divided by the number of
    ground-truth boxes. Pass ``match`` to hold the assignment fixed.
    """
    if match is None:
        match = hungarian(match_cost(logits.data, boxes.data, gt, weights))
    focal = focal_loss(logits, _class_targets(logits.shape[0], logits.shape[1], gt, match), weights.alpha, weights.gamma)
    if match.pairs:
        norm = float(max(len(gt), 1))
        pred = boxes.take_rows(match.pred_indices)
        target = gt.boxes[match.gt_indices]
        l1 = (pred - target).abs().sum() / norm
        g = (1.0 - giou_tensor(pred, target)).sum() / norm
    else:
        l1 = Tensor(0.0)
        g = Tensor(0.0)
    total = l1 * weights.l1 + g * weights.giou + focal * weights.focal
    return total, l1, g, focal, match


def selection_targets(level_shapes, gt: GroundTruth, num_classes: int) -> np.ndarray:
    """Per-position class targets ``[m, length]`` for the selection scores.

    A position is positive for a class when its cell centre lies inside a box
    of that class. A box containing no centre on any level marks the finest
    level cell nearest to its centre instead.
    """
    total = sum(h * w for h, w in level_shapes)
    t = np.zeros((num_classes, total))
    if len(gt) == 0:
        return t
    xyxy = cxcywh_to_xyxy(gt.boxes)
    covered = np.zeros(len(gt), dtype=bool)
    start = 0
    for h, w in level_shapes:
        cx = (np.arange(w) + 0.5) / w
        cy = (np.arange(h) + 0.5) / h
        inside_x = (cx[None, :] >= xyxy[:, 0:1]) & (cx[None, :] <= xyxy[:, 2:3])  # [n, w]
        inside_y = (cy[None, :] >= xyxy[:, 1:2]) & (cy[None, :] <= xyxy[:, 3:4])  # [n, h]
        inside = inside_y[:, :, None] & inside_x[:, None, :]  # [n, h, w]
        covered |= inside.reshape(len(gt), -1).any(axis=1)
        for c in np.unique(gt.classes):
            mask = inside[gt.classes == c].any(axis=0).reshape(-1)
            t[c, start : start + h * w][mask] = 1.0
        start += h * w
    h, w = level_shapes[0]
    for i in np.flatnonzero(~covered):
        x = min(int(gt.boxes[i, 0] * w), w - 1)
        y = min(int(gt.boxes[i, 1] * h), h - 1)
        t[gt.classes[i], y * w + x] = 1.0
    return t


def total_loss(
    outputs,
    gt: GroundTruth,
    counting: tuple[Tensor, CountLevel | int | float] | None = None,
    weights: LossWeights = LossWeights(),
    counting_mode: str = "classification",
    selection: tuple[Tensor, np.ndarray] | None = None,
    matches: list[MatchResult] | None = None,
) -> LossBreakdown:
    """Final-layer Hungarian loss + re-matched loss of every earlier layer +
    weighted counting term.

    ``selection`` is an optional ``(scores [m, N], targets [m, N])`` pair whose
    focal loss, normalised by the number of positive positions, joins the
    auxiliary term. ``matches`` fixes the per-layer
    assignments (used for gradient checks).
    """
    layers = outputs.per_layer
    if not layers:
        raise ValueError("total_loss needs at least one decoder layer")
    results = []
    for i, layer in enumerate(layers):
        fixed = matches[i] if matches is not None else None
        results.append(hungarian_loss(layer.class_logits, layer.boxes, gt, weights, fixed))
    hung, l1, g, focal, _ = results[-1]
    aux = Tensor(0.0)
    for r in results[:-1]:
        aux = aux + r[0]
    if selection is not None:
        scores, targets = selection
        norm = max(float(np.asarray(targets).sum()), 1.0)
        aux = aux + focal_loss(scores.T, np.asarray(targets).T, weights.alpha, weights.gamma, norm) * weights.focal
    if counting is None:
        count = Tensor(0.0)
    else:
        logits, target = counting
        if counting_mode == "classification":
            count = counting_loss(logits, target) * weights.counting
        else:
            count = regression_loss(logits, float(target)) * weights.counting
    total = hung + aux + count
    return LossBreakdown(
        l1=l1.item(),
        giou=g.item(),
        focal=focal.item(),
        hungarian=hung.item(),
        aux=aux.item(),
        counting=count.item(),
        total=total.item(),
        total_tensor=total,
    )
