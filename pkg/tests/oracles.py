"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over scalars so it
shares no code path with the vectorised library functions it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv2d_loop(x, w, b=None, stride=1, padding=0, dilation=1):
    bsz, c_in, h, wid = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wid + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((bsz, c_out, oh, ow))
    for n in range(bsz):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else b[o]
                    for c in range(c_in):
                        for p in range(kh):
                            for q in range(kw):
                                y = i * stride + p * dilation - padding
                                xx = j * stride + q * dilation - padding
                                if 0 <= y < h and 0 <= xx < wid:
                                    acc += x[n, c, y, xx] * w[o, c, p, q]
                    out[n, o, i, j] = acc
    return out


def pool_channel_loop(x, mode):
    bsz, c, h, w = x.shape
    out = np.zeros((bsz, 1, h, w))
    for n in range(bsz):
        for i in range(h):
            for j in range(w):
                vals = [x[n, k, i, j] for k in range(c)]
                out[n, 0, i, j] = sum(vals) / c if mode == "avg" else max(vals)
    return out


def pool_spatial_loop(x, mode):
    bsz, c, h, w = x.shape
    out = np.zeros((bsz, c, 1, 1))
    for n in range(bsz):
        for k in range(c):
            vals = [x[n, k, i, j] for i in range(h) for j in range(w)]
            out[n, k, 0, 0] = sum(vals) / len(vals) if mode == "avg" else max(vals)
    return out


def linear_loop(x, w, b):
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    out = np.zeros((flat.shape[0], w.shape[0]))
    for r in range(flat.shape[0]):
        for o in range(w.shape[0]):
            acc = b[o]
            for i in range(w.shape[1]):
                acc += w[o, i] * flat[r, i]
            out[r, o] = acc
    return out.reshape(lead + (w.shape[0],))


def attention_loop(q, k, v, heads):
    n, d = q.shape
    m = k.shape[0]
    dh = d // heads
    out = np.zeros((n, d))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        for i in range(n):
            logits = []
            for j in range(m):
                s = 0.0
                for t in range(dh):
                    s += q[i, sl][t] * k[j, sl][t]
                logits.append(s / math.sqrt(dh))
            top = max(logits)
            ex = [math.exp(s - top) for s in logits]
            z = sum(ex)
            for t in range(dh):
                out[i, hd * dh + t] = sum(ex[j] / z * v[j, hd * dh + t] for j in range(m))
    return out


def layer_norm_loop(x, gamma, beta, eps=1e-5):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        for t in range(len(row)):
            out[idx + (t,)] = (row[t] - mu) / math.sqrt(var + eps) * gamma[t] + beta[t]
    return out


def bilinear_loop(img, out_h, out_w):
    """Half-pixel-centre bilinear resize of a 2-D map, edge clamped."""
    h, w = img.shape

    def coord(i, src, dst):
        pos = max((i + 0.5) * src / dst - 0.5, 0.0)
        lo = min(int(math.floor(pos)), src - 1)
        hi = min(lo + 1, src - 1)
        return lo, hi, pos - lo

    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y0, y1, fy = coord(i, h, out_h)
        for j in range(out_w):
            x0, x1, fx = coord(j, w, out_w)
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def giou_scalar(a, b):
    """GIoU of two corner-format boxes ``(x1, y1, x2, y2)``."""
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = area_a + area_b - inter
    iou = 0.0 if area_a <= 0 or area_b <= 0 or union <= 0 else inter / union
    enc = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return iou - ((enc - union) / enc if enc > 0 else 0.0)


def iou_xywh(a, b):
    iw = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def log_sigmoid(x):
    # written without 1 - p so large |x| keeps full precision
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def focal_scalar(logit, target, alpha=0.25, gamma=2.0):
    p = sigmoid(logit)
    if target == 1:
        return -alpha * (1 - p) ** gamma * log_sigmoid(logit)
    return -(1 - alpha) * p**gamma * log_sigmoid(-logit)


def focal_loop(logits, targets, alpha=0.25, gamma=2.0):
    k, m = logits.shape
    total = 0.0
    for i in range(k):
        for c in range(m):
            total += focal_scalar(logits[i, c], targets[i, c], alpha, gamma)
    return total / k


def bce_loop(logits, targets):
    k, m = logits.shape
    total = 0.0
    for i in range(k):
        for c in range(m):
            t = targets[i, c]
            total += -(t * log_sigmoid(logits[i, c]) + (1 - t) * log_sigmoid(-logits[i, c]))
    return total / k


def match_cost_scalar(logit_row, box, gt_box, gt_class, l1=5.0, g=2.0, f=1.0, alpha=0.25, gamma=2.0):
    p = sigmoid(logit_row[gt_class])
    pos = alpha * (1 - p) ** gamma * -math.log(p + 1e-12)
    neg = (1 - alpha) * p**gamma * -math.log(1 - p + 1e-12)
    cost_l1 = sum(abs(box[t] - gt_box[t]) for t in range(4))

    def corners(bb):
        return (bb[0] - bb[2] / 2, bb[1] - bb[3] / 2, bb[0] + bb[2] / 2, bb[1] + bb[3] / 2)

    return l1 * cost_l1 + g * (1 - giou_scalar(corners(box), corners(gt_box))) + f * (pos - neg)


def assignment_cost(cost, pairs):
    return sum(cost[i][j] for i, j in sorted(pairs))


def brute_force_assignment(cost):
    """Minimum total cost over every injective row/column pairing of size min(k, n)."""
    cost = np.asarray(cost)
    k, n = cost.shape
    best, best_pairs = math.inf, []
    if k <= n:
        for cols in itertools.permutations(range(n), k):
            pairs = list(zip(range(k), cols))
            c = assignment_cost(cost, pairs)
            if c < best:
                best, best_pairs = c, pairs
    else:
        for rows in itertools.permutations(range(k), n):
            pairs = sorted(zip(rows, range(n)))
            c = assignment_cost(cost, pairs)
            if c < best:
                best, best_pairs = c, pairs
    return best, best_pairs


def greedy_assignment(cost):
    """Repeatedly take the globally cheapest remaining entry."""
    cost = np.asarray(cost, dtype=float)
    k, n = cost.shape
    rows, cols, pairs = set(), set(), []
    order = sorted((cost[i, j], i, j) for i in range(k) for j in range(n))
    for _, i, j in order:
        if i not in rows and j not in cols:
            rows.add(i)
            cols.add(j)
            pairs.append((i, j))
    return pairs


def count_level_if_chain(n, cuts=(10, 100, 500)):
    if n <= cuts[0]:
        return 0
    if n <= cuts[1]:
        return 1
    if n <= cuts[2]:
        return 2
    return 3


def scale_bucket_if_chain(size):
    if 2 <= size < 8:
        return "vt"
    if 8 <= size < 16:
        return "t"
    if 16 <= size < 32:
        return "s"
    if 32 <= size < 64:
        return "m"
    return "other"


def ap_single_class(dets, gts, t):
    """COCO-style AP of one class at one IoU threshold, written out by hand.

    ``dets`` is a list of per-image lists of ``(score, box)``; ``gts`` a
    list of per-image lists of boxes (``[x, y, w, h]``).
    """
    records = []
    n_pos = sum(len(g) for g in gts)
    for img, (d, g) in enumerate(zip(dets, gts)):
        claimed = [False] * len(g)
        for score, box in sorted(d, key=lambda sb: -sb[0]):
            best, best_j = -1.0, -1
            for j, gb in enumerate(g):
                if claimed[j]:
                    continue
                iou = iou_xywh(box, gb)
                if iou >= min(t, 1 - 1e-10) and iou >= best:
                    best, best_j = iou, j
            if best_j >= 0:
                claimed[best_j] = True
            records.append((score, best_j >= 0))
    if n_pos == 0:
        return math.nan
    records.sort(key=lambda r: -r[0])
    tp = fp = 0
    recall, precision = [], []
    for _, hit in records:
        tp += hit
        fp += not hit
        recall.append(tp / n_pos)
        precision.append(tp / (tp + fp))
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    total = 0.0
    for r in np.linspace(0, 1, 101):
        vals = [p for rc, p in zip(recall, precision) if rc >= r]
        total += vals[0] if vals else 0.0
    return total / 101


def lrp_sweep(scored_hits, n_pos, iou_t=0.5):
    """Optimal-LRP components by trying every score threshold.

    ``scored_hits`` is a list of ``(score, iou or None)`` where ``None``
    marks a false positive. Returns ``(lrp, fp_rate, fn_rate)``.
    """
    best = None
    # highest threshold first so ties resolve towards keeping fewer detections
    thresholds = [math.inf] + sorted({s for s, _ in scored_hits}, reverse=True)
    for thr in thresholds:
        kept = [(s, iou) for s, iou in scored_hits if s >= thr]
        tp = sum(1 for _, iou in kept if iou is not None)
        fp = len(kept) - tp
        fn = n_pos - tp
        loc = sum(1 - iou for _, iou in kept if iou is not None)
        lrp = (loc / (1 - iou_t) + fp + fn) / (tp + fp + fn)
        fp_rate = fp / (tp + fp) if tp + fp else 0.0
        cand = (lrp, fp_rate, fn / n_pos)
        if best is None or cand[0] < best[0]:
            best = cand
    return best
