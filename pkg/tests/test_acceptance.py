"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 8 train the default desk-scale detector for three seeds and
take roughly half an hour on one CPU core; deselect them with ``-m "not slow"``.
"""

import math
import time

import numpy as np
import pytest

from dynquery.autograd import Tensor
from dynquery.checks import BLOCK_CHECKS, OP_CHECKS, run_checks
from dynquery.counting import (
    DEFAULT_BUDGETS,
    DEFAULT_THRESHOLDS,
    DESK_BUDGETS,
    count_to_level,
    derive_thresholds,
    level_from_index,
    level_to_budget,
)
from dynquery.detr_head import Decoder, decode
from dynquery.harness.ablate import ablate
from dynquery.harness.config import ExperimentConfig
from dynquery.harness.evaluate import evaluate_run
from dynquery.harness.train import stratified_eval_set, train
from dynquery.matching import LossWeights, focal_loss, giou_xyxy, hungarian, total_loss, GroundTruth
from dynquery.detr_head import DecoderOutput, LayerOutput
from dynquery.metrics import Annotations, Detections, evaluate, scale_bucket
from dynquery.ops import attention, conv2d, layer_norm, linear, pool_channel, pool_spatial, resize_bilinear
from dynquery.pyramid import PyramidLevel, flatten_levels
from dynquery.query_select import AnchorBox, QuerySelector, anchor_priors, make_queries, refine_anchors
from dynquery.nn import MLP, Linear

from oracles import (
    assignment_cost,
    attention_loop,
    bce_loop,
    bilinear_loop,
    brute_force_assignment,
    conv2d_loop,
    count_level_if_chain,
    layer_norm_loop,
    linear_loop,
    pool_channel_loop,
    pool_spatial_loop,
    scale_bucket_if_chain,
)

SEEDS = (0, 1, 2)


# 1 ---------------------------------------------------------------------------


def _oracle_cases(rng):
    """One random case per op: ``(name, fast, loop)`` with matching inputs."""
    b, ci, co, k = (int(v) for v in rng.integers(1, 4, size=4))
    pad, dil, stride = int(rng.integers(0, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    span = dil * (k - 1) + 1
    h, w = (int(rng.integers(max(1, span - 2 * pad), 8)) for _ in range(2))
    x, wt, bias = rng.standard_normal((b, ci, h, w)), rng.standard_normal((co, ci, k, k)), rng.standard_normal(co)
    yield "conv2d", conv2d(Tensor(x), Tensor(wt), Tensor(bias), stride, pad, dil).data, conv2d_loop(x, wt, bias, stride, pad, dil)
    p = rng.standard_normal(tuple(int(s) for s in rng.integers(1, 5, size=4)))
    for mode in ("avg", "max"):
        yield f"pool_channel_{mode}", pool_channel(Tensor(p), mode).data, pool_channel_loop(p, mode)
        yield f"pool_spatial_{mode}", pool_spatial(Tensor(p), mode).data, pool_spatial_loop(p, mode)
    d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    xl, wl, bl = rng.standard_normal((int(rng.integers(1, 5)), d_in)), rng.standard_normal((d_out, d_in)), rng.standard_normal(d_out)
    yield "linear", linear(Tensor(xl), Tensor(wl), Tensor(bl)).data, linear_loop(xl, wl, bl)
    heads = int(rng.integers(1, 4))
    d = heads * int(rng.integers(1, 4))
    n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    q, kk, v = rng.standard_normal((n, d)), rng.standard_normal((m, d)), rng.standard_normal((m, d))
    yield "attention", attention(Tensor(q), Tensor(kk), Tensor(v), heads).data, attention_loop(q, kk, v, heads)
    xn = rng.standard_normal((int(rng.integers(1, 5)), int(rng.integers(2, 7))))
    g, be = rng.standard_normal(xn.shape[-1]), rng.standard_normal(xn.shape[-1])
    yield "layer_norm", layer_norm(Tensor(xn), Tensor(g), Tensor(be)).data, layer_norm_loop(xn, g, be)
    img = rng.standard_normal(tuple(int(s) for s in rng.integers(1, 9, size=2)))
    oh, ow = (int(s) for s in rng.integers(1, 9, size=2))
    yield "resize_bilinear", resize_bilinear(Tensor(img), oh, ow).data, bilinear_loop(img, oh, ow)


def test_criterion_1_kernel_correctness(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for _ in range(120):
        for name, fast, loop in _oracle_cases(rng):
            err = float(np.max(np.abs(fast - loop))) if fast.size else 0.0
            worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
    reports = run_checks(None, eps=1e-5)
    elapsed = time.perf_counter() - start
    oracle_ok = all(v <= 1e-12 for v in worst.values()) and min(counts.values()) >= 100
    grads = {r.op_name: r.max_rel_error for r in reports}
    grad_ok = set(grads) == set(OP_CHECKS) | set(BLOCK_CHECKS) and all(e < 1e-4 for e in grads.values())
    ok = oracle_ok and grad_ok and elapsed < 120
    verdict(
        1,
        "kernel oracles and gradient checks",
        ok,
        f"max oracle error {max(worst.values()):.1e} over {min(counts.values())}+ shapes per op, "
        f"max FD rel error {max(grads.values()):.1e} over {len(grads)} checks, {elapsed:.0f}s",
    )
    assert ok


# 2 ---------------------------------------------------------------------------


def test_criterion_2_hungarian_optimality(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    mismatches = 0
    instances = 1000
    for trial in range(instances):
        k, n = (int(v) for v in rng.integers(1, 8, size=2))
        # integer costs make the comparison exact; float costs go through the same sums
        cost = rng.integers(0, 20, (k, n)).astype(float) if trial % 2 else rng.uniform(0, 1, (k, n))
        result = hungarian(cost)
        best, _ = brute_force_assignment(cost)
        got = assignment_cost(cost, result.pairs)
        if len(result.pairs) != min(k, n) or got != best and abs(got - best) > 1e-12:
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    verdict(2, "Hungarian equals brute force", ok, f"{instances} instances, {mismatches} mismatches, {elapsed:.0f}s")
    assert ok


# 3 ---------------------------------------------------------------------------


def test_criterion_3_loss_identities(verdict):
    checks = {}
    checks["giou identical"] = giou_xyxy([0.2, 0.1, 0.7, 0.5], [0.2, 0.1, 0.7, 0.5]) == 1.0
    checks["giou -7/9"] = abs(giou_xyxy([0, 0, 1, 1], [2, 2, 3, 3]) + 7 / 9) <= 1e-12
    rng = np.random.default_rng(303)
    worst_bce = 0.0
    for _ in range(100):
        logits = rng.standard_normal((5, 3)) * 3
        targets = (rng.uniform(size=(5, 3)) < 0.4).astype(float)
        worst_bce = max(worst_bce, abs(focal_loss(Tensor(logits), targets, alpha=None, gamma=0.0).item() - bce_loop(logits, targets)))
    checks["focal to BCE"] = worst_bce <= 1e-12
    exact = True
    w = LossWeights()
    for _ in range(100):
        n = int(rng.integers(1, 5))
        gt = GroundTruth(np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.05, 0.3, (n, 2))]), rng.integers(0, 3, n))
        out = DecoderOutput([LayerOutput(Tensor(rng.standard_normal((6, 3))), Tensor(rng.standard_normal((6, 4))).sigmoid())])
        b = total_loss(out, gt, None, w)
        exact &= b.hungarian == 5 * b.l1 + 2 * b.giou + b.focal
    checks["breakdown identity"] = exact
    ok = all(checks.values())
    verdict(3, "loss identities", ok, ", ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items()) + f", bce gap {worst_bce:.1e}")
    assert ok


# 4 ---------------------------------------------------------------------------


def test_criterion_4_counting_tables(verdict):
    boundaries = {10: 0, 100: 1, 500: 2, 501: 3}
    boundary_ok = all(count_to_level(n).index == lv for n, lv in boundaries.items())
    budgets = [level_to_budget(level_from_index(i, DEFAULT_THRESHOLDS), DEFAULT_BUDGETS).k for i in range(4)]
    budget_ok = budgets == [300, 500, 900, 1500]
    ks = [level_to_budget(count_to_level(n)).k for n in range(3001)]
    monotone = all(b >= a for a, b in zip(ks, ks[1:]))
    chain_ok = all(count_to_level(n).index == count_level_if_chain(n) for n in range(3001))
    rng = np.random.default_rng(404)
    derived_ok = True
    for _ in range(200):
        counts = rng.integers(0, 2000, int(rng.integers(1, 80)))
        arr = counts.astype(float)
        mean, std = arr.mean(), arr.std()
        want = [max(min(mean - std, mean - 1), 1.0), max(mean, 1.0), max(mean + std, mean + 1, 1.0)]
        want[1] = max(want[1], want[0] + 1)
        want[2] = max(want[2], want[1] + 1)
        derived_ok &= np.allclose(derive_thresholds(counts.tolist()).cuts, want, rtol=1e-12, atol=1e-12)
    desk_ok = [level_to_budget(level_from_index(i, DEFAULT_THRESHOLDS), DESK_BUDGETS).k for i in range(4)] == [30, 50, 90, 150]
    ok = boundary_ok and budget_ok and monotone and chain_ok and derived_ok and desk_ok
    verdict(
        4,
        "count-level and budget mapping",
        ok,
        f"boundaries {boundary_ok}, budgets {budgets}, monotone over 0..3000 {monotone}, derive_thresholds {derived_ok}",
    )
    assert ok


# 5 ---------------------------------------------------------------------------


def test_criterion_5_dynamic_selection(verdict):
    rng = np.random.default_rng(505)
    shapes = [(16, 16), (8, 8), (4, 4)]
    selector = QuerySelector(8, 3, rng)
    decoder = Decoder(8, 2, 2, 3, rng)
    levels = [PyramidLevel(i + 1, Tensor(rng.standard_normal((8, h, w))), 2 ** (i + 1)) for i, (h, w) in enumerate(shapes)]
    memory = flatten_levels(levels)
    before = {n: p.data.copy() for n, p in decoder.named_parameters()}
    sets = {}
    shapes_ok = True
    for k in DESK_BUDGETS:
        qs, _, _ = selector(levels, k)
        sets[k] = qs
        out = decode(qs, memory, decoder)
        shapes_ok &= all(l.class_logits.shape == (k, 3) and l.boxes.shape == (k, 4) for l in out.per_layer)
    prefix_ok = all(
        sets[b].indices[:a].tolist() == sets[a].indices.tolist() and np.array_equal(sets[b].anchors.data[:a], sets[a].anchors.data)
        for a, b in zip(DESK_BUDGETS, DESK_BUDGETS[1:])
    )
    after = dict(decoder.named_parameters())
    agnostic = shapes_ok and set(before) == set(after) and all(np.array_equal(v, after[n].data) for n, v in before.items())
    priors = anchor_priors(shapes)[:20]
    qs = make_queries(Tensor(rng.standard_normal((20, 8))), priors, Linear(8, 8, rng), MLP([8, 8, 4], rng, zero_last=True))
    identity = float(np.max(np.abs(qs.anchors.data - priors)))
    valid = True
    for _ in range(300):
        p = rng.uniform(1e-3, 1 - 1e-3, (10, 4))
        bias = rng.standard_normal((10, 4)) * 10 ** rng.uniform(-3, 6)
        out = refine_anchors(p, Tensor(bias)).data
        valid &= bool(np.all((out > 0) & (out < 1)))
        for row in out:
            AnchorBox(*row)
    ok = prefix_ok and identity <= 1e-15 and valid and agnostic
    verdict(
        5,
        "dynamic query selection",
        ok,
        f"prefix {prefix_ok}, zero-bias drift {identity:.1e}, anchors valid {valid}, weights k-agnostic {agnostic}",
    )
    assert ok


# 6 ---------------------------------------------------------------------------


def test_criterion_6_metric_oracle(verdict):
    gt = [Annotations(np.array([[0.0, 0, 10, 10]]), np.array([0]))]
    det = [Detections(np.array([[0.0, 0, 6, 10]]), np.array([0.9]), np.array([0]))]
    r = evaluate(det, gt)
    hand_ok = r.ap50 == 1.0 and r.ap75 == 0.0 and abs(r.ap - 0.3) <= 1e-12
    rng = np.random.default_rng(606)
    violations = 0
    trials = 0
    while trials < 120:
        n = int(rng.integers(2, 9))
        cells = rng.choice(64, n, replace=False)
        g = np.column_stack([cells % 8 * 8.0, cells // 8 * 8.0, rng.uniform(3, 7, (n, 2))])
        hit = rng.uniform(size=n) < 0.7
        fps = np.column_stack([rng.uniform(200, 400, (3, 2)), rng.uniform(2, 6, (3, 2))])
        boxes = np.vstack([g[hit], fps])
        if hit.sum() == 0:
            continue
        scores = rng.uniform(size=len(boxes))
        ann = [Annotations(g, np.zeros(n, dtype=int))]

        def ap(keep, s=scores):
            return evaluate([Detections(boxes[keep], s[keep], np.zeros(int(keep.sum()), dtype=int))], ann).ap50

        every = np.ones(len(boxes), dtype=bool)
        base = ap(every)
        drop_fp = every.copy()
        drop_fp[int(hit.sum()) + int(rng.integers(3))] = False
        drop_tp = every.copy()
        drop_tp[int(rng.integers(hit.sum()))] = False
        violations += ap(drop_fp) < base - 1e-12
        violations += ap(drop_tp) > base + 1e-12
        trials += 1
    sizes = rng.uniform(0.01, 100, 2000)
    bucket_ok = all(scale_bucket([0, 0, s, s]) == scale_bucket_if_chain(math.sqrt(s * s)) for s in sizes)
    bucket_ok &= scale_bucket([0, 0, 12.7, 12.7]) == "t" and scale_bucket([0, 0, 8, 8]) == "t"
    ok = hand_ok and violations == 0 and bucket_ok
    verdict(
        6,
        "metric oracle",
        ok,
        f"AP50={r.ap50} AP75={r.ap75} AP={r.ap:.12g}, {trials} monotonicity trials with {violations} violations, buckets {bucket_ok}",
    )
    assert ok


# 7, 8 ------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Default configuration trained once per seed, then evaluated on the
    stratified set with dynamic budgets and with a fixed k=90."""
    root = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    runs = []
    for seed in SEEDS:
        config = ExperimentConfig(seed=seed).with_overrides(output_dir=str(root / f"seed{seed}"))
        t0 = time.perf_counter()
        marks = {}

        def progress(entry, marks=marks, t0=t0):
            if "counting_accuracy" in entry and entry.get("stage") == 1:
                marks["stage1_seconds"] = time.perf_counter() - t0

        record = train(config, progress=progress)
        eval_set = stratified_eval_set(config)
        dynamic = evaluate_run(record.final_checkpoint, eval_set, config)
        fixed = evaluate_run(record.final_checkpoint, eval_set, config, fixed_k=90)
        runs.append({"config": config, "record": record, "dynamic": dynamic, "fixed": fixed, **marks})
    return runs, time.perf_counter() - start


def _band(result, name):
    return next(b for b in result.bands if b.band == name)


@pytest.mark.slow
def test_criterion_7_counting_accuracy(desk_runs, verdict):
    runs, _ = desk_runs
    first = runs[0]
    acc = first["record"].stage1_counting_accuracy
    seconds = first["stage1_seconds"]
    images = first["config"].data.train_images
    others = ", ".join(f"seed {r['config'].seed}: {r['record'].stage1_counting_accuracy:.3f}" for r in runs[1:])
    ok = acc >= 0.90 and images >= 2000 and seconds < 15 * 60
    verdict(7, "stage-1 counting accuracy", ok, f"seed 0 accuracy {acc:.3f} on held-out split, {images} training images, {seconds:.0f}s; {others}")
    assert ok


@pytest.mark.slow
def test_criterion_8_dynamic_vs_fixed(desk_runs, verdict):
    runs, seconds = desk_runs
    dense_fn = {m: float(np.mean([_band(r[m], "dense").lrp_fn for r in runs])) for m in ("dynamic", "fixed")}
    sparse_fp = {m: float(np.mean([_band(r[m], "sparse").lrp_fp for r in runs])) for m in ("dynamic", "fixed")}
    ok = dense_fn["dynamic"] < dense_fn["fixed"] and sparse_fp["dynamic"] < sparse_fp["fixed"] and seconds < 45 * 60
    verdict(
        8,
        "dynamic vs fixed k=90",
        ok,
        f"dense LRP FN {dense_fn['dynamic']:.4f} vs {dense_fn['fixed']:.4f}, "
        f"sparse LRP FP {sparse_fp['dynamic']:.4f} vs {sparse_fp['fixed']:.4f}, {len(runs)} seeds, {seconds / 60:.1f} min",
    )
    assert ok


# 9 ---------------------------------------------------------------------------


def test_criterion_9_ablation_harness(tmp_path, verdict):
    config = ExperimentConfig().with_overrides(
        output_dir=str(tmp_path),
        data={"train_images": 16, "val_images": 8},
        model={"dim": 16, "heads": 2, "encoder_layers": 1, "decoder_layers": 1},
        schedule={"stage1_steps": 4, "stage2_steps": 3},
    )
    expected = {
        "components": (["baseline", "CC+DQS", "CC+FE", "CC+DQS+FE"], ["CC", "DQS", "FE"]),
        "counting_mode": (["classification", "regression"], ["method"]),
        "num_levels": (["4cls", "5cls"], ["levels"]),
    }
    notes = []
    ok = True
    for axis, (names, marks) in expected.items():
        first = ablate(config, axis, tmp_path / "first")
        again = ablate(config, axis, tmp_path / "again")
        structure = [r.name for r in first.rows] == names and all(list(r.marks) == marks for r in first.rows)
        deterministic = first.to_csv() == again.to_csv() and first.records == again.records
        header = first.to_markdown().splitlines()[0]
        structure &= all(col in header for col in ("AP", "AP50", "AP75", "APvt", "APt", "APs", "APm"))
        ok &= structure and deterministic
        notes.append(f"{axis}: {len(first.rows)} rows, structure {structure}, rerun identical {deterministic}")
    verdict(9, "ablation harness fidelity", ok, "; ".join(notes))
    assert ok
