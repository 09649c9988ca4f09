"""Registry of finite-difference gradient checks for every differentiable
operator and composite block, shared by the test-suite and the CLI."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor, concat, maximum, minimum, stack, where
from .cgfe import CGFE
from .counting import DensityExtractor, DensityMap
from .detr_head import DecoderOutput, EncoderLayer, LayerOutput, sine_embedding
from .gradcheck import GradCheckReport, grad_check
from .matching import GroundTruth, LossWeights, giou_tensor, hungarian_loss, total_loss
from .ops import attention, conv2d, layer_norm, linear, pool_channel, pool_spatial, resize_bilinear
from .pyramid import PyramidLevel
from .query_select import refine_anchors

__all__ = ["OP_CHECKS", "BLOCK_CHECKS", "run_checks"]

CheckFn = Callable[[float, int], GradCheckReport]


def _t(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale)


def _away_from_zero(rng: np.random.Generator, *shape) -> Tensor:
    """Values with |x| >= 0.1 so kinks at zero stay outside the FD stencil."""
    x = rng.uniform(0.1, 1.5, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(x)


def _op(name: str, build) -> CheckFn:
    def run(eps: float, seed: int) -> GradCheckReport:
        rng = np.random.default_rng(seed)
        fn, inputs = build(rng)
        return grad_check(fn, inputs, eps=eps, op_name=name, seed=seed)

    return run


def _elementwise():
    def positive(rng):
        return Tensor(rng.uniform(0.5, 2.0, (3, 4)))

    return {
        "add": _op("add", lambda r: (lambda a, b: a + b, [_t(r, 3, 4), _t(r, 4)])),
        "sub": _op("sub", lambda r: (lambda a, b: a - b, [_t(r, 3, 4), _t(r, 3, 1)])),
        "mul": _op("mul", lambda r: (lambda a, b: a * b, [_t(r, 3, 4), _t(r, 1, 4)])),
        "div": _op("div", lambda r: (lambda a, b: a / b, [_t(r, 3, 4), positive(r)])),
        "pow": _op("pow", lambda r: (lambda a: a**1.7, [positive(r)])),
        "matmul": _op("matmul", lambda r: (lambda a, b: a @ b, [_t(r, 3, 5), _t(r, 5, 2)])),
        "exp": _op("exp", lambda r: (lambda a: a.exp(), [_t(r, 3, 4)])),
        "log": _op("log", lambda r: (lambda a: a.log(), [positive(r)])),
        "sqrt": _op("sqrt", lambda r: (lambda a: a.sqrt(), [positive(r)])),
        "abs": _op("abs", lambda r: (lambda a: a.abs(), [_away_from_zero(r, 3, 4)])),
        "sigmoid": _op("sigmoid", lambda r: (lambda a: a.sigmoid(), [_t(r, 3, 4)])),
        "relu": _op("relu", lambda r: (lambda a: a.relu(), [_away_from_zero(r, 3, 4)])),
        "sin": _op("sin", lambda r: (lambda a: a.sin(), [_t(r, 3, 4)])),
        "cos": _op("cos", lambda r: (lambda a: a.cos(), [_t(r, 3, 4)])),
        "tanh": _op("tanh", lambda r: (lambda a: a.tanh(), [_t(r, 3, 4)])),
        "log_sigmoid": _op("log_sigmoid", lambda r: (lambda a: a.log_sigmoid(), [_t(r, 3, 4, scale=3.0)])),
        "clip": _op("clip", lambda r: (lambda a: a.clip(-0.5, 0.5), [Tensor(r.permutation(np.linspace(-0.8, 0.8, 9)).reshape(3, 3))])),
        "inverse_sigmoid": _op(
            "inverse_sigmoid", lambda r: (lambda a: a.inverse_sigmoid(), [Tensor(r.uniform(0.05, 0.95, (3, 4)))])
        ),
        "sum": _op("sum", lambda r: (lambda a: a.sum(axis=1), [_t(r, 3, 4)])),
        "mean": _op("mean", lambda r: (lambda a: a.mean(axis=(0, 2)), [_t(r, 2, 3, 4)])),
        "max": _op("max", lambda r: (lambda a: a.max(axis=1), [Tensor(r.permutation(12).reshape(3, 4) * 0.3)])),
        "softmax": _op("softmax", lambda r: (lambda a: a.softmax(axis=-1), [_t(r, 3, 5)])),
        "log_softmax": _op("log_softmax", lambda r: (lambda a: a.log_softmax(axis=0), [_t(r, 3, 5)])),
        "reshape": _op("reshape", lambda r: (lambda a: a.reshape(4, 3) * Tensor(np.arange(12.0).reshape(4, 3)), [_t(r, 3, 4)])),
        "transpose": _op("transpose", lambda r: (lambda a: a.transpose(2, 0, 1), [_t(r, 2, 3, 4)])),
        "getitem": _op("getitem", lambda r: (lambda a: a[1:, ::2], [_t(r, 3, 4)])),
        "take_rows": _op("take_rows", lambda r: (lambda a: a.take_rows(np.array([2, 0, 2, 1])), [_t(r, 3, 4)])),
        "concat": _op("concat", lambda r: (lambda a, b: concat([a, b], axis=1), [_t(r, 3, 2), _t(r, 3, 4)])),
        "stack": _op("stack", lambda r: (lambda a, b: stack([a, b], axis=0), [_t(r, 3, 4), _t(r, 3, 4)])),
        "maximum": _op("maximum", lambda r: (lambda a, b: maximum(a, b), [_t(r, 3, 4), _t(r, 3, 4)])),
        "minimum": _op("minimum", lambda r: (lambda a, b: minimum(a, b), [_t(r, 3, 4), _t(r, 3, 4)])),
        "where": _op(
            "where", lambda r: (lambda a, b: where(np.arange(12).reshape(3, 4) % 2 == 0, a, b), [_t(r, 3, 4), _t(r, 3, 4)])
        ),
    }


def _giou_case(rng):
    # partial overlaps only: every box edge moves the GIoU, so no gradient is exactly zero
    target = np.column_stack([rng.uniform(0.3, 0.7, (4, 2)), rng.uniform(0.1, 0.3, (4, 2))])
    pred = target.copy()
    pred[:, 0] += 0.2 * target[:, 2]
    pred[:, 1] -= 0.3 * target[:, 3]
    pred[:, 2:] *= rng.uniform(0.8, 1.2, (4, 2))
    raw = Tensor(np.log(pred) - np.log1p(-pred))
    return (lambda p: giou_tensor(p.sigmoid(), target)), [raw]


def _tensor_ops():
    return {
        "conv2d": _op(
            "conv2d",
            lambda r: (lambda x, w, b: conv2d(x, w, b, stride=1, padding=2, dilation=2), [_t(r, 1, 3, 6, 5), _t(r, 4, 3, 3, 3), _t(r, 4)]),
        ),
        "conv2d_strided": _op(
            "conv2d_strided",
            lambda r: (lambda x, w: conv2d(x, w, None, stride=2, padding=1), [_t(r, 2, 2, 7, 6), _t(r, 3, 2, 3, 3)]),
        ),
        "pool_channel_avg": _op("pool_channel_avg", lambda r: (lambda x: pool_channel(x, "avg"), [_t(r, 2, 4, 3, 5)])),
        "pool_channel_max": _op(
            "pool_channel_max", lambda r: (lambda x: pool_channel(x, "max"), [Tensor(r.permutation(120).reshape(2, 4, 3, 5) * 0.1)])
        ),
        "pool_spatial_avg": _op("pool_spatial_avg", lambda r: (lambda x: pool_spatial(x, "avg"), [_t(r, 2, 4, 3, 5)])),
        "pool_spatial_max": _op(
            "pool_spatial_max", lambda r: (lambda x: pool_spatial(x, "max"), [Tensor(r.permutation(120).reshape(2, 4, 3, 5) * 0.1)])
        ),
        "linear": _op("linear", lambda r: (lambda x, w, b: linear(x, w, b), [_t(r, 5, 3), _t(r, 4, 3), _t(r, 4)])),
        "attention": _op(
            "attention", lambda r: (lambda q, k, v: attention(q, k, v, heads=2), [_t(r, 3, 4), _t(r, 5, 4), _t(r, 5, 4)])
        ),
        "layer_norm": _op("layer_norm", lambda r: (lambda x, g, b: layer_norm(x, g, b), [_t(r, 3, 6), _t(r, 6), _t(r, 6)])),
        "resize_bilinear": _op("resize_bilinear", lambda r: (lambda x: resize_bilinear(x, 3, 7), [_t(r, 2, 5, 4)])),
        "giou": _op("giou", _giou_case),
        "sine_embedding": _op("sine_embedding", lambda r: (lambda c: sine_embedding(c, 8), [Tensor(r.uniform(0, 1, (3, 2)))])),
    }


OP_CHECKS: dict[str, CheckFn] = {**_elementwise(), **_tensor_ops()}


# composite blocks ----------------------------------------------------------

def _params(module, limit: int = 2) -> list[Tensor]:
    return [p for _, p in module.named_parameters()][:limit]


def _density_extractor(eps: float, seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    block = DensityExtractor(4, rng, (1, 2))
    x = _t(rng, 4, 5, 5)
    inputs = [x, *_params(block)]
    return grad_check(lambda s, *_: block(s).map, inputs, eps=eps, op_name="density_extractor", max_entries=40, seed=seed)


def _cgfe(eps: float, seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    dim = 4
    block = CGFE(dim, 2, rng, reduction=2)
    fc = _t(rng, dim, 8, 8)
    s1, s2 = _t(rng, dim, 4, 4), _t(rng, dim, 2, 2)

    def fn(f, a, b, *_):
        out, _maps = block(DensityMap(f), [PyramidLevel(1, a, 2), PyramidLevel(2, b, 4)])
        return concat([lv.reshape(-1) for lv in out.levels])

    inputs = [fc, s1, s2, *_params(block, 4)]
    return grad_check(fn, inputs, eps=eps, op_name="cgfe", max_entries=30, seed=seed)


def _query_refinement(eps: float, seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    priors = rng.uniform(0.05, 0.95, (5, 4))
    bias = _t(rng, 5, 4)
    return grad_check(lambda b: refine_anchors(priors, b), [bias], eps=eps, op_name="query_refinement", seed=seed)


def _encoder_layer(eps: float, seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    layer = EncoderLayer(8, 2, rng, ffn_dim=16)
    x, pos = _t(rng, 6, 8), _t(rng, 6, 8)
    inputs = [x, pos, *_params(layer, 3)]
    return grad_check(lambda a, p, *_: layer(a, p), inputs, eps=eps, op_name="encoder_layer", max_entries=30, seed=seed)


def _total_loss(eps: float, seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    k, m = 5, 3
    gt = GroundTruth(
        np.column_stack([rng.uniform(0.2, 0.8, (3, 2)), rng.uniform(0.05, 0.3, (3, 2))]),
        np.array([0, 2, 1]),
    )
    raw = [_t(rng, k, m), _t(rng, k, 4), _t(rng, k, m), _t(rng, k, 4)]
    count_logits = _t(rng, 4)
    scores = _t(rng, m, 7)
    targets = (rng.uniform(size=(m, 7)) < 0.3).astype(float)

    def outputs(c0, b0, c1, b1):
        return DecoderOutput([LayerOutput(c0, b0.sigmoid()), LayerOutput(c1, b1.sigmoid())])

    first = outputs(*raw)
    matches = [hungarian_loss(layer.class_logits, layer.boxes, gt)[4] for layer in first.per_layer]

    def fn(c0, b0, c1, b1, cl, sc):
        return total_loss(outputs(c0, b0, c1, b1), gt, (cl, 2), LossWeights(), "classification", (sc, targets), matches).total_tensor

    return grad_check(fn, [*raw, count_logits, scores], eps=eps, op_name="total_loss", seed=seed)


BLOCK_CHECKS: dict[str, CheckFn] = {
    "density_extractor": _density_extractor,
    "cgfe": _cgfe,
    "query_refinement": _query_refinement,
    "encoder_layer": _encoder_layer,
    "total_loss": _total_loss,
}


def run_checks(names: list[str] | None = None, eps: float = 1e-5, seed: int = 0) -> list[GradCheckReport]:
    """Run the named checks (all when ``None``) and return their reports."""
    registry = {**OP_CHECKS, **BLOCK_CHECKS}
    if names is None:
        names = list(registry)
    unknown = [n for n in names if n not in registry]
    if unknown:
        raise KeyError(f"unknown gradient check(s): {', '.join(unknown)}")
    return [registry[n](eps, seed) for n in names]
