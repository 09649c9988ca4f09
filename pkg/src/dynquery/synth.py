"""Synthetic tiny-object scenes with a long-tailed object count.

Counts follow a discretised log-normal whose moments are matched to the
aerial tiny-object statistics (24.64 +- 63.94 objects per image, at most
2267), multiplied by ``count_scale``. Object sizes follow a log-normal with
mean 12.7 px and 86% of objects under 16 px, multiplied by ``size_scale``.

A dataset directory holds ``annotations.json`` (COCO-style, boxes as
``[x, y, w, h]`` pixels) and ``images.npy`` (``[n, 3, H, W]`` float64).
"""

from __future__ import annotations

import colorsys
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .autograd import Tensor
from .counting import DEFAULT_THRESHOLDS, CountLevel, LevelThresholds, count_to_level
from .matching import GroundTruth

__all__ = [
    "SpecError",
    "DatasetParseError",
    "SceneSpec",
    "SyntheticScene",
    "Dataset",
    "fit_count_lognormal",
    "count_moments",
    "fit_size_lognormal",
    "sample_counts",
    "generate",
    "save",
    "load",
]

ANNOTATION_FILE = "annotations.json"
IMAGE_FILE = "images.npy"


class SpecError(ValueError):
    """Scene specification that cannot be realised."""


class DatasetParseError(ValueError):
    """Corrupt or truncated dataset file; ``offset`` is the failing byte."""

    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    count_mean: float = 24.64
    count_std: float = 63.94
    count_max: int = 2267
    count_scale: float = 1.0
    size_mean: float = 12.7
    size_frac_below_16: float = 0.86
    size_scale: float = 1.0
    size_range_px: tuple[float, float] = (2.0, 64.0)
    aspect_jitter: float = 0.25
    num_classes: int = 3
    noise_std: float = 0.03
    forced_count: int | None = None
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.size_range_px
        if self.image_size < 1 or self.num_classes < 1:
            raise SpecError("image_size and num_classes must be positive")
        if not 0 < lo <= hi:
            raise SpecError(f"size range must satisfy 0 < lo <= hi, got {self.size_range_px}")
        if lo >= self.image_size:
            raise SpecError(f"smallest object ({lo} px) does not fit a {self.image_size} px image")
        if self.count_scale <= 0 or self.size_scale <= 0:
            raise SpecError("scales must be positive")
        if self.forced_count is not None and self.forced_count < 1:
            raise SpecError("forced_count must be >= 1")

    @property
    def max_count(self) -> int:
        return max(1, int(round(self.count_max * self.count_scale)))

    @property
    def target_mean(self) -> float:
        return self.count_mean * self.count_scale

    @property
    def target_std(self) -> float:
        return self.count_std * self.count_scale

    @property
    def thresholds(self) -> LevelThresholds:
        return DEFAULT_THRESHOLDS.scaled(self.count_scale)

    def size_bounds(self) -> tuple[float, float]:
        lo, hi = self.size_range_px
        return lo, min(hi, self.image_size - 1e-9)


@dataclass
class SyntheticScene:
    image: Tensor  # [3, H, W]
    gt: GroundTruth  # normalised
    count_level: CountLevel


@dataclass
class Dataset:
    spec: SceneSpec
    images: np.ndarray  # [n, 3, H, W]
    boxes: list[np.ndarray]  # per image [n_i, 4] pixel xywh
    labels: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(b) for b in self.boxes], dtype=np.int64)

    def ground_truth(self, i: int) -> GroundTruth:
        b = self.boxes[i]
        size = self.spec.image_size
        cxcywh = np.concatenate([b[:, :2] + b[:, 2:] / 2, b[:, 2:]], axis=1) / size
        return GroundTruth(cxcywh, self.labels[i])

    def scene(self, i: int, thresholds: LevelThresholds | None = None) -> SyntheticScene:
        th = thresholds or self.spec.thresholds
        return SyntheticScene(Tensor(self.images[i]), self.ground_truth(i), count_to_level(len(self.boxes[i]), th))

    def subset(self, indices) -> "Dataset":
        idx = [int(i) for i in indices]
        return Dataset(self.spec, self.images[idx], [self.boxes[i] for i in idx], [self.labels[i] for i in idx], dict(self.meta))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or self.spec != other.spec or len(self) != len(other):
            return False
        return (
            np.array_equal(self.images, other.images)
            and all(np.array_equal(a, b) for a, b in zip(self.boxes, other.boxes))
            and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels))
        )


def count_moments(mu: float, sigma: float, max_count: int) -> tuple[float, float]:
    """Exact mean and std of ``clip(ceil(LogNormal(mu, sigma)), 1, max_count)``."""
    n = np.arange(1, max_count + 1, dtype=np.float64)
    cdf = stats.lognorm.cdf(n, s=sigma, scale=math.exp(mu))
    p = np.diff(np.concatenate([[0.0], cdf]))
    p[-1] += 1.0 - cdf[-1]
    mean = float((p * n).sum())
    var = float((p * (n - mean) ** 2).sum())
    return mean, math.sqrt(max(var, 0.0))


@lru_cache(maxsize=64)
def fit_count_lognormal(mean: float, std: float, max_count: int) -> tuple[float, float]:
    """``(mu, sigma)`` whose discretised, truncated count matches ``mean``/``std``."""
    if mean < 1 or max_count < 1:
        raise SpecError(f"count mean {mean} must be >= 1")

    def residual(params):
        m, s = count_moments(params[0], math.exp(params[1]), max_count)
        return [m / mean - 1.0, s / std - 1.0]

    s2 = math.log1p((std / mean) ** 2)
    start = [math.log(mean) - s2 / 2, math.log(math.sqrt(s2))]
    sol = optimize.least_squares(residual, start, xtol=1e-12, ftol=1e-12)
    mu, sigma = float(sol.x[0]), float(math.exp(sol.x[1]))
    if max(abs(r) for r in residual(sol.x)) > 1e-3:
        raise SpecError(f"no log-normal matches mean {mean} / std {std} under max {max_count}")
    return mu, sigma


@lru_cache(maxsize=16)
def fit_size_lognormal(mean: float, frac_below_16: float) -> tuple[float, float]:
    """``(mu, sigma)`` with the given mean and ``P(size < 16) = frac_below_16``."""
    z = stats.norm.ppf(frac_below_16)

    def residual(sigma):
        mu = math.log(mean) - sigma**2 / 2
        return (math.log(16.0) - mu) / sigma - z

    # two roots exist; the narrower one keeps sizes clustered around the mean
    turning = math.sqrt(2.0 * math.log(16.0 / mean))
    if residual(turning) > 0:
        raise SpecError(f"no log-normal with mean {mean} has {frac_below_16:.0%} of sizes below 16")
    sigma = optimize.brentq(residual, 1e-6, turning)
    return math.log(mean) - sigma**2 / 2, sigma


def sample_counts(spec: SceneSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    if spec.forced_count is not None:
        return np.full(n, spec.forced_count, dtype=np.int64)
    mu, sigma = fit_count_lognormal(spec.target_mean, spec.target_std, spec.max_count)
    # stratified inverse-cdf draws: every marginal is the target law, and the
    # heavy tail is represented in proportion even for moderate n
    u = (rng.permutation(n) + rng.uniform(size=n)) / max(n, 1)
    x = stats.lognorm.ppf(u, s=sigma, scale=math.exp(mu))
    return np.clip(np.ceil(x), 1, spec.max_count).astype(np.int64)


def _sample_sizes(spec: SceneSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    mu, sigma = fit_size_lognormal(spec.size_mean, spec.size_frac_below_16)
    lo, hi = spec.size_bounds()
    s = np.exp(rng.normal(mu, sigma, size=n)) * spec.size_scale
    s = np.clip(s, lo, hi)
    a = rng.uniform(-spec.aspect_jitter, spec.aspect_jitter, size=n)
    w = np.clip(s * np.exp(a), lo, hi)
    h = np.clip(s * np.exp(-a), lo, hi)
    return np.stack([w, h], axis=1)


def class_colors(num_classes: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(i / num_classes, 0.85, 1.0) for i in range(num_classes)])


def _coverage(lo: float, hi: float, size: int) -> np.ndarray:
    """Fraction of each unit pixel ``[j, j+1)`` covered by ``[lo, hi]``."""
    j = np.arange(size)
    return np.clip(np.minimum(j + 1, hi) - np.maximum(j, lo), 0, 1)


def render(boxes: np.ndarray, labels: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    img = np.full((3, size, size), 0.1) + rng.normal(0.0, spec.noise_std, size=(3, size, size))
    colors = class_colors(spec.num_classes)
    for (x, y, w, h), c in zip(boxes, labels):
        cov = np.outer(_coverage(y, y + h, size), _coverage(x, x + w, size))
        img = img * (1 - cov) + colors[c][:, None, None] * cov
    return img


def _scene(spec: SceneSpec, index: int, count: int):
    rng = np.random.default_rng([spec.seed, index])
    wh = _sample_sizes(spec, rng, count)
    size = spec.image_size
    xy = rng.uniform(0.0, 1.0, size=(count, 2)) * (size - wh)
    boxes = np.concatenate([xy, wh], axis=1)
    labels = rng.integers(0, spec.num_classes, size=count)
    return render(boxes, labels, spec, rng), boxes, labels.astype(np.int64)


def generate(spec: SceneSpec, n_images: int, counts=None) -> Dataset:
    """Deterministic in ``(spec, n_images)``; given its count, scene ``i``
    depends only on ``(seed, i)``. ``counts`` fixes the per-image object
    numbers instead of sampling them."""
    if n_images < 0:
        raise SpecError("n_images must be non-negative")
    if counts is None:
        counts = sample_counts(spec, np.random.default_rng([spec.seed, 2**31]), n_images)
    else:
        counts = np.asarray(counts, dtype=np.int64).reshape(-1)
        if len(counts) != n_images or np.any(counts < 1):
            raise SpecError("counts must hold one positive entry per image")
    size = spec.image_size
    images = np.zeros((n_images, 3, size, size))
    boxes, labels = [], []
    for i, n in enumerate(counts):
        images[i], b, lab = _scene(spec, i, int(n))
        boxes.append(b)
        labels.append(lab)
    return Dataset(spec, images, boxes, labels)


def _spec_to_json(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["size_range_px"] = list(spec.size_range_px)
    return d


def _spec_from_json(d: dict) -> SceneSpec:
    d = dict(d)
    d["size_range_px"] = tuple(d["size_range_px"])
    return SceneSpec(**d)


def save(dataset: Dataset, path: str | os.PathLike) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for i, (b, lab) in enumerate(zip(dataset.boxes, dataset.labels)):
        images.append({"id": i, "width": dataset.spec.image_size, "height": dataset.spec.image_size})
        for box, c in zip(b, lab):
            x, y, w, h = (float(v) for v in box)
            annotations.append({"id": ann_id, "image_id": i, "category_id": int(c), "bbox": [x, y, w, h], "area": w * h})
            ann_id += 1
    doc = {
        "info": {"spec": _spec_to_json(dataset.spec), "meta": dataset.meta},
        "images": images,
        "annotations": annotations,
        "categories": [{"id": c, "name": f"class{c}"} for c in range(dataset.spec.num_classes)],
    }
    (root / ANNOTATION_FILE).write_text(json.dumps(doc))
    np.save(root / IMAGE_FILE, dataset.images)
    return root


def _load_images(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    try:
        buf = io.BytesIO(raw)
        version = np.lib.format.read_magic(buf)
        reader = np.lib.format.read_array_header_1_0 if version == (1, 0) else np.lib.format.read_array_header_2_0
        shape, fortran, dtype = reader(buf)
    except Exception as exc:  # noqa: BLE001 - any header failure is a parse error
        raise DatasetParseError(path, 0, f"bad array header ({exc})") from None
    header_end = buf.tell()
    expected = header_end + int(np.prod(shape)) * dtype.itemsize
    if len(raw) < expected:
        raise DatasetParseError(path, len(raw), f"truncated array data, expected {expected} bytes")
    arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=header_end)
    return arr.reshape(shape, order="F" if fortran else "C").astype(np.float64)


def load(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    ann_path = root / ANNOTATION_FILE
    text = ann_path.read_bytes()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text.decode("utf-8", errors="replace")[: exc.pos].encode())
        raise DatasetParseError(ann_path, offset, exc.msg) from None
    except UnicodeDecodeError as exc:
        raise DatasetParseError(ann_path, exc.start, "invalid utf-8") from None
    try:
        spec = _spec_from_json(doc["info"]["spec"])
        n = len(doc["images"])
        boxes = [[] for _ in range(n)]
        labels = [[] for _ in range(n)]
        for ann in doc["annotations"]:
            boxes[ann["image_id"]].append(ann["bbox"])
            labels[ann["image_id"]].append(ann["category_id"])
    except (KeyError, TypeError, IndexError) as exc:
        raise DatasetParseError(ann_path, len(text), f"missing or malformed field {exc}") from None
    images = _load_images(root / IMAGE_FILE)
    if images.shape[0] != n:
        raise DatasetParseError(root / IMAGE_FILE, 0, f"{images.shape[0]} images for {n} annotation entries")
    return Dataset(
        spec,
        images,
        [np.asarray(b, dtype=np.float64).reshape(-1, 4) for b in boxes],
        [np.asarray(lab, dtype=np.int64) for lab in labels],
        doc["info"].get("meta", {}),
    )
