"""Synthetic binary denoising benchmark.

Clean masks come from a shape family; the corrupted input is
``clip(mask + sigma * g, 0, 1)`` with ``g`` unit-variance noise (standardized
zero-mean Gumbel, or Gaussian) and ``sigma = std(mask) / snr`` per image.
One set of PL-trained weights is shared by every inference method.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .inference import METHODS, InferenceConfig, infer
from .learning import Dataset, TrainConfig, TrainResult, train
from .model import GridModel, Weights, grid_edges
from .perturb import GumbelSource, draw_gumbel

SHAPE_FAMILIES = ("random_polygons", "digits_like_blobs")
NOISE_KINDS = ("gumbel", "gaussian")
GUMBEL_STD = math.pi / math.sqrt(6.0)


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: tuple = (16, 16)
    num_train: int = 200
    num_test: int = 100
    shape_family: str = "random_polygons"
    noise_kind: str = "gumbel"
    snr: float = 0.25
    seed: int = 0

    def __post_init__(self):
        h, w = (int(v) for v in self.image_size)
        object.__setattr__(self, "image_size", (h, w))
        if h < 4 or w < 4:
            raise ValueError("image sides must be >= 4")
        if self.num_train < 1 or self.num_test < 1:
            raise ValueError("num_train and num_test must be >= 1")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ValueError(f"shape_family must be one of {SHAPE_FAMILIES}")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}")
        if not self.snr > 0:
            raise ValueError("snr must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


# -- shapes ---------------------------------------------------------------------------

def _rect(h, w, rng):
    r0, c0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
    r1 = rng.integers(r0 + 2, h + 1)
    c1 = rng.integers(c0 + 2, w + 1)
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def _ellipse(h, w, rng):
    rr, cc = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ay, ax = rng.uniform(1.5, h / 2), rng.uniform(1.5, w / 2)
    return ((rr - cy) / ay) ** 2 + ((cc - cx) / ax) ** 2 <= 1.0


def _strokes(h, w, rng):
    rr, cc = np.mgrid[0:h, 0:w]
    m = np.zeros((h, w), dtype=bool)
    thick = max(1.0, min(h, w) / 10.0)
    pts = rng.uniform([0.15 * h, 0.15 * w], [0.85 * h, 0.85 * w], size=(int(rng.integers(3, 6)), 2))
    for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
        dy, dx = y1 - y0, x1 - x0
        L2 = dy * dy + dx * dx or 1.0
        t = np.clip(((rr - y0) * dy + (cc - x0) * dx) / L2, 0.0, 1.0)
        d2 = (rr - y0 - t * dy) ** 2 + (cc - x0 - t * dx) ** 2
        m |= d2 <= thick**2
    return m


def make_mask(h: int, w: int, family: str, rng: np.random.Generator) -> np.ndarray:
    """Binary mask (int64 0/1) with both classes present."""
    lo, hi = (0.2, 0.6) if family == "random_polygons" else (0.1, 0.5)
    best = None
    for _ in range(200):
        m = np.zeros((h, w), dtype=bool)
        if family == "random_polygons":
            for _ in range(int(rng.integers(1, 4))):
                m |= _rect(h, w, rng) if rng.random() < 0.5 else _ellipse(h, w, rng)
        else:
            m = _strokes(h, w, rng)
        frac = m.mean()
        if lo <= frac <= hi:
            return m.astype(np.int64)
        if 0 < frac < 1 and (best is None or abs(frac - 0.4) < abs(best.mean() - 0.4)):
            best = m
    if best is None:  # pragma: no cover
        best = np.zeros((h, w), dtype=bool)
        best[: h // 2] = True
    return best.astype(np.int64)


def unit_noise(kind: str, rng: np.random.Generator, shape) -> np.ndarray:
    if kind == "gumbel":
        return draw_gumbel(rng, shape) / GUMBEL_STD
    return rng.standard_normal(shape)


def corrupt(mask: np.ndarray, kind: str, snr: float, rng: np.random.Generator,
            return_noise: bool = False):
    y = mask.astype(np.float64)
    sigma = y.std() / snr
    noise = sigma * unit_noise(kind, rng, y.shape)
    x = np.clip(y + noise, 0.0, 1.0)
    return (x, noise) if return_noise else x


def generate_images(spec: SyntheticSpec):
    """[(mask, corrupted)] for the train and test splits; image k uses stream k."""
    h, w = spec.image_size
    out = []
    for k in range(spec.num_train + spec.num_test):
        rng = GumbelSource(spec.seed, k).generator()
        mask = make_mask(h, w, spec.shape_family, rng)
        out.append((mask, corrupt(mask, spec.noise_kind, spec.snr, rng)))
    return out[: spec.num_train], out[spec.num_train:]


# -- features -------------------------------------------------------------------------

def build_features(image: np.ndarray):
    """Unary (intensity, 1) per pixel; pairwise (intensity_i, intensity_j, 1) per edge."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    x = img.ravel()
    edges = grid_edges(h, w)
    uf = np.stack([x, np.ones_like(x)], axis=1)
    pf = np.stack([x[edges[:, 0]], x[edges[:, 1]], np.ones(edges.shape[0])], axis=1)
    return uf, pf


def model_from_image(image: np.ndarray, num_labels: int = 2) -> GridModel:
    uf, pf = build_features(image)
    h, w = np.asarray(image).shape
    return GridModel(h, w, num_labels, uf, pf)


def dataset_from_images(pairs, num_labels: int = 2) -> Dataset:
    return Dataset([(model_from_image(x, num_labels), m.ravel()) for m, x in pairs])


def generate_dataset(spec: SyntheticSpec):
    """(train Dataset, test Dataset, clean test labelings)."""
    tr, te = generate_images(spec)
    return dataset_from_images(tr), dataset_from_images(te), [m.ravel() for m, _ in te]


# -- metric --------------------------------------------------------------------------

@dataclass
class IouReport:
    per_class_iou: np.ndarray
    mean_iou: float


def iou(pred, truth, num_labels: int) -> IouReport:
    """Per-class intersection over union; a class absent from both scores 1.0."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    vals = np.empty(num_labels)
    for l in range(num_labels):
        p, t = pred == l, truth == l
        union = np.count_nonzero(p | t)
        vals[l] = 1.0 if union == 0 else np.count_nonzero(p & t) / union
    return IouReport(vals, float(vals.mean()))


def pooled_iou(preds, truths, num_labels: int) -> IouReport:
    return iou(np.concatenate([np.ravel(p) for p in preds]),
               np.concatenate([np.ravel(t) for t in truths]), num_labels)


# -- experiment ------------------------------------------------------------------------

def image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(index),)).generate_state(1, np.uint64)[0])


@dataclass
class MethodScore:
    method: str
    per_class_iou: np.ndarray
    mean_iou: float
    wallclock_ms: float


@dataclass
class ExperimentResult:
    spec: SyntheticSpec
    weights: Weights
    training: TrainResult
    scores: list = field(default_factory=list)

    def score(self, method: str) -> MethodScore:
        for s in self.scores:
            if s.method == method:
                return s
        raise KeyError(method)

    def rows(self, timing: bool = True):
        """One row per (method, class) plus a 'mean' row per method."""
        out = []
        for s in self.scores:
            for c, v in enumerate(s.per_class_iou):
                row = {"method": s.method, "class": str(c), "iou": float(v), "mean_iou": s.mean_iou}
                if timing:
                    row["wallclock_ms"] = s.wallclock_ms
                out.append(row)
        return out


def default_inference_config(method: str, seed: int = 0) -> InferenceConfig:
    return InferenceConfig(method=method, seed=seed)


def evaluate_method(models: Sequence[GridModel], truths, weights: Weights, config: InferenceConfig,
                    threads: int = 1, pooled: bool = False) -> MethodScore:
    K = weights.num_labels

    def one(k):
        cfg = replace(config, seed=image_seed(config.seed, k))
        return infer(models[k], weights, cfg).labels

    t0 = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(one, range(len(models))))
    else:
        preds = [one(k) for k in range(len(models))]
    ms = (time.perf_counter() - t0) * 1000.0
    if pooled:
        rep = pooled_iou(preds, truths, K)
        return MethodScore(config.method, rep.per_class_iou, rep.mean_iou, ms)
    reps = [iou(p, t, K) for p, t in zip(preds, truths)]
    per_class = np.mean([r.per_class_iou for r in reps], axis=0)
    return MethodScore(config.method, per_class, float(np.mean([r.mean_iou for r in reps])), ms)


def run_experiment(spec: SyntheticSpec, methods: Sequence[str], train_config: TrainConfig = TrainConfig(),
                   inference_configs: Optional[dict] = None, threads: int = 1,
                   pooled: bool = False, inference_seed: int = 0) -> ExperimentResult:
    """Generate data, train once by PL, score every method with the same weights."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    inference_configs = inference_configs or {}
    train_set, test_set, truths = generate_dataset(spec)
    init = Weights.zeros(train_set.num_labels, train_set.d_unary, train_set.d_pairwise)
    trained = train(train_set, init, train_config)
    models = [m for m, _ in test_set.items]
    result = ExperimentResult(spec, trained.weights, trained)
    for m in methods:
        cfg = inference_configs.get(m) or default_inference_config(m, inference_seed)
        result.scores.append(evaluate_method(models, truths, trained.weights, cfg, threads, pooled))
    return result


RESULT_FIELDS = ["method", "class", "iou", "mean_iou", "wallclock_ms"]


def rows_to_csv(rows, fields=RESULT_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=[f for f in fields if not rows or f in rows[0]],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def rows_to_json(rows) -> str:
    return json.dumps(rows, indent=2)
