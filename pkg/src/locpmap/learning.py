"""Pseudolikelihood / composite-likelihood learning for log-linear grid CRFs.

The objective is the sum over items and blocks of log p(y_block | y_rest; w).
Singleton partitions take a vectorized fast path; larger blocks are enumerated
jointly (at most the block cap of ``model``).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .model import BlockPartition, GridModel, Weights, check_block_size, joint_labels


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"objective became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass
class _Group:
    """Items sharing one grid shape, stacked along a leading axis."""

    height: int
    width: int
    edges: np.ndarray
    Xu: np.ndarray   # (N, n, Du)
    Xp: np.ndarray   # (N, m, Dp)
    Y: np.ndarray    # (N, n)
    index: np.ndarray  # positions of the items in the dataset


@dataclass(eq=False)
class Dataset:
    items: list

    def __post_init__(self):
        if not self.items:
            raise ValueError("empty dataset")
        m0 = self.items[0][0]
        checked = []
        for model, y in self.items:
            if (model.num_labels, model.d_unary, model.d_pairwise) != (m0.num_labels, m0.d_unary, m0.d_pairwise):
                raise ValueError("dataset items disagree on K or feature dimensions")
            checked.append((model, model.check_labels(y)))
        self.items = checked

    def __len__(self):
        return len(self.items)

    @property
    def num_labels(self) -> int:
        return self.items[0][0].num_labels

    @property
    def d_unary(self) -> int:
        return self.items[0][0].d_unary

    @property
    def d_pairwise(self) -> int:
        return self.items[0][0].d_pairwise

    def subset(self, idx) -> "Dataset":
        return Dataset([self.items[int(i)] for i in idx])

    @cached_property
    def groups(self) -> list[_Group]:
        by_shape: dict = {}
        for k, (model, _) in enumerate(self.items):
            by_shape.setdefault((model.height, model.width), []).append(k)
        out = []
        for (h, w), idx in by_shape.items():
            models = [self.items[k][0] for k in idx]
            out.append(_Group(
                h, w, models[0].edges,
                np.stack([m.unary_features for m in models]),
                np.stack([m.pairwise_features for m in models]),
                np.stack([self.items[k][1] for k in idx]),
                np.array(idx),
            ))
        return out


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _is_singletons(partition: BlockPartition) -> bool:
    return all(len(b) == 1 for b in partition.blocks)


def _neighbors(h, w, edges):
    n = h * w
    nbrs = [[] for _ in range(n)]
    for e, (a, b) in enumerate(edges):
        nbrs[a].append((e, int(b), 0))
        nbrs[b].append((e, int(a), 1))
    return nbrs


def _group_singletons(g: _Group, Wu, Wp, partition, K, want_grad):
    mask = np.zeros(g.height * g.width)
    mask[[blk[0] for blk in partition.blocks]] = 1.0
    return kernels.pl_singletons(g.Xu, g.Xp, g.Y, g.edges, Wu, Wp, mask, want_grad)


def _group_blocks(g: _Group, Wu, Wp, partition, K, want_grad):
    N = g.Y.shape[0]
    U = g.Xu @ Wu.T
    P = np.einsum("imd,abd->imab", g.Xp, Wp)
    nbrs = _neighbors(g.height, g.width, g.edges)
    OH = np.eye(K)
    rows = np.arange(N)
    value = 0.0
    gU = np.zeros_like(Wu)
    gP = np.zeros_like(Wp)
    for block in partition.blocks:
        check_block_size(len(block), K)
        J = joint_labels(len(block), K)
        pos = {node: t for t, node in enumerate(block)}
        internal, boundary = [], []
        for t, i in enumerate(block):
            for e, j, side in nbrs[i]:
                if j in pos:
                    if side == 0:
                        internal.append((e, t, pos[j]))
                else:
                    boundary.append((e, t, j, side))
        S = np.zeros((N, J.shape[0]))
        for t, i in enumerate(block):
            S += U[:, i][:, J[:, t]]
        for e, ta, tb in internal:
            S += P[:, e][:, J[:, ta], J[:, tb]]
        for e, t, j, side in boundary:
            if side == 0:
                S += P[rows, e][:, J[:, t], :][rows, :, g.Y[:, j]]
            else:
                S += P[rows, e][rows, g.Y[:, j], :][:, J[:, t]]
        obs = np.zeros(N, dtype=np.int64)
        for i in block:
            obs = obs * K + g.Y[:, i]
        lse = _lse(S, axis=1)
        value += float((S[rows, obs] - lse).sum())
        if not want_grad:
            continue
        R = -np.exp(S - lse[:, None])
        R[rows, obs] += 1.0
        marg = [R @ OH[J[:, t]] for t in range(len(block))]      # (N, K) per block position
        for t, i in enumerate(block):
            gU += marg[t].T @ g.Xu[:, i]
        for e, ta, tb in internal:
            pair = np.einsum("iJ,Ja,Jb->iab", R, OH[J[:, ta]], OH[J[:, tb]])
            gP += np.einsum("iab,id->abd", pair, g.Xp[:, e])
        for e, t, j, side in boundary:
            other = OH[g.Y[:, j]]
            if side == 0:
                gP += np.einsum("ia,ib,id->abd", marg[t], other, g.Xp[:, e])
            else:
                gP += np.einsum("ia,ib,id->abd", other, marg[t], g.Xp[:, e])
    return value, (gU if want_grad else None), (gP if want_grad else None)


def _value_and_grad(dataset: Dataset, weights: Weights, partition: Optional[BlockPartition],
                    l2_weight: float, want_grad: bool):
    K = dataset.num_labels
    Wu, Wp = weights.unary, weights.pairwise
    value = 0.0
    gU = np.zeros_like(Wu)
    gP = np.zeros_like(Wp)
    for g in dataset.groups:
        n = g.height * g.width
        part = partition or BlockPartition.singletons(n)
        fn = _group_singletons if _is_singletons(part) else _group_blocks
        v, u, p = fn(g, Wu, Wp, part, K, want_grad)
        value += v
        if want_grad:
            gU += u
            gP += p
    if l2_weight:
        value -= l2_weight * (float((Wu**2).sum()) + float((Wp**2).sum()))
        gU = gU - 2.0 * l2_weight * Wu
        gP = gP - 2.0 * l2_weight * Wp
    return value, gU, gP


def pl_objective(dataset: Dataset, weights: Weights, partition: Optional[BlockPartition] = None,
                 l2_weight: float = 0.0) -> float:
    """Composite log-likelihood; the pseudolikelihood for singleton blocks (the default)."""
    return _value_and_grad(dataset, weights, partition, l2_weight, False)[0]


def pl_gradient(dataset: Dataset, weights: Weights, partition: Optional[BlockPartition] = None,
                l2_weight: float = 0.0) -> Weights:
    """Gradient w.r.t. the unconstrained weights: observed minus expected feature statistics.

    The symmetric flag is dropped on the result; the trainer projects it when needed.
    """
    _, gU, gP = _value_and_grad(dataset, weights, partition, l2_weight, True)
    return Weights(gU, gP, False)


def num_terms(dataset: Dataset, partition: Optional[BlockPartition] = None) -> int:
    if partition is not None:
        return len(dataset) * len(partition)
    return sum(m.num_nodes for m, _ in dataset.items)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    max_iters: int = 1000
    l2_weight: float = 0.0
    batch_size: Optional[int] = None      # None: full batch
    grad_tol: float = 1e-6
    partition: Optional[BlockPartition] = None
    freeze_pairwise: bool = False
    normalize: bool = True                # step on the per-term average gradient
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_iters < 0 or self.l2_weight < 0:
            raise ValueError("max_iters and l2_weight must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(eq=False)
class TrainResult:
    weights: Weights
    trace: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "grad_norm"])
            for k, (f, g) in enumerate(zip(self.trace, self.grad_norms)):
                w.writerow([k, repr(float(f)), repr(float(g))])


def _project(gU, gP, config: TrainConfig, symmetric: bool):
    if config.freeze_pairwise:
        gP = np.zeros_like(gP)
    elif symmetric:
        gP = 0.5 * (gP + gP.transpose(1, 0, 2))
    return gU, gP


def train(dataset: Dataset, init: Weights, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Fixed-step gradient ascent on the composite likelihood.

    Stops when the L-inf norm of the (scaled, projected) full-data gradient drops
    below ``grad_tol`` or after ``max_iters`` steps. ``trace[k]`` is the full-data
    objective after k steps.
    """
    sym = init.symmetric_pairwise
    w = init
    part = config.partition
    full_scale = 1.0 / num_terms(dataset, part) if config.normalize else 1.0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
    order = rng.permutation(len(dataset)) if config.batch_size else None
    cursor = 0
    result = TrainResult(w)
    for it in range(config.max_iters + 1):
        f, gU, gP = _value_and_grad(dataset, w, part, config.l2_weight, True)
        if not math.isfinite(f):
            raise TrainingDiverged(it, f)
        gU, gP = _project(gU * full_scale, gP * full_scale, config, sym)
        gnorm = float(max(np.abs(gU).max(initial=0.0), np.abs(gP).max(initial=0.0)))
        result.trace.append(f)
        result.grad_norms.append(gnorm)
        if gnorm < config.grad_tol or it == config.max_iters:
            break
        if config.batch_size:
            if cursor + config.batch_size > len(dataset):
                order = rng.permutation(len(dataset))
                cursor = 0
            batch = dataset.subset(order[cursor:cursor + config.batch_size])
            cursor += config.batch_size
            _, bU, bP = _value_and_grad(batch, w, part, config.l2_weight * len(batch) / len(dataset), True)
            scale = 1.0 / num_terms(batch, part) if config.normalize else 1.0
            gU, gP = _project(bU * scale, bP * scale, config, sym)
        with np.errstate(over="ignore", invalid="ignore"):
            nu, npw = w.unary + config.learning_rate * gU, w.pairwise + config.learning_rate * gP
        if not (np.all(np.isfinite(nu)) and np.all(np.isfinite(npw))):
            raise TrainingDiverged(it + 1, float("nan"))
        w = Weights(nu, npw, sym)
    result.weights = w
    return result


def _centered(w: Weights):
    """Remove directions the conditionals cannot see: label-mean of unary, overall mean of pairwise."""
    u = w.unary - w.unary.mean(axis=0, keepdims=True)
    p = w.pairwise - w.pairwise.mean(axis=(0, 1), keepdims=True)
    return u, p


def weight_error(a: Weights, b: Weights, gauge: bool = True) -> float:
    """L-inf distance between two weight sets, optionally after centering both."""
    if gauge:
        (ua, pa), (ub, pb) = _centered(a), _centered(b)
    else:
        ua, pa, ub, pb = a.unary, a.pairwise, b.unary, b.pairwise
    return float(max(np.abs(ua - ub).max(), np.abs(pa - pb).max()))


def dataset_from_samples(model: GridModel, samples: Sequence) -> Dataset:
    return Dataset([(model, y) for y in samples])
