"""Prediction procedures on a grid CRF.

locPMAP draws one Gumbel value per (block, joint block label), runs block ICM on
the perturbed potentials from a uniform random start, and repeats this with
independent streams; labels are the per-node majority over samples.
The baselines (ICM, ICM-iter with unary dropout, Gibbs, mean field, loopy BP,
simulated annealing) share the same kernels.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .model import BlockPartition, GridModel, Weights, block_structure
from .perturb import GumbelSource, draw_table, open_uniform

METHODS = ("icm", "locpmap", "icm_iter", "gibbs", "mean_field", "lbp", "sa")


@dataclass(frozen=True)
class InferenceConfig:
    method: str = "locpmap"
    num_samples: int = 50
    max_sweeps: int = 100
    tol: float = 1e-6
    dropout_fraction: float = 0.1
    gibbs_samples: int = 1000
    burn_in: Optional[int] = None
    sa_t0: float = 2.0
    sa_alpha: float = 0.98
    sa_sweeps: int = 300
    lbp_damping: float = 0.5
    icm_init: str = "unary"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not 0.0 <= self.dropout_fraction < 1.0:
            raise ValueError("dropout_fraction must lie in [0, 1)")
        if self.gibbs_samples < 1 or (self.burn_in is not None and self.burn_in < 0):
            raise ValueError("gibbs_samples must be >= 1 and burn_in >= 0")
        if self.sa_t0 <= 0 or not 0.0 < self.sa_alpha < 1.0 or self.sa_sweeps < 0:
            raise ValueError("need sa_t0 > 0, 0 < sa_alpha < 1, sa_sweeps >= 0")
        if not 0.0 <= self.lbp_damping < 1.0:
            raise ValueError("lbp_damping must lie in [0, 1)")
        if self.icm_init not in ("unary", "random"):
            raise ValueError("icm_init must be 'unary' or 'random'")

    @property
    def effective_burn_in(self) -> int:
        if self.burn_in is not None:
            return self.burn_in
        return int(math.floor(0.2 * self.gibbs_samples + 0.5))


@dataclass(eq=False)
class InferenceResult:
    labels: np.ndarray
    node_prob: np.ndarray
    node_var: np.ndarray
    samples_used: int
    sweeps_run: int
    converged: bool = True
    extra: dict = field(default_factory=dict)

    def same_as(self, other: "InferenceResult") -> bool:
        return (np.array_equal(self.labels, other.labels)
                and np.array_equal(self.node_prob, other.node_prob)
                and np.array_equal(self.node_var, other.node_var)
                and self.samples_used == other.samples_used
                and self.sweeps_run == other.sweeps_run)


def argmax_low(p: np.ndarray) -> np.ndarray:
    """Row-wise argmax, ties to the lowest label (np.argmax already does this)."""
    return np.argmax(p, axis=-1)


def _result_from_probs(prob, samples_used, sweeps, converged=True, labels=None):
    if labels is None:
        labels = argmax_low(prob)
    p_hat = prob[np.arange(prob.shape[0]), labels]
    return InferenceResult(labels.astype(np.int64), prob, p_hat * (1.0 - p_hat),
                           samples_used, int(sweeps), converged)


def aggregate_samples(samples: np.ndarray, num_labels: int, sweeps: int = 0) -> InferenceResult:
    """Per-node label frequencies, majority labels and p(1-p) of the majority label."""
    samples = np.asarray(samples, dtype=np.int64)
    S, n = samples.shape
    counts = np.zeros((n, num_labels))
    for l in range(num_labels):
        counts[:, l] = (samples == l).sum(axis=0)
    return _result_from_probs(counts / S, S, sweeps)


def one_hot(labels: np.ndarray, num_labels: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_labels))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _map_chunks(fn, num_items: int, threads: int):
    """Apply ``fn(start, stop)`` over contiguous chunks; results kept in order."""
    threads = max(1, min(int(threads), num_items))
    if threads == 1:
        return [fn(0, num_items)]
    bounds = np.linspace(0, num_items, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), zip(bounds[:-1], bounds[1:])))


def _singletons(model: GridModel) -> BlockPartition:
    return BlockPartition.singletons(model.num_nodes)


# -- ICM ---------------------------------------------------------------------------

def icm(model: GridModel, weights: Weights, init=None, config: InferenceConfig = InferenceConfig("icm")):
    """Raster-scan ICM. Returns (labels, sweeps)."""
    U, P = model.log_potentials(weights)
    if init is None:
        if config.icm_init == "unary":
            init = argmax_low(U)
        else:
            init = GumbelSource(config.seed, 0).generator().integers(0, model.num_labels, model.num_nodes)
    y = model.check_labels(init).copy()[None, :]
    st = block_structure(model, _singletons(model))
    sweeps = kernels.block_icm(U[None], P, st, np.zeros((1, st.num_noise)), y, config.max_sweeps)
    return y[0], int(sweeps[0])


def icm_result(model, weights, config, init=None) -> InferenceResult:
    labels, sweeps = icm(model, weights, init, config)
    return InferenceResult(labels, one_hot(labels, model.num_labels), np.zeros(model.num_nodes),
                           1, sweeps, sweeps < config.max_sweeps)


# -- locPMAP -------------------------------------------------------------------------

def _locpmap_draws(model, partition, seed, stream_ids):
    noise, inits = [], []
    for s in stream_ids:
        rng = GumbelSource(seed, int(s)).generator()
        noise.append(draw_table(rng, model, partition).values)
        inits.append(rng.integers(0, model.num_labels, model.num_nodes))
    return np.array(noise), np.array(inits, dtype=np.int64)


def locpmap_sample(model: GridModel, weights: Weights, source: GumbelSource,
                   partition: Optional[BlockPartition] = None,
                   config: InferenceConfig = InferenceConfig(), *,
                   zero_noise: bool = False, init=None) -> np.ndarray:
    """One locPMAP draw: perturb, random start, block ICM to a local maximum.

    ``zero_noise`` and ``init`` are test hooks that replace the drawn table / start.
    """
    partition = partition or _singletons(model)
    st = block_structure(model, partition)
    noise, inits = _locpmap_draws(model, partition, source.seed, [source.stream_id])
    if zero_noise:
        noise[:] = 0.0
    if init is not None:
        inits[0] = model.check_labels(init)
    U, P = model.log_potentials(weights)
    kernels.block_icm(U[None], P, st, noise, inits, config.max_sweeps)
    return inits[0]


def locpmap_samples(model, weights, config: InferenceConfig, partition=None, threads=1):
    partition = partition or _singletons(model)
    st = block_structure(model, partition)
    U, P = model.log_potentials(weights)

    def run(a, b):
        noise, y = _locpmap_draws(model, partition, config.seed, range(a, b))
        Ub = np.broadcast_to(U, (b - a,) + U.shape)
        sweeps = kernels.block_icm(Ub, P, st, noise, y, config.max_sweeps)
        return y, sweeps

    parts = _map_chunks(run, config.num_samples, threads)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def locpmap_predict(model: GridModel, weights: Weights, config: InferenceConfig = InferenceConfig(),
                    partition: Optional[BlockPartition] = None, threads: int = 1) -> InferenceResult:
    samples, sweeps = locpmap_samples(model, weights, config, partition, threads)
    res = aggregate_samples(samples, model.num_labels, int(sweeps.max()))
    res.converged = bool(np.all(sweeps < config.max_sweeps))
    return res


# -- ICM-iter ---------------------------------------------------------------------------

def dropout_count(fraction: float, num_nodes: int) -> int:
    return max(0, int(math.floor(fraction * num_nodes + 0.5)))


def icm_iter(model: GridModel, weights: Weights, config: InferenceConfig = InferenceConfig("icm_iter"),
             threads: int = 1, *, init=None) -> InferenceResult:
    """Repeated ICM from random starts, each with the unary terms of a random node subset zeroed."""
    U, P = model.log_potentials(weights)
    n, K = U.shape
    st = block_structure(model, _singletons(model))
    count = dropout_count(config.dropout_fraction, n)

    def run(a, b):
        Ub = np.repeat(U[None], b - a, axis=0)
        y = np.empty((b - a, n), dtype=np.int64)
        for r in range(a, b):
            rng = GumbelSource(config.seed, r).generator()
            masked = rng.permutation(n)[:count]
            Ub[r - a, masked] = 0.0
            y[r - a] = rng.integers(0, K, n) if init is None else model.check_labels(init)
        sweeps = kernels.block_icm(Ub, P, st, np.zeros((b - a, st.num_noise)), y, config.max_sweeps)
        return y, sweeps

    parts = _map_chunks(run, config.num_samples, threads)
    samples = np.concatenate([p[0] for p in parts])
    sweeps = np.concatenate([p[1] for p in parts])
    res = aggregate_samples(samples, K, int(sweeps.max()))
    res.converged = bool(np.all(sweeps < config.max_sweeps))
    res.extra["masked_per_repeat"] = count
    return res


# -- sampling-based --------------------------------------------------------------------------

def gibbs(model: GridModel, weights: Weights, config: InferenceConfig = InferenceConfig("gibbs"),
          partition: Optional[BlockPartition] = None) -> InferenceResult:
    """Single systematic-scan chain; marginals from the kept sweeps."""
    partition = partition or _singletons(model)
    st = block_structure(model, partition)
    U, P = model.log_potentials(weights)
    burn = config.effective_burn_in
    total = burn + config.gibbs_samples
    rng = GumbelSource(config.seed, 0).generator()
    y = rng.integers(0, model.num_labels, model.num_nodes)
    unif = open_uniform(rng, (total, st.num_blocks))
    counts = np.zeros((model.num_nodes, model.num_labels), dtype=np.int64)
    kernels.block_gibbs(U, P, st, np.ones(total), unif, y, burn, counts)
    return _result_from_probs(counts / config.gibbs_samples, config.gibbs_samples, total)


def simulated_annealing(model: GridModel, weights: Weights,
                        config: InferenceConfig = InferenceConfig("sa")) -> InferenceResult:
    """Gibbs sweeps at T_t = t0 * alpha**t, then ICM at zero temperature."""
    st = block_structure(model, _singletons(model))
    U, P = model.log_potentials(weights)
    rng = GumbelSource(config.seed, 0).generator()
    y = rng.integers(0, model.num_labels, model.num_nodes)
    temps = config.sa_t0 * config.sa_alpha ** np.arange(config.sa_sweeps)
    unif = open_uniform(rng, (config.sa_sweeps, st.num_blocks))
    counts = np.zeros((model.num_nodes, model.num_labels), dtype=np.int64)
    kernels.block_gibbs(U, P, st, temps, unif, y, config.sa_sweeps, counts)
    yb = y[None, :].copy()
    sweeps = kernels.block_icm(U[None], P, st, np.zeros((1, st.num_noise)), yb, config.max_sweeps)
    labels = yb[0]
    return InferenceResult(labels, one_hot(labels, model.num_labels), np.zeros(model.num_nodes),
                           1, config.sa_sweeps + int(sweeps[0]), bool(sweeps[0] < config.max_sweeps))


# -- variational -----------------------------------------------------------------------------

def mean_field_update(U, P, model: GridModel, q) -> np.ndarray:
    """One raster sweep applied to a copy of q; used for fixed-point checks."""
    q = np.array(q, dtype=np.float64, copy=True)
    st = block_structure(model, _singletons(model))
    kernels.mean_field(U, P, st, q, 1, 0.0)
    return q


def mean_field(model: GridModel, weights: Weights,
               config: InferenceConfig = InferenceConfig("mean_field"), init_q=None) -> InferenceResult:
    U, P = model.log_potentials(weights)
    st = block_structure(model, _singletons(model))
    if init_q is None:
        q = np.full((model.num_nodes, model.num_labels), 1.0 / model.num_labels)
    else:
        q = np.array(init_q, dtype=np.float64, copy=True)
    sweeps, converged = kernels.mean_field(U, P, st, q, config.max_sweeps, config.tol)
    return _result_from_probs(q, 0, sweeps, converged)


def loopy_bp(model: GridModel, weights: Weights,
             config: InferenceConfig = InferenceConfig("lbp")) -> InferenceResult:
    """Damped synchronous sum-product from uniform messages; decodes marginals."""
    U, P = model.log_potentials(weights)
    K = model.num_labels
    msg = np.full((model.num_edges, 2, K), 1.0 / K)
    iters, converged = kernels.loopy_bp(U, P, model.edges, msg, config.max_sweeps, config.tol,
                                        config.lbp_damping)
    res = _result_from_probs(kernels.lbp_beliefs(U, model.edges, msg), 0, iters, converged)
    res.extra["messages"] = msg
    return res


def infer(model: GridModel, weights: Weights, config: InferenceConfig, threads: int = 1,
          partition: Optional[BlockPartition] = None) -> InferenceResult:
    m = config.method
    if m == "icm":
        return icm_result(model, weights, config)
    if m == "locpmap":
        return locpmap_predict(model, weights, config, partition, threads)
    if m == "icm_iter":
        return icm_iter(model, weights, config, threads)
    if m == "gibbs":
        return gibbs(model, weights, config)
    if m == "mean_field":
        return mean_field(model, weights, config)
    if m == "lbp":
        return loopy_bp(model, weights, config)
    return simulated_annealing(model, weights, config)
