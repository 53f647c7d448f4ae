"""Brute-force enumeration on tiny models.

Everything here works on the full table of labelings, held as a tensor with one
axis per node (node 0 first, lexicographic order). It deliberately avoids the
local-score code paths of ``model`` and ``kernels`` so it can check them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BlockPartition, GridModel, Weights
from .perturb import GumbelSource, draw_gumbel, open_uniform

DEFAULT_MAX_CONFIGS = 2**20


class BudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class EnumerationBudget:
    max_configs: int = DEFAULT_MAX_CONFIGS

    def check(self, model: GridModel) -> None:
        if model.num_labels ** model.num_nodes > self.max_configs:
            raise BudgetExceeded(
                f"{model.num_labels}^{model.num_nodes} labelings exceed the budget of {self.max_configs}")


def _dot(a, b) -> float:
    s = 0.0
    for u, v in zip(a, b):
        s += float(u) * float(v)
    return s


def brute_total_potential(model: GridModel, weights: Weights, y) -> float:
    """Straight-line recomputation with explicit loops over nodes and grid neighbours."""
    s = 0.0
    H, W = model.height, model.width
    for r in range(H):
        for c in range(W):
            i = r * W + c
            s += _dot(weights.unary[y[i]], model.unary_features[i])
    e = 0
    for r in range(H):
        for c in range(W):
            i = r * W + c
            if c + 1 < W:
                s += _dot(weights.pairwise[y[i], y[i + 1]], model.pairwise_features[e])
                e += 1
            if r + 1 < H:
                s += _dot(weights.pairwise[y[i], y[i + W]], model.pairwise_features[e])
                e += 1
    return s


def all_labelings(model: GridModel, budget: EnumerationBudget = EnumerationBudget()) -> np.ndarray:
    budget.check(model)
    K, n = model.num_labels, model.num_nodes
    idx = np.arange(K**n)
    out = np.empty((K**n, n), dtype=np.int64)
    for t in range(n - 1, -1, -1):
        out[:, t] = idx % K
        idx //= K
    return out


def potential_tensor(model: GridModel, weights: Weights,
                     budget: EnumerationBudget = EnumerationBudget()) -> np.ndarray:
    """theta(y) for every labeling, shape (K,)*n."""
    budget.check(model)
    K, n = model.num_labels, model.num_nodes
    theta = np.zeros((K,) * n)
    for i in range(n):
        u = model.unary_features[i] @ weights.unary.T
        shape = [1] * n
        shape[i] = K
        theta = theta + u.reshape(shape)
    for e, (a, b) in enumerate(model.edges):
        tab = np.einsum("abd,d->ab", weights.pairwise, model.pairwise_features[e])
        shape = [1] * n
        shape[a] = K
        shape[b] = K
        theta = theta + tab.reshape(shape)
    return theta


def _logsumexp(x: np.ndarray, axis=None, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def exact_partition(model, weights, budget: EnumerationBudget = EnumerationBudget()) -> float:
    """log Z."""
    return float(_logsumexp(potential_tensor(model, weights, budget)))


def exact_distribution(model, weights, budget: EnumerationBudget = EnumerationBudget()) -> np.ndarray:
    """p(y) as a (K,)*n tensor; index it with a labeling tuple."""
    theta = potential_tensor(model, weights, budget)
    return np.exp(theta - _logsumexp(theta))


def exact_marginals(model, weights, budget: EnumerationBudget = EnumerationBudget()) -> np.ndarray:
    p = exact_distribution(model, weights, budget)
    n = model.num_nodes
    return np.stack([p.sum(axis=tuple(a for a in range(n) if a != i)) for i in range(n)])


def exact_map(model, weights, budget: EnumerationBudget = EnumerationBudget()) -> np.ndarray:
    theta = potential_tensor(model, weights, budget)
    flat = int(np.argmax(theta.ravel()))  # first maximum in lexicographic order
    return np.array(np.unravel_index(flat, theta.shape), dtype=np.int64)


def exact_sample(model, weights, source: GumbelSource, n: int,
                 budget: EnumerationBudget = EnumerationBudget()) -> np.ndarray:
    """n i.i.d. labelings by inverse CDF over the enumerated distribution, shape (n, nodes)."""
    p = exact_distribution(model, weights, budget).ravel()
    cdf = np.cumsum(p)
    u = open_uniform(source.generator(), n) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), p.size - 1)
    return np.array(np.unravel_index(idx, (model.num_labels,) * model.num_nodes), dtype=np.int64).T


# -- local maxima ------------------------------------------------------------------------

def _noise_tensor(values_by_block, partition: BlockPartition, K: int, n: int, lead=()):
    """Sum of per-block noise broadcast over the labeling tensor; ``lead`` are batch axes."""
    nl = len(lead)
    total = np.zeros(tuple(lead) + (1,) * n)
    for block, vals in zip(partition.blocks, values_by_block):
        vals = np.asarray(vals).reshape(tuple(lead) + (K,) * len(block))
        order = np.argsort(block)
        vals = np.transpose(vals, tuple(range(nl)) + tuple(nl + int(o) for o in order))
        shape = list(lead) + [1] * n
        for node in block:
            shape[nl + node] = K
        total = total + vals.reshape(shape)
    return total


def local_max_mask(theta_tilde: np.ndarray, partition: BlockPartition, lead: int = 0) -> np.ndarray:
    """Boolean tensor: labeling is block-coordinate-wise maximal (ties count as maximal)."""
    mask = np.ones(theta_tilde.shape, dtype=bool)
    for block in partition.blocks:
        axes = tuple(lead + i for i in block)
        mask &= theta_tilde >= theta_tilde.max(axis=axes, keepdims=True)
    return mask


def enumerate_local_maxima(model, weights, table, budget: EnumerationBudget = EnumerationBudget()):
    """Set of labelings (tuples) in Loc[theta + noise; partition]."""
    K, n = model.num_labels, model.num_nodes
    theta = potential_tensor(model, weights, budget)
    vals = [table.block_values(k) for k in range(len(table.partition))]
    tt = theta + _noise_tensor(vals, table.partition, K, n)
    return {tuple(int(v) for v in idx) for idx in zip(*np.nonzero(local_max_mask(tt, table.partition)))}


def is_local_max_loop(model, weights, table, y) -> bool:
    """Per-labeling check: no single-block change of y improves the perturbed potential."""
    from .model import joint_index, joint_labels

    K = model.num_labels
    y = np.asarray(y, dtype=np.int64)

    def perturbed(z):
        s = brute_total_potential(model, weights, z)
        for k, block in enumerate(table.partition.blocks):
            s += table.block_values(k)[joint_index([z[i] for i in block], K)]
        return s

    base = perturbed(y)
    for block in table.partition.blocks:
        for lab in joint_labels(len(block), K):
            z = y.copy()
            z[list(block)] = lab
            if perturbed(z) > base:
                return False
    return True


def oracle_conditional_tensor(model, weights, partition: BlockPartition,
                              budget: EnumerationBudget = EnumerationBudget()) -> list[np.ndarray]:
    """Per block, p(y_block | y_rest) evaluated at every labeling, each a (K,)*n tensor."""
    theta = potential_tensor(model, weights, budget)
    return [np.exp(theta - _logsumexp(theta, axis=tuple(block), keepdims=True))
            for block in partition.blocks]


def composite_likelihood_tensor(model, weights, partition, budget=EnumerationBudget()) -> np.ndarray:
    out = np.ones((model.num_labels,) * model.num_nodes)
    for c in oracle_conditional_tensor(model, weights, partition, budget):
        out = out * c
    return out


def zb_exact(model, weights, partition, budget: EnumerationBudget = EnumerationBudget()) -> float:
    """Expected number of local maxima: sum over y of the product of block conditionals."""
    return float(composite_likelihood_tensor(model, weights, partition, budget).sum())


# -- Monte Carlo validators ------------------------------------------------------------------------

def _chunks(total: int, size: int):
    start = 0
    while start < total:
        yield start, min(total, start + size)
        start += size


@dataclass
class CheckReport:
    name: str
    exact: np.ndarray
    empirical: np.ndarray
    stderr: np.ndarray
    max_abs_dev: float
    tolerance: float
    passed: bool
    draws: int

    def to_dict(self) -> dict:
        return {
            "name": self.name, "draws": self.draws, "tolerance": self.tolerance,
            "max_abs_dev": self.max_abs_dev, "passed": bool(self.passed),
            "exact": np.asarray(self.exact).ravel().tolist(),
            "empirical": np.asarray(self.empirical).ravel().tolist(),
            "stderr": np.asarray(self.stderr).ravel().tolist(),
        }


def gumbelmax_check(model, weights, draws: int, source: GumbelSource, tolerance: float = 0.01,
                    budget: EnumerationBudget = EnumerationBudget(), chunk: int = 20000) -> CheckReport:
    """Histogram of argmax_y theta(y) + eps(y) with one Gumbel per full labeling."""
    theta = potential_tensor(model, weights, budget).ravel()
    exact = np.exp(theta - _logsumexp(theta))
    rng = source.generator()
    counts = np.zeros(theta.size, dtype=np.int64)
    for a, b in _chunks(draws, chunk):
        eps = draw_gumbel(rng, (b - a, theta.size))
        counts += np.bincount(np.argmax(theta + eps, axis=1), minlength=theta.size)
    emp = counts / draws
    se = np.sqrt(exact * (1 - exact) / draws)
    dev = float(np.abs(emp - exact).max())
    return CheckReport("gumbelmax", exact, emp, se, dev, tolerance, dev < tolerance, draws)


def loc_membership_counts(model, weights, partition: BlockPartition, draws: int, source: GumbelSource,
                          budget: EnumerationBudget = EnumerationBudget(), chunk: int = 10000):
    """Per labeling, how many of ``draws`` perturbations have it in Loc; plus |Loc| per draw."""
    K, n = model.num_labels, model.num_nodes
    theta = potential_tensor(model, weights, budget)
    sizes = [K ** len(b) for b in partition.blocks]
    offs = np.cumsum([0] + sizes)
    rng = source.generator()
    counts = np.zeros(theta.shape, dtype=np.int64)
    loc_sizes = np.empty(draws, dtype=np.int64)
    for a, b in _chunks(draws, chunk):
        # same layout as PerturbationTable.values, one row per draw
        eps = draw_gumbel(rng, (b - a, int(offs[-1])))
        vals = [eps[:, offs[k]:offs[k + 1]] for k in range(len(sizes))]
        tt = theta[None] + _noise_tensor(vals, partition, K, n, lead=(b - a,))
        mask = local_max_mask(tt, partition, lead=1)
        counts += mask.sum(axis=0)
        loc_sizes[a:b] = mask.reshape(b - a, -1).sum(axis=1)
    return counts, loc_sizes


def theorem1_check(model, weights, partition: BlockPartition, y, draws: int, source: GumbelSource,
                   tolerance: float = 0.01, budget: EnumerationBudget = EnumerationBudget(),
                   model_conditionals=None) -> CheckReport:
    """Frequency of y in Loc vs the product of its block conditionals.

    ``y`` may be one labeling or ``None`` for all labelings at once.
    ``model_conditionals`` optionally supplies the product from another code path.
    """
    counts, _ = loc_membership_counts(model, weights, partition, draws, source, budget)
    exact = composite_likelihood_tensor(model, weights, partition, budget)
    if model_conditionals is not None:
        exact = np.asarray(model_conditionals).reshape(exact.shape)
    emp = counts / draws
    if y is not None:
        key = tuple(int(v) for v in y)
        exact, emp = np.array([exact[key]]), np.array([emp[key]])
    exact, emp = exact.ravel(), emp.ravel()
    se = np.sqrt(exact * (1 - exact) / draws)
    dev = float(np.abs(emp - exact).max())
    return CheckReport("theorem1", exact, emp, se, dev, tolerance, dev < tolerance, draws)


def zb_check(model, weights, partition, draws: int, source: GumbelSource, n_se: float = 3.0,
             budget: EnumerationBudget = EnumerationBudget()) -> CheckReport:
    """Exact Z_B vs the Monte Carlo mean of |Loc|, within ``n_se`` standard errors."""
    exact = zb_exact(model, weights, partition, budget)
    _, sizes = loc_membership_counts(model, weights, partition, draws, source, budget)
    mean = float(sizes.mean())
    se = float(sizes.std(ddof=1) / np.sqrt(draws)) if draws > 1 else float("inf")
    dev = abs(mean - exact)
    tol = n_se * se
    return CheckReport("zb", np.array([exact]), np.array([mean]), np.array([se]), dev, tol,
                       dev <= tol, draws)
