"""Gumbel noise and perturbed potentials.

Random streams come from numpy's Philox4x64 counter-based generator keyed by a
``SeedSequence(seed, spawn_key=(stream_id,))``. Both pieces are specified
algorithms, so a ``(seed, stream_id)`` pair reproduces the same draws on any
platform.

Noise is the zero-mean Gumbel with CDF ``exp(-exp(-(t + c)))``, ``c`` the
Euler-Mascheroni constant.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import (
    BlockPartition,
    GridModel,
    Weights,
    block_local_scores,
    joint_index,
)

EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class GumbelSource:
    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1),
                                    spawn_key=(int(self.stream_id) & (2**64 - 1),))
        return np.random.Generator(np.random.Philox(ss))

    def stream(self, stream_id: int) -> "GumbelSource":
        return GumbelSource(self.seed, stream_id)


def open_uniform(rng: np.random.Generator, n) -> np.ndarray:
    """Uniform draws on the open interval (0, 1); zeros are redrawn."""
    u = rng.random(n)
    bad = u == 0.0
    while bad.any():
        u[bad] = rng.random(int(bad.sum()))
        bad = u == 0.0
    return u


def gumbel_from_uniform(u):
    return -np.log(-np.log(u)) - EULER_GAMMA


def gumbel_cdf(t):
    return np.exp(-np.exp(-(np.asarray(t, dtype=np.float64) + EULER_GAMMA)))


def draw_gumbel(rng: np.random.Generator, n) -> np.ndarray:
    return gumbel_from_uniform(open_uniform(rng, n))


def sample_gumbel(source: GumbelSource, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return draw_gumbel(source.generator(), n)


@dataclass(frozen=True, eq=False)
class PerturbationTable:
    """One Gumbel draw per (block, joint block label), stored flat."""

    partition: BlockPartition
    values: np.ndarray
    offsets: np.ndarray

    def block_values(self, k: int) -> np.ndarray:
        return self.values[self.offsets[k]:self.offsets[k + 1]]

    def block_id(self, block: Sequence[int]) -> int:
        block = tuple(int(i) for i in block)
        try:
            return self.partition.blocks.index(block)
        except ValueError:
            raise KeyError(f"block {block} is not part of the partition") from None

    def __len__(self):
        return int(self.values.size)


def _offsets(partition: BlockPartition, K: int) -> np.ndarray:
    return np.cumsum([0] + [K ** len(b) for b in partition.blocks]).astype(np.int64)


def table_from_values(partition: BlockPartition, num_labels: int, values) -> PerturbationTable:
    offsets = _offsets(partition, num_labels)
    values = np.array(values, dtype=np.float64).reshape(-1)
    if values.size != offsets[-1]:
        raise ValueError(f"expected {offsets[-1]} perturbation values, got {values.size}")
    values.setflags(write=False)
    return PerturbationTable(partition, values, offsets)


def zero_table(model: GridModel, partition: BlockPartition) -> PerturbationTable:
    """Noise-free table; reduces perturbed scores to plain local scores."""
    partition.check(model)
    return table_from_values(partition, model.num_labels,
                             np.zeros(int(_offsets(partition, model.num_labels)[-1])))


def draw_table(rng: np.random.Generator, model: GridModel, partition: BlockPartition
               ) -> PerturbationTable:
    partition.check(model)
    n = int(_offsets(partition, model.num_labels)[-1])
    return table_from_values(partition, model.num_labels, draw_gumbel(rng, n))


def make_perturbation(source: GumbelSource, model: GridModel, partition: BlockPartition
                      ) -> PerturbationTable:
    return draw_table(source.generator(), model, partition)


def perturbed_block_score(model: GridModel, weights: Weights, table: PerturbationTable, y,
                          block: Sequence[int]) -> np.ndarray:
    """Local log-potential terms of ``block`` plus its Gumbel draws, per joint label."""
    k = table.block_id(block)
    y = model.check_labels(y)
    U, P = model.log_potentials(weights)
    return block_local_scores(model, U, P, y, block) + table.block_values(k)


def current_block_index(y, block: Sequence[int], num_labels: int) -> int:
    return joint_index([y[i] for i in block], num_labels)

