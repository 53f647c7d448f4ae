"""Grid CRF model: topology, log-linear potentials and block conditionals.

Potentials live in log space. For a labeling ``y`` the total log-potential is

    sum_i <w_unary[y_i], f_unary(i)> + sum_(i,j) <w_pair[y_i, y_j], f_pair(i, j)>

Edges are the 4-connectivity pairs of the grid, enumerated node by node in
raster order with the right neighbour before the down neighbour. Joint block
labels are indexed lexicographically with the first block node most
significant.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

FORMAT_VERSION = 1
MAX_BLOCK_NODES = 4
MAX_BLOCK_CONFIGS = 256


class UnsupportedBlockSize(ValueError):
    pass


def grid_edges(height: int, width: int) -> np.ndarray:
    """(m, 2) array of edges, first endpoint always the lower node index."""
    edges = []
    for r in range(height):
        for c in range(width):
            i = r * width + c
            if c + 1 < width:
                edges.append((i, i + 1))
            if r + 1 < height:
                edges.append((i, i + width))
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def block_size_ok(size: int, num_labels: int) -> bool:
    return size <= MAX_BLOCK_NODES or num_labels**size <= MAX_BLOCK_CONFIGS


def check_block_size(size: int, num_labels: int) -> None:
    if not block_size_ok(size, num_labels):
        raise UnsupportedBlockSize(
            f"block of {size} nodes with K={num_labels} exceeds the enumeration cap"
        )


def joint_labels(size: int, num_labels: int) -> np.ndarray:
    """All joint labels of a block, shape (K**size, size)."""
    return np.array(
        list(itertools.product(range(num_labels), repeat=size)), dtype=np.int64
    ).reshape(num_labels**size, size)


def joint_index(labels: Sequence[int], num_labels: int) -> int:
    idx = 0
    for lab in labels:
        idx = idx * num_labels + int(lab)
    return idx


def _readonly(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridModel:
    height: int
    width: int
    num_labels: int
    unary_features: np.ndarray
    pairwise_features: np.ndarray

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dimensions must be positive")
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        uf = _readonly(self.unary_features)
        pf = _readonly(self.pairwise_features)
        if uf.ndim == 1:
            uf = _readonly(uf.reshape(-1, 1))
        if pf.ndim == 1:
            pf = _readonly(pf.reshape(-1, 1))
        if uf.shape[0] != self.num_nodes:
            raise ValueError(f"expected {self.num_nodes} unary feature rows, got {uf.shape[0]}")
        if pf.shape[0] != self.num_edges:
            raise ValueError(f"expected {self.num_edges} pairwise feature rows, got {pf.shape[0]}")
        if not (np.all(np.isfinite(uf)) and np.all(np.isfinite(pf))):
            raise ValueError("features must be finite")
        object.__setattr__(self, "unary_features", uf)
        object.__setattr__(self, "pairwise_features", pf)

    @property
    def num_nodes(self) -> int:
        return self.height * self.width

    @property
    def num_edges(self) -> int:
        return self.height * (self.width - 1) + self.width * (self.height - 1)

    @property
    def d_unary(self) -> int:
        return self.unary_features.shape[1]

    @property
    def d_pairwise(self) -> int:
        return self.pairwise_features.shape[1]

    @cached_property
    def edges(self) -> np.ndarray:
        e = grid_edges(self.height, self.width)
        e.setflags(write=False)
        return e

    @cached_property
    def neighbors(self) -> list[list[tuple[int, int, int]]]:
        """Per node: list of (edge, other_node, side); side 0 means the node is the first endpoint."""
        nbrs: list[list[tuple[int, int, int]]] = [[] for _ in range(self.num_nodes)]
        for e, (a, b) in enumerate(self.edges):
            nbrs[a].append((e, int(b), 0))
            nbrs[b].append((e, int(a), 1))
        return nbrs

    def check_labels(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.shape[0] != self.num_nodes:
            raise ValueError(f"labeling has {y.shape[0]} entries, grid has {self.num_nodes}")
        if y.size and (y.min() < 0 or y.max() >= self.num_labels):
            raise ValueError("label out of range")
        return y

    def log_potentials(self, weights: "Weights") -> tuple[np.ndarray, np.ndarray]:
        """Unary table (n, K) and pairwise table (m, K, K) of log-potentials."""
        self._check_weights(weights)
        U = self.unary_features @ weights.unary.T
        P = np.einsum("ed,abd->eab", self.pairwise_features, weights.pairwise)
        return U, P

    def _check_weights(self, weights: "Weights") -> None:
        if weights.num_labels != self.num_labels:
            raise ValueError("weights and model disagree on num_labels")
        if weights.d_unary != self.d_unary or weights.d_pairwise != self.d_pairwise:
            raise ValueError("weights and model disagree on feature dimensions")


@dataclass(frozen=True, eq=False)
class Weights:
    unary: np.ndarray
    pairwise: np.ndarray
    symmetric_pairwise: bool = False

    def __post_init__(self):
        u = _readonly(self.unary)
        p = _readonly(self.pairwise)
        if u.ndim != 2:
            raise ValueError("unary weights must have shape (K, D_u)")
        K = u.shape[0]
        if p.ndim != 3 or p.shape[:2] != (K, K):
            raise ValueError("pairwise weights must have shape (K, K, D_p)")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(p))):
            raise ValueError("weights must be finite")
        if self.symmetric_pairwise and not np.array_equal(p, p.transpose(1, 0, 2)):
            raise ValueError("symmetric_pairwise set but pairwise weights are not symmetric")
        object.__setattr__(self, "unary", u)
        object.__setattr__(self, "pairwise", p)

    @classmethod
    def zeros(cls, num_labels: int, d_unary: int, d_pairwise: int, symmetric_pairwise=False):
        return cls(
            np.zeros((num_labels, d_unary)),
            np.zeros((num_labels, num_labels, d_pairwise)),
            symmetric_pairwise,
        )

    @classmethod
    def random(cls, rng: np.random.Generator, num_labels, d_unary, d_pairwise, scale=1.0,
               symmetric_pairwise=False):
        u = rng.normal(scale=scale, size=(num_labels, d_unary))
        p = rng.normal(scale=scale, size=(num_labels, num_labels, d_pairwise))
        if symmetric_pairwise:
            p = 0.5 * (p + p.transpose(1, 0, 2))
        return cls(u, p, symmetric_pairwise)

    @property
    def num_labels(self) -> int:
        return self.unary.shape[0]

    @property
    def d_unary(self) -> int:
        return self.unary.shape[1]

    @property
    def d_pairwise(self) -> int:
        return self.pairwise.shape[2]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.unary.ravel(), self.pairwise.ravel()])

    def with_flat(self, vec) -> "Weights":
        vec = np.asarray(vec, dtype=np.float64)
        nu = self.unary.size
        return Weights(
            vec[:nu].reshape(self.unary.shape),
            vec[nu:].reshape(self.pairwise.shape),
            self.symmetric_pairwise,
        )


@dataclass(frozen=True)
class BlockPartition:
    """Disjoint node blocks; need not cover every node."""

    blocks: tuple[tuple[int, ...], ...]
    num_nodes: int = field(default=0)

    def __post_init__(self):
        blocks = tuple(tuple(int(i) for i in b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        seen = set()
        for b in blocks:
            if not b:
                raise ValueError("empty block")
            for i in b:
                if i < 0 or (self.num_nodes and i >= self.num_nodes):
                    raise ValueError(f"node index {i} out of range")
                if i in seen:
                    raise ValueError(f"node {i} appears in more than one block")
                seen.add(i)

    @classmethod
    def singletons(cls, num_nodes: int) -> "BlockPartition":
        return cls(tuple((i,) for i in range(num_nodes)), num_nodes)

    @classmethod
    def whole(cls, num_nodes: int) -> "BlockPartition":
        return cls((tuple(range(num_nodes)),), num_nodes)

    @property
    def covered(self) -> frozenset:
        return frozenset(i for b in self.blocks for i in b)

    def __len__(self):
        return len(self.blocks)

    def check(self, model: GridModel) -> None:
        for b in self.blocks:
            for i in b:
                if i >= model.num_nodes:
                    raise ValueError(f"node index {i} out of range")
            check_block_size(len(b), model.num_labels)


def log_potential_unary(model: GridModel, weights: Weights, node: int, label: int) -> float:
    if not 0 <= node < model.num_nodes:
        raise IndexError(f"node {node} out of range")
    if not 0 <= label < model.num_labels:
        raise IndexError(f"label {label} out of range")
    model._check_weights(weights)
    return float(weights.unary[label] @ model.unary_features[node])


def log_potential_pairwise(model: GridModel, weights: Weights, edge: int, label_a: int,
                           label_b: int) -> float:
    if not 0 <= edge < model.num_edges:
        raise IndexError(f"edge {edge} out of range")
    K = model.num_labels
    if not (0 <= label_a < K and 0 <= label_b < K):
        raise IndexError("label out of range")
    model._check_weights(weights)
    return float(weights.pairwise[label_a, label_b] @ model.pairwise_features[edge])


def total_log_potential(model: GridModel, weights: Weights, y) -> float:
    y = model.check_labels(y)
    U, P = model.log_potentials(weights)
    return potential_from_tables(model, U, P, y)


def potential_from_tables(model: GridModel, U, P, y) -> float:
    e = model.edges
    return float(
        U[np.arange(model.num_nodes), y].sum() + P[np.arange(model.num_edges), y[e[:, 0]], y[e[:, 1]]].sum()
    )


def block_local_scores(model: GridModel, U, P, y, block: Sequence[int]) -> np.ndarray:
    """Log-potential terms touching ``block`` for every joint block label, rest of ``y`` fixed."""
    K = model.num_labels
    block = tuple(int(i) for i in block)
    check_block_size(len(block), K)
    J = joint_labels(len(block), K)
    pos = {node: t for t, node in enumerate(block)}
    scores = np.zeros(J.shape[0])
    for t, i in enumerate(block):
        scores += U[i, J[:, t]]
        for e, j, side in model.neighbors[i]:
            if j in pos:
                if side == 0:  # count internal edges once, from their first endpoint
                    scores += P[e, J[:, t], J[:, pos[j]]]
            elif side == 0:
                scores += P[e, J[:, t], y[j]]
            else:
                scores += P[e, y[j], J[:, t]]
    return scores


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.exp(scores - scores.max())
    return z / z.sum()


def block_conditional(model: GridModel, weights: Weights, y, block: Sequence[int]) -> np.ndarray:
    """p(y_block | y_rest) over joint block labels."""
    y = model.check_labels(y)
    U, P = model.log_potentials(weights)
    return softmax(block_local_scores(model, U, P, y, block))


class BlockStructure(NamedTuple):
    """Flattened partition + topology arrays consumed by the kernels."""

    num_labels: int
    blk_ptr: np.ndarray      # (nb+1,) offsets into blk_nodes
    blk_nodes: np.ndarray
    int_ptr: np.ndarray      # (nb+1,) internal edges per block
    int_e: np.ndarray
    int_pa: np.ndarray       # position in block of first endpoint
    int_pb: np.ndarray
    bnd_ptr: np.ndarray      # (nb+1,) boundary edges per block
    bnd_e: np.ndarray
    bnd_pos: np.ndarray      # position of the in-block endpoint
    bnd_other: np.ndarray
    bnd_side: np.ndarray     # 0: in-block node is the first endpoint
    noise_ptr: np.ndarray    # (nb+1,) offsets into a flat perturbation vector

    @property
    def num_blocks(self) -> int:
        return len(self.blk_ptr) - 1

    @property
    def num_noise(self) -> int:
        return int(self.noise_ptr[-1])


def block_structure(model: GridModel, partition: BlockPartition) -> BlockStructure:
    partition.check(model)
    K = model.num_labels
    blk_ptr, blk_nodes = [0], []
    int_ptr, int_e, int_pa, int_pb = [0], [], [], []
    bnd_ptr, bnd_e, bnd_pos, bnd_other, bnd_side = [0], [], [], [], []
    noise_ptr = [0]
    for block in partition.blocks:
        pos = {node: t for t, node in enumerate(block)}
        blk_nodes.extend(block)
        for t, i in enumerate(block):
            for e, j, side in model.neighbors[i]:
                if j in pos:
                    if side == 0:
                        int_e.append(e)
                        int_pa.append(t)
                        int_pb.append(pos[j])
                else:
                    bnd_e.append(e)
                    bnd_pos.append(t)
                    bnd_other.append(j)
                    bnd_side.append(side)
        blk_ptr.append(len(blk_nodes))
        int_ptr.append(len(int_e))
        bnd_ptr.append(len(bnd_e))
        noise_ptr.append(noise_ptr[-1] + K ** len(block))
    a = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
    return BlockStructure(
        K, a(blk_ptr), a(blk_nodes), a(int_ptr), a(int_e), a(int_pa), a(int_pb),
        a(bnd_ptr), a(bnd_e), a(bnd_pos), a(bnd_other), a(bnd_side), a(noise_ptr),
    )


# -- serialization -------------------------------------------------------------

def model_to_dict(model: GridModel, weights: Weights) -> dict:
    model._check_weights(weights)
    return {
        "version": FORMAT_VERSION,
        "height": model.height,
        "width": model.width,
        "num_labels": model.num_labels,
        "d_unary": model.d_unary,
        "d_pairwise": model.d_pairwise,
        "symmetric_pairwise": bool(weights.symmetric_pairwise),
        "unary_features": model.unary_features.tolist(),
        "pairwise_features": model.pairwise_features.tolist(),
        "w_unary": weights.unary.tolist(),
        "w_pairwise": weights.pairwise.tolist(),
    }


def model_from_dict(doc: dict) -> tuple[GridModel, Weights]:
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model document version {doc.get('version')!r}")
    du, dp = int(doc["d_unary"]), int(doc["d_pairwise"])
    K = int(doc["num_labels"])
    model = GridModel(
        int(doc["height"]), int(doc["width"]), K,
        np.array(doc["unary_features"], dtype=np.float64).reshape(-1, du),
        np.array(doc["pairwise_features"], dtype=np.float64).reshape(-1, dp),
    )
    weights = Weights(
        np.array(doc["w_unary"], dtype=np.float64).reshape(K, du),
        np.array(doc["w_pairwise"], dtype=np.float64).reshape(K, K, dp),
        bool(doc["symmetric_pairwise"]),
    )
    return model, weights


def dumps_model(model: GridModel, weights: Weights) -> str:
    # float repr is the shortest string that round-trips exactly (<= 17 significant digits)
    return json.dumps(model_to_dict(model, weights))


def loads_model(text: str) -> tuple[GridModel, Weights]:
    return model_from_dict(json.loads(text))


def save_model(path, model: GridModel, weights: Weights) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_model(model, weights))


def load_model(path) -> tuple[GridModel, Weights]:
    with open(path) as fh:
        return loads_model(fh.read())
