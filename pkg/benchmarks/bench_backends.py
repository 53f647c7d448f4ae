"""Time the numba kernels against the numpy fallbacks on a random grid CRF.

    python3 benchmarks/bench_backends.py --size 32 --repeat 5

Compile time is excluded: every kernel is called once before timing. The two
backends are also checked to agree on each workload.
"""
import argparse
import time

import numpy as np

from locpmap import kernels
from locpmap.model import BlockPartition, GridModel, Weights, block_structure, grid_edges
from locpmap.perturb import GumbelSource, draw_table, open_uniform


def random_problem(size, K, seed):
    rng = np.random.default_rng(seed)
    m = grid_edges(size, size).shape[0]
    model = GridModel(size, size, K, rng.normal(size=(size * size, 3)), rng.normal(size=(m, 2)))
    return model, Weights.random(rng, K, 3, 2, 1.0)


def workloads(size, K, seed):
    model, w = random_problem(size, K, seed)
    U, P = model.log_potentials(w)
    n = model.num_nodes
    st = block_structure(model, BlockPartition.singletons(n))
    rng = GumbelSource(seed, 0).generator()
    noise = np.stack([draw_table(rng, model, BlockPartition.singletons(n)).values for _ in range(8)])
    init = rng.integers(0, K, (8, n))
    sweeps = 200
    unif = open_uniform(rng, (sweeps, n))
    y0 = rng.integers(0, K, n)
    Y = rng.integers(0, K, (16, n))

    def icm(backend):
        y = init.copy()
        kernels.block_icm(np.broadcast_to(U, (8,) + U.shape), P, st, noise, y, 100, backend=backend)
        return y

    def gibbs(backend):
        y, counts = y0.copy(), np.zeros((n, K), dtype=np.int64)
        kernels.block_gibbs(U, P, st, np.ones(sweeps), unif, y, 50, counts, backend=backend)
        return counts

    def mf(backend):
        q = np.full((n, K), 1.0 / K)
        kernels.mean_field(U, P, st, q, 50, 0.0, backend=backend)
        return q

    def lbp(backend):
        msg = np.full((model.num_edges, 2, K), 1.0 / K)
        kernels.loopy_bp(U, P, model.edges, msg, 50, 0.0, 0.5, backend=backend)
        return msg

    def pl(backend):
        Xu = np.broadcast_to(model.unary_features, (16,) + model.unary_features.shape)
        Xp = np.broadcast_to(model.pairwise_features, (16,) + model.pairwise_features.shape)
        out = kernels.pl_singletons(np.ascontiguousarray(Xu), np.ascontiguousarray(Xp), Y, model.edges,
                                    w.unary, w.pairwise, np.ones(n), True, backend=backend)
        return np.concatenate([np.ravel(out[0]), out[1].ravel(), out[2].ravel()])

    return {"block_icm x8": icm, "block_gibbs 200 sweeps": gibbs, "mean_field 50 sweeps": mf,
            "lbp 50 iters": lbp, "pl_singletons 16 images": pl}


def best_time(fn, backend, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(backend)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=32, help="grid side length")
    ap.add_argument("--labels", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"{args.size}x{args.size} grid, K={args.labels}, best of {args.repeat}")
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>11}{'speedup':>9}")
    for name, fn in workloads(args.size, args.labels, args.seed).items():
        a, b = fn("numba"), fn("numpy")      # warm-up, includes JIT compile
        if not np.allclose(a, b, atol=1e-9):
            raise SystemExit(f"{name}: backends disagree")
        tn = best_time(fn, "numba", args.repeat)
        tp = best_time(fn, "numpy", args.repeat)
        print(f"{name:<26}{1e3 * tn:>10.2f}{1e3 * tp:>11.2f}{tp / tn:>8.1f}x")


if __name__ == "__main__":
    main()
