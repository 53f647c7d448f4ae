"""The numba kernels and their numpy twins must agree on identical inputs."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from locpmap import kernels
from locpmap._backend import HAVE_NUMBA
from locpmap.model import BlockPartition, block_structure
from locpmap.perturb import GumbelSource, draw_gumbel, open_uniform

from conftest import random_model

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def _partition(n, rng):
    order = rng.permutation(n)
    blocks, i = [], 0
    while i < n:
        size = int(rng.integers(1, 4))
        blocks.append(tuple(sorted(order[i:i + size].tolist())))
        i += size
    return BlockPartition(tuple(blocks), n)


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4), st.integers(2, 3))
def test_block_icm_parity(seed, h, w, K):
    model, wt = random_model(h, w, K, seed=seed, scale=2.0)
    rng = np.random.default_rng(seed)
    part = _partition(model.num_nodes, rng)
    st_ = block_structure(model, part)
    U, P = model.log_potentials(wt)
    B = 3
    noise = draw_gumbel(GumbelSource(seed, 1).generator(), (B, st_.num_noise))
    y0 = rng.integers(0, K, (B, model.num_nodes))
    Ub = np.broadcast_to(U, (B,) + U.shape)
    ya, yb = y0.copy(), y0.copy()
    sa = kernels.block_icm(Ub, P, st_, noise, ya, 100, backend="numba")
    sb = kernels.block_icm(Ub, P, st_, noise, yb, 100, backend="numpy")
    assert np.array_equal(ya, yb) and np.array_equal(sa, sb)


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 4))
def test_block_gibbs_parity(seed, h, w):
    model, wt = random_model(h, w, 2, seed=seed)
    rng = np.random.default_rng(seed)
    part = _partition(model.num_nodes, rng)
    st_ = block_structure(model, part)
    U, P = model.log_potentials(wt)
    sweeps = 40
    temps = 2.0 * 0.9 ** np.arange(sweeps)
    unif = open_uniform(GumbelSource(seed, 2).generator(), (sweeps, st_.num_blocks))
    y0 = rng.integers(0, 2, model.num_nodes)
    ya, yb = y0.copy(), y0.copy()
    ca = np.zeros((model.num_nodes, 2), dtype=np.int64)
    cb = ca.copy()
    kernels.block_gibbs(U, P, st_, temps, unif, ya, 10, ca, backend="numba")
    kernels.block_gibbs(U, P, st_, temps, unif, yb, 10, cb, backend="numpy")
    assert np.array_equal(ya, yb) and np.array_equal(ca, cb)


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 4), st.integers(2, 3))
def test_mean_field_parity(seed, h, w, K):
    model, wt = random_model(h, w, K, seed=seed)
    st_ = block_structure(model, BlockPartition.singletons(model.num_nodes))
    U, P = model.log_potentials(wt)
    qa = np.full((model.num_nodes, K), 1.0 / K)
    qb = qa.copy()
    ra = kernels.mean_field(U, P, st_, qa, 30, 1e-9, backend="numba")
    rb = kernels.mean_field(U, P, st_, qb, 30, 1e-9, backend="numpy")
    assert ra == rb
    assert np.allclose(qa, qb, atol=1e-13, rtol=0)


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 4), st.integers(2, 3))
def test_lbp_parity(seed, h, w, K):
    model, wt = random_model(h, w, K, seed=seed)
    U, P = model.log_potentials(wt)
    ma = np.full((model.num_edges, 2, K), 1.0 / K)
    mb = ma.copy()
    ra = kernels.loopy_bp(U, P, model.edges, ma, 25, 1e-10, 0.5, backend="numba")
    rb = kernels.loopy_bp(U, P, model.edges, mb, 25, 1e-10, 0.5, backend="numpy")
    assert ra == rb
    assert np.allclose(ma, mb, atol=1e-13, rtol=0)


def test_unknown_backend_env(monkeypatch):
    import importlib

    from locpmap import _backend

    before = _backend.BACKEND
    monkeypatch.setenv("LOCPMAP_BACKEND", "cuda")
    with pytest.raises(ImportError):
        importlib.reload(_backend)
    monkeypatch.setenv("LOCPMAP_BACKEND", before)
    importlib.reload(_backend)
    assert _backend.BACKEND == before
