import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from locpmap import oracle
from locpmap.inference import (InferenceConfig, dropout_count, gibbs, icm, icm_iter, infer,
                               locpmap_predict, locpmap_sample, loopy_bp, mean_field,
                               mean_field_update, simulated_annealing)
from locpmap.model import BlockPartition, Weights, total_log_potential
from locpmap.perturb import GumbelSource, draw_table, zero_table

from conftest import random_model, table_model


def _is_coordinate_max(model, w, y):
    return oracle.is_local_max_loop(model, w, zero_table(model, BlockPartition.singletons(model.num_nodes)), y)


def test_icm_independent_nodes():
    U = np.array([[0.5, -1.0], [0.0, 2.0], [1.0, 3.0], [-2.0, 0.0]])
    m, w = table_model(2, 2, U)
    y, sweeps = icm(m, w, init=[1, 0, 0, 0])
    assert y.tolist() == [0, 1, 1, 1]
    assert sweeps == 2   # one changing sweep plus the confirming sweep


def test_icm_two_node_attractive():
    # Both (0,0) and (1,1) are coordinate-wise maxima of this model: from (1,1) node 0
    # compares 0+1 with 2 and keeps label 1, node 1 compares 1 with 2.5.
    m, w = table_model(1, 2, [[1.0, 0.0], [0.0, 0.5]], [[2.0, 0.0], [0.0, 2.0]])
    y, _ = icm(m, w, init=[1, 1])
    assert y.tolist() == [1, 1]
    locs = oracle.enumerate_local_maxima(m, w, zero_table(m, BlockPartition.singletons(2)))
    assert locs == {(0, 0), (1, 1)}
    y0, _ = icm(m, w, init=[1, 0])
    assert y0.tolist() == [0, 0]


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3), st.integers(2, 3))
def test_icm_output_is_coordinate_max(seed, h, wd, K):
    model, w = random_model(h, wd, K, seed=seed, scale=2.0)
    init = np.random.default_rng(seed).integers(0, K, h * wd)
    y, sweeps = icm(model, w, init=init)
    assert sweeps < InferenceConfig().max_sweeps
    assert _is_coordinate_max(model, w, y)
    assert total_log_potential(model, w, y) >= total_log_potential(model, w, init) - 1e-12


def test_icm_monotone_per_update():
    # replay raster ICM by hand and check every single-node update never lowers theta
    model, w = random_model(3, 3, seed=5, scale=2.0)
    U, P = model.log_potentials(w)
    y = np.random.default_rng(0).integers(0, 2, 9)
    ref, _ = icm(model, w, init=y)
    for _ in range(100):
        changed = False
        for i in range(9):
            before = total_log_potential(model, w, y)
            s = U[i].copy()
            for e, j, side in model.neighbors[i]:
                s += P[e][:, y[j]] if side == 0 else P[e][y[j], :]
            new = int(np.argmax(s))
            if new != y[i] and s[new] > s[y[i]]:
                y[i] = new
                changed = True
            assert total_log_potential(model, w, y) >= before - 1e-12
        if not changed:
            break
    assert y.tolist() == ref.tolist()


def test_locpmap_zero_noise_equals_icm():
    model, w = random_model(3, 3, seed=7)
    init = np.array([0, 1, 0, 1, 1, 0, 0, 0, 1])
    a = locpmap_sample(model, w, GumbelSource(0, 0), zero_noise=True, init=init)
    b, _ = icm(model, w, init=init)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("part", [None, BlockPartition(((0, 1), (2, 3)), 4),
                                  BlockPartition(((0, 3), (1,), (2,)), 4)])
def test_locpmap_sample_in_loc(part):
    model, w = random_model(2, 2, seed=19, scale=2.0)
    p = part or BlockPartition.singletons(4)
    for s in range(25):
        src = GumbelSource(11, s)
        y = locpmap_sample(model, w, src, part)
        # regenerate the same table the sampler drew from this stream
        table = draw_table(src.generator(), model, p)
        assert tuple(int(v) for v in y) in oracle.enumerate_local_maxima(model, w, table)


def test_locpmap_predict_single_sample():
    model, w = random_model(3, 3, seed=1)
    res = locpmap_predict(model, w, InferenceConfig(num_samples=1, seed=4))
    y = locpmap_sample(model, w, GumbelSource(4, 0))
    assert np.array_equal(res.labels, y)
    assert np.array_equal(res.node_prob.max(axis=1), np.ones(9))
    assert np.all(res.node_var == 0)


def test_locpmap_unary_dominant():
    U = np.tile([10.0, 0.0], (16, 1))
    m, w = table_model(4, 4, U)
    res = locpmap_predict(m, w, InferenceConfig(num_samples=50, seed=0))
    assert np.all(res.labels == 0) and np.all(res.node_var == 0)
    assert res.samples_used == 50


@pytest.mark.parametrize("method", ["icm", "locpmap", "icm_iter", "gibbs", "mean_field", "lbp", "sa"])
def test_every_method_deterministic_and_normalized(method):
    model, w = random_model(4, 4, seed=2)
    cfg = InferenceConfig(method=method, num_samples=20, gibbs_samples=200, sa_sweeps=50, seed=9)
    a, b = infer(model, w, cfg), infer(model, w, cfg)
    assert a.same_as(b)
    assert np.allclose(a.node_prob.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((a.node_var >= 0) & (a.node_var <= 0.25))
    p_hat = a.node_prob[np.arange(16), a.labels]
    assert np.allclose(a.node_var, p_hat * (1 - p_hat))


@pytest.mark.parametrize("method", ["locpmap", "icm_iter"])
def test_threads_do_not_change_results(method):
    model, w = random_model(4, 4, seed=3)
    cfg = InferenceConfig(method=method, num_samples=17, seed=1)
    assert infer(model, w, cfg, threads=1).same_as(infer(model, w, cfg, threads=4))


def test_icm_iter_no_dropout_fixed_init():
    model, w = random_model(3, 3, seed=4)
    init = np.zeros(9, dtype=int)
    res = icm_iter(model, w, InferenceConfig("icm_iter", num_samples=5, dropout_fraction=0.0), init=init)
    y, _ = icm(model, w, init=init)
    assert np.array_equal(res.labels, y) and np.all(res.node_var == 0)


def test_dropout_count():
    assert dropout_count(0.1, 100) == 10
    assert dropout_count(0.0, 100) == 0
    assert dropout_count(0.25, 10) == 3   # 2.5 rounds half up
    model, w = random_model(10, 10, seed=0)
    res = icm_iter(model, w, InferenceConfig("icm_iter", num_samples=3))
    assert res.extra["masked_per_repeat"] == 10


def test_gibbs_independent_softmax():
    m, w = table_model(1, 1, [[math.log(3.0), 0.0]])
    res = gibbs(m, w, InferenceConfig("gibbs", gibbs_samples=5000, seed=2))
    assert abs(res.node_prob[0, 0] - 0.75) < 0.02
    assert res.samples_used == 5000


def test_gibbs_burn_in_default():
    assert InferenceConfig(gibbs_samples=1000).effective_burn_in == 200
    assert InferenceConfig(gibbs_samples=1000, burn_in=5).effective_burn_in == 5


def test_mean_field_independent():
    U = np.array([[0.5, -1.0], [0.0, 2.0], [1.0, 3.0], [-2.0, 0.0]])
    m, w = table_model(2, 2, U)
    res = mean_field(m, w, InferenceConfig("mean_field", max_sweeps=1))
    ex = np.exp(U) / np.exp(U).sum(axis=1, keepdims=True)
    assert np.allclose(res.node_prob, ex, atol=1e-15)


def test_mean_field_symmetric_fixed_point():
    m, w = table_model(1, 2, np.zeros((2, 2)), [[1.0, 0.0], [0.0, 1.0]])
    res = mean_field(m, w, InferenceConfig("mean_field"))
    assert np.allclose(res.node_prob, 0.5, atol=1e-15)
    assert res.labels.tolist() == [0, 0]


def test_mean_field_fixed_point_and_kl():
    model, w = random_model(2, 2, seed=6)
    res = mean_field(model, w, InferenceConfig("mean_field", tol=1e-12, max_sweeps=1000))
    U, P = model.log_potentials(w)
    q = res.node_prob
    assert np.max(np.abs(mean_field_update(U, P, model, q) - q)) < 1e-6
    p = oracle.exact_distribution(model, w)
    qf = np.einsum("a,b,c,d->abcd", *q)
    assert float((qf * (np.log(qf) - np.log(p))).sum()) >= 0.0


def test_lbp_chain_exact_and_normalized():
    model, w = random_model(1, 6, K=3, seed=8)
    res = loopy_bp(model, w, InferenceConfig("lbp", max_sweeps=1000, tol=1e-14))
    assert np.max(np.abs(res.node_prob - oracle.exact_marginals(model, w))) < 1e-8
    assert np.allclose(res.extra["messages"].sum(axis=2), 1.0, atol=1e-12)
    assert res.converged


def test_lbp_messages_normalized_each_iteration():
    model, w = random_model(3, 3, seed=8)
    for it in range(1, 6):
        res = loopy_bp(model, w, InferenceConfig("lbp", max_sweeps=it, tol=0.0))
        assert np.allclose(res.extra["messages"].sum(axis=2), 1.0, atol=1e-12)


def test_lbp_independent_nodes():
    U = np.array([[0.5, -1.0], [0.0, 2.0], [1.0, 3.0], [-2.0, 0.0]])
    m, w = table_model(2, 2, U)
    res = loopy_bp(m, w, InferenceConfig("lbp"))
    ex = np.exp(U) / np.exp(U).sum(axis=1, keepdims=True)
    assert np.allclose(res.node_prob, ex, atol=1e-12)


def test_sa_cold_start_is_icm_from_random_init():
    model, w = random_model(3, 3, seed=10)
    cfg = InferenceConfig("sa", sa_t0=1e-9, seed=3)
    res = simulated_annealing(model, w, cfg)
    assert _is_coordinate_max(model, w, res.labels)


def test_sa_unary_dominant():
    U = np.array([[10.0, 0.0], [0.0, 10.0], [10.0, 0.0], [0.0, 10.0]])
    m, w = table_model(2, 2, U, [[0.3, 0.0], [0.0, 0.3]])
    res = simulated_annealing(m, w, InferenceConfig("sa", seed=1))
    assert res.labels.tolist() == [0, 1, 0, 1]


def test_sa_finds_map_on_small_model():
    model, w = random_model(2, 2, seed=0, scale=1.5)
    target = oracle.exact_map(model, w)
    hits = sum(np.array_equal(simulated_annealing(model, w, InferenceConfig("sa", seed=s)).labels, target)
               for s in range(100))
    assert hits >= 95


def test_config_validation():
    with pytest.raises(ValueError, match="valid"):
        InferenceConfig(method="bogus")
    with pytest.raises(ValueError):
        InferenceConfig(num_samples=0)
