import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from locpmap import kernels, oracle
from locpmap.learning import (Dataset, TrainConfig, TrainingDiverged, pl_gradient, pl_objective, train,
                              weight_error)
from locpmap.model import BlockPartition, Weights, block_conditional
from locpmap.perturb import GumbelSource
from locpmap.validation import finite_difference_check

from conftest import random_model, table_model


def _data(seed=0, n=10, h=2, w=2, K=2):
    model, wt = random_model(h, w, K, seed=seed)
    ys = oracle.exact_sample(model, wt, GumbelSource(seed, 0), n)
    return Dataset([(model, y) for y in ys]), model, wt


def test_zero_weights_value():
    ds, model, _ = _data(n=7, h=2, w=3)
    w0 = Weights.zeros(2, model.d_unary, model.d_pairwise)
    assert pl_objective(ds, w0) == pytest.approx(-6 * 7 * math.log(2), abs=1e-10)


def test_hand_two_node_value():
    m, w = table_model(1, 2, [[0.3, -0.2], [0.1, 0.4]], [[1.0, -0.5], [0.2, 0.7]])
    y = np.array([1, 0])
    ds = Dataset([(m, y)])
    expect = math.log(block_conditional(m, w, y, (0,))[1]) + math.log(block_conditional(m, w, y, (1,))[0])
    assert pl_objective(ds, w) == pytest.approx(expect, abs=1e-12)


def test_global_block_is_log_likelihood():
    ds, model, w = _data(seed=4, n=6, h=2, w=3)
    p = oracle.exact_distribution(model, w)
    ll = sum(math.log(p[tuple(y)]) for _, y in ds.items)
    assert pl_objective(ds, w, BlockPartition.whole(6)) == pytest.approx(ll, abs=1e-10)


@pytest.mark.parametrize("part", [None, BlockPartition(((0, 1), (2, 3)), 4),
                                  BlockPartition(((0, 3), (1,)), 4)])
def test_finite_differences(part):
    ds, model, w = _data(seed=2, n=8)
    err, _, _ = finite_difference_check(ds, w, part)
    assert err < 1e-5


def test_l2_term():
    ds, model, w = _data(seed=3)
    lam = 0.7
    assert pl_objective(ds, w, l2_weight=lam) == pytest.approx(
        pl_objective(ds, w) - lam * float((w.flat() ** 2).sum()), abs=1e-10)
    g = pl_gradient(ds, w, l2_weight=lam).flat()
    assert np.allclose(g, pl_gradient(ds, w).flat() - 2 * lam * w.flat(), atol=1e-12)


def test_symmetric_data_unary_gradient_cancels():
    model, _ = random_model(2, 2, seed=1)
    y = np.array([0, 1, 1, 0])
    ds = Dataset([(model, y), (model, 1 - y)])
    g = pl_gradient(ds, Weights.zeros(2, model.d_unary, model.d_pairwise))
    assert np.max(np.abs(g.unary)) < 1e-12


def test_item_order_invariance():
    ds, model, w = _data(seed=5, n=12)
    rev = Dataset(ds.items[::-1])
    assert pl_objective(rev, w) == pytest.approx(pl_objective(ds, w), abs=1e-10)


def test_mixed_shapes():
    a, _, _ = _data(seed=1, n=3, h=2, w=2)
    b, _, _ = _data(seed=1, n=3, h=3, w=2)
    both = Dataset(a.items + b.items)
    w = Weights.random(np.random.default_rng(0), 2, 2, 2)
    assert pl_objective(both, w) == pytest.approx(pl_objective(a, w) + pl_objective(b, w), abs=1e-10)


def test_monotone_trace_small_rate():
    ds, model, _ = _data(seed=6, n=20)
    w0 = Weights.zeros(2, model.d_unary, model.d_pairwise)
    res = train(ds, w0, TrainConfig(learning_rate=1e-3, max_iters=50, normalize=False))
    t = np.array(res.trace)
    assert len(t) == 51
    assert np.all(np.diff(t) >= 0)


def test_init_at_optimum_stops_immediately():
    ds, model, _ = _data(seed=7, n=50)
    w0 = Weights.zeros(2, model.d_unary, model.d_pairwise)
    fit = train(ds, w0, TrainConfig(learning_rate=2.0, max_iters=5000, grad_tol=1e-7))
    assert fit.grad_norms[-1] < 1e-7
    again = train(ds, fit.weights, TrainConfig(learning_rate=2.0, grad_tol=1e-6))
    assert again.iterations == 0 and len(again.trace) == 1


def test_strong_l2_shrinks_weights():
    ds, model, _ = _data(seed=8, n=20)
    w0 = Weights.random(np.random.default_rng(1), 2, model.d_unary, model.d_pairwise)
    res = train(ds, w0, TrainConfig(learning_rate=1e-7, max_iters=200, l2_weight=1e6, normalize=False))
    assert np.max(np.abs(res.weights.flat())) < 1e-2


def test_divergence_is_reported():
    ds, model, _ = _data(seed=9, n=5)
    w0 = Weights.zeros(2, model.d_unary, model.d_pairwise)
    with pytest.raises(TrainingDiverged) as info:
        train(ds, w0, TrainConfig(learning_rate=1e308, max_iters=10, normalize=False))
    assert info.value.iteration >= 1


def test_symmetric_and_frozen_projection():
    ds, model, _ = _data(seed=10, n=20)
    ws = Weights.zeros(2, model.d_unary, model.d_pairwise, True)
    res = train(ds, ws, TrainConfig(learning_rate=0.5, max_iters=20))
    assert res.weights.symmetric_pairwise
    assert np.array_equal(res.weights.pairwise, res.weights.pairwise.transpose(1, 0, 2))
    wr = Weights.random(np.random.default_rng(2), 2, model.d_unary, model.d_pairwise)
    frozen = train(ds, wr, TrainConfig(learning_rate=0.5, max_iters=20, freeze_pairwise=True))
    assert np.array_equal(frozen.weights.pairwise, wr.pairwise)


def test_minibatch_deterministic():
    ds, model, _ = _data(seed=11, n=30)
    w0 = Weights.zeros(2, model.d_unary, model.d_pairwise)
    cfg = TrainConfig(learning_rate=0.5, max_iters=15, batch_size=7, seed=3)
    a, b = train(ds, w0, cfg), train(ds, w0, cfg)
    assert np.array_equal(a.weights.flat(), b.weights.flat()) and a.trace == b.trace


def test_trace_csv(tmp_path):
    ds, model, _ = _data(seed=12, n=10)
    res = train(ds, Weights.zeros(2, model.d_unary, model.d_pairwise), TrainConfig(max_iters=5))
    p = tmp_path / "t.csv"
    res.write_trace_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "iter,objective,grad_norm" and len(lines) == 7


def test_gauge_centering():
    rng = np.random.default_rng(0)
    a = Weights.random(rng, 2, 2, 3)
    shifted = Weights(a.unary + np.array([1.0, 2.0]), a.pairwise + np.array([0.5, -1.0, 3.0]))
    assert weight_error(a, shifted) == pytest.approx(0.0, abs=1e-12)
    assert weight_error(a, shifted, gauge=False) > 0.5


@given(st.integers(0, 1000), st.booleans())
def test_singleton_backends_agree(seed, want_grad):
    ds, model, w = _data(seed=seed, n=4, h=3, w=3)
    g = ds.groups[0]
    mask = np.ones(9)
    a = kernels.pl_singletons(g.Xu, g.Xp, g.Y, g.edges, w.unary, w.pairwise, mask, want_grad, backend="numba")
    b = kernels.pl_singletons(g.Xu, g.Xp, g.Y, g.edges, w.unary, w.pairwise, mask, want_grad, backend="numpy")
    assert a[0] == pytest.approx(b[0], abs=1e-10)
    if want_grad:
        assert np.allclose(a[1], b[1], atol=1e-10) and np.allclose(a[2], b[2], atol=1e-10)


def test_singleton_fast_path_matches_generic():
    from locpmap import learning

    ds, model, w = _data(seed=13, n=5, h=2, w=3)
    part = BlockPartition(((0,), (2,), (3,), (5,)), 6)   # partial singleton cover
    g = ds.groups[0]
    fast = learning._group_singletons(g, w.unary, w.pairwise, part, 2, True)
    slow = learning._group_blocks(g, w.unary, w.pairwise, part, 2, True)
    assert fast[0] == pytest.approx(slow[0], abs=1e-10)
    assert np.allclose(fast[1], slow[1], atol=1e-10) and np.allclose(fast[2], slow[2], atol=1e-10)
