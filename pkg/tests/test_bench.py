import numpy as np
import pytest

from locpmap.bench import (GUMBEL_STD, SyntheticSpec, build_features, corrupt, generate_dataset,
                           generate_images, iou, make_mask, pooled_iou, run_experiment)
from locpmap.learning import TrainConfig
from locpmap.perturb import GumbelSource


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(image_size=(3, 8))
    with pytest.raises(ValueError):
        SyntheticSpec(num_train=0)
    with pytest.raises(ValueError):
        SyntheticSpec.from_dict({"snr": 1.0, "colour": "red"})
    assert SyntheticSpec.from_dict(SyntheticSpec().to_dict()) == SyntheticSpec()


def test_noiseless_limit():
    spec = SyntheticSpec(image_size=(12, 12), num_train=3, num_test=3, snr=1e9)
    tr, te = generate_images(spec)
    for mask, x in tr + te:
        assert np.array_equal((x > 0.5).astype(int), mask)


def test_deterministic():
    spec = SyntheticSpec(image_size=(8, 8), num_train=4, num_test=2, seed=3)
    a, b = generate_images(spec), generate_images(spec)
    for (ma, xa), (mb, xb) in zip(a[0] + a[1], b[0] + b[1]):
        assert np.array_equal(ma, mb) and np.array_equal(xa, xb)


@pytest.mark.parametrize("kind", ["gumbel", "gaussian"])
def test_noise_scale(kind):
    snr = 0.25
    for k in range(10):
        rng = GumbelSource(0, k).generator()
        mask = make_mask(64, 64, "random_polygons", rng)
        _, noise = corrupt(mask, kind, snr, rng, return_noise=True)
        ratio = noise.std() / mask.std()
        assert (1 / snr) * 0.9 <= ratio <= (1 / snr) * 1.1


def test_gumbel_noise_zero_mean():
    rng = GumbelSource(1, 0).generator()
    _, noise = corrupt(np.tile([0, 1], (100, 50)), "gumbel", 1.0, rng, return_noise=True)
    assert abs(noise.mean()) < 0.02
    assert GUMBEL_STD == pytest.approx(np.pi / np.sqrt(6))


@pytest.mark.parametrize("family", ["random_polygons", "digits_like_blobs"])
def test_masks_have_both_classes(family):
    for k in range(20):
        m = make_mask(16, 16, family, GumbelSource(2, k).generator())
        assert 0 < m.mean() < 1


def test_features():
    uf, pf = build_features(np.full((3, 4), 0.5))
    assert uf.shape == (12, 2) and pf.shape == (17, 3)
    assert np.all(uf == [0.5, 1.0])
    img = np.arange(6.0).reshape(2, 3) / 10
    _, pf = build_features(img)
    assert pf[1].tolist() == [0.0, 0.3, 1.0]   # edge (0, 3)


def test_iou_examples():
    t = np.array([0, 0, 1, 1])
    assert iou(t, t, 2).per_class_iou.tolist() == [1.0, 1.0]
    assert iou(1 - t, t, 2).per_class_iou.tolist() == [0.0, 0.0]
    r = iou(np.array([0, 1, 1, 1]), t, 2)
    assert r.per_class_iou.tolist() == [0.5, 2 / 3]
    assert r.mean_iou == pytest.approx(0.5833333333, abs=1e-9)
    assert iou(np.zeros(4), np.zeros(4), 2).per_class_iou.tolist() == [1.0, 1.0]
    with pytest.raises(ValueError):
        iou(np.zeros(4), np.zeros(5), 2)
    assert pooled_iou([t], [t], 2).mean_iou == 1.0


def test_generate_dataset_shapes():
    spec = SyntheticSpec(image_size=(6, 5), num_train=3, num_test=2)
    tr, te, truth = generate_dataset(spec)
    assert len(tr) == 3 and len(te) == 2 and truth[0].shape == (30,)
    assert tr.d_unary == 2 and tr.d_pairwise == 3


def test_noiseless_icm_experiment():
    spec = SyntheticSpec(image_size=(12, 12), num_train=20, num_test=10, snr=1e9)
    res = run_experiment(spec, ["icm"], TrainConfig(learning_rate=8.0, max_iters=300))
    assert res.score("icm").mean_iou > 0.99


def test_method_order_isolation():
    spec = SyntheticSpec(image_size=(8, 8), num_train=10, num_test=4)
    cfg = TrainConfig(learning_rate=4.0, max_iters=50)
    a = run_experiment(spec, ["icm", "locpmap", "sa"], cfg)
    b = run_experiment(spec, ["sa", "locpmap", "icm"], cfg)
    for m in ["icm", "locpmap", "sa"]:
        assert np.array_equal(a.score(m).per_class_iou, b.score(m).per_class_iou)
    with pytest.raises(ValueError):
        run_experiment(spec, ["bogus"], cfg)


def test_threads_do_not_change_scores():
    spec = SyntheticSpec(image_size=(8, 8), num_train=10, num_test=6)
    cfg = TrainConfig(learning_rate=4.0, max_iters=30)
    a = run_experiment(spec, ["locpmap", "gibbs"], cfg, threads=1)
    b = run_experiment(spec, ["locpmap", "gibbs"], cfg, threads=3)
    assert a.rows(timing=False) == b.rows(timing=False)
