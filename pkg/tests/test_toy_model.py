import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_difference
from fedlodrop.lora_core import DomainError, LoraAdapter, ShapeError, sample_mask
from fedlodrop.toy_model import (
    LossKind,
    SyntheticDataset,
    accuracy,
    backward_all,
    build_network,
    forward_loss,
    generate_synthetic,
    label_entropy,
    partition_non_iid,
)


def per_sample_loss(net, x, y):
    """Plain loop re-implementation of the network loss for one sample."""
    h = x
    for u, layer in enumerate(net.layers):
        w = layer.base_weight + layer.b_mat @ layer.a_mat if isinstance(layer, LoraAdapter) else layer
        h = w @ h
        if u < len(net.layers) - 1:
            h = np.tanh(h)
    if net.loss_kind is LossKind.SOFTMAX_CROSS_ENTROPY:
        return float(np.log(np.sum(np.exp(h))) - h[y])
    t = np.eye(len(h))[y]
    return float(np.mean((h - t) ** 2))


def test_generate_is_deterministic_and_balanced():
    a = generate_synthetic(300, 5, 3, seed=4)
    b = generate_synthetic(300, 5, 3, seed=4)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=3)
    assert np.all(np.abs(counts - 100) <= 10)
    with pytest.raises(DomainError):
        generate_synthetic(1, 3, 2, seed=0)
    with pytest.raises(DomainError):
        generate_synthetic(10, 3, 1, seed=0)


def test_linear_probe_separates_two_classes():
    ds = generate_synthetic(400, 6, 2, seed=1, separation=6.0)
    x = np.hstack([ds.features, np.ones((len(ds), 1))])
    w, *_ = np.linalg.lstsq(x, 2.0 * ds.labels - 1.0, rcond=None)
    assert np.mean((x @ w > 0) == (ds.labels == 1)) >= 0.95


def test_csv_round_trip(tmp_path):
    ds = generate_synthetic(20, 3, 2, seed=2)
    ds.to_csv(tmp_path / "d.csv")
    back = SyntheticDataset.from_csv(tmp_path / "d.csv", n_classes=2)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_partition_single_device_and_errors():
    ds = generate_synthetic(50, 3, 2, seed=0)
    p = partition_non_iid(ds, 1, 1.0, seed=0)
    np.testing.assert_array_equal(p.shards[0], np.arange(50))
    with pytest.raises(DomainError):
        partition_non_iid(ds, 51, 1.0, seed=0)
    with pytest.raises(DomainError):
        partition_non_iid(ds, 2, 0.0, seed=0)


@given(st.integers(1, 12), st.floats(0.05, 100.0), st.integers(0, 10_000))
def test_partition_disjoint_covering_nonempty(k, conc, seed):
    ds = generate_synthetic(60, 2, 3, seed=seed % 7)
    p = partition_non_iid(ds, k, conc, seed)
    allidx = np.concatenate(p.shards)
    assert len(allidx) == len(set(allidx.tolist())) == 60
    assert all(len(s) > 0 for s in p.shards)
    assert np.isclose(p.weights.sum(), 1.0)


def test_huge_concentration_matches_global_fractions():
    ds = generate_synthetic(4000, 2, 4, seed=3)
    p = partition_non_iid(ds, 4, 1e6, seed=3)
    glob = np.bincount(ds.labels, minlength=4) / len(ds)
    for s in p.shards:
        frac = np.bincount(ds.labels[s], minlength=4) / len(s)
        assert np.all(np.abs(frac - glob) < 0.05)


def test_small_concentration_lowers_label_entropy():
    skewed, iid = [], []
    for seed in range(20):
        ds = generate_synthetic(1000, 2, 5, seed=seed)
        for conc, bucket in ((0.1, skewed), (1e6, iid)):
            p = partition_non_iid(ds, 10, conc, seed)
            bucket.append(np.mean([label_entropy(ds.labels[s], 5) for s in p.shards]))
    assert np.mean(skewed) < np.mean(iid)


def test_uniform_logits_give_log_classes():
    net = build_network([3, 5], rank=2, seed=0)
    flat = net.with_adapters([LoraAdapter(np.zeros((5, 3)), np.zeros((5, 2)), a.a_mat) for a in net.adapters])
    loss, _ = forward_loss(flat, (np.ones((4, 3)), np.array([0, 1, 2, 3])))
    assert loss == pytest.approx(np.log(5), abs=1e-14)


def test_mse_perfect_prediction_is_zero():
    net = build_network([3, 3], rank=1, seed=0, loss_kind="mean_squared_error", activation="identity")
    eye = net.with_adapters([LoraAdapter(np.eye(3), np.zeros((3, 1)), np.ones((1, 3)))])
    loss, _ = forward_loss(eye, (np.eye(3), np.eye(3)))
    assert loss == 0.0


@pytest.mark.parametrize("loss_kind", ["softmax_cross_entropy", "mean_squared_error"])
def test_batched_loss_matches_per_sample(rng, loss_kind):
    net = build_network([4, 5, 3], rank=2, seed=7, loss_kind=loss_kind)
    net = net.with_adapters([a.with_factors(rng.normal(size=a.b_mat.shape), a.a_mat) for a in net.adapters])
    x = rng.normal(size=(4, 4))
    y = np.array([0, 2, 1, 2])
    loss, _ = forward_loss(net, (x, y))
    assert loss == pytest.approx(np.mean([per_sample_loss(net, xi, yi) for xi, yi in zip(x, y)]), abs=1e-10)


def test_backward_is_mean_of_per_sample(rng):
    net = build_network([4, 5, 3], rank=2, seed=3)
    net = net.with_adapters([a.with_factors(rng.normal(size=a.b_mat.shape), a.a_mat) for a in net.adapters])
    x = rng.normal(size=(3, 4))
    y = np.array([1, 0, 2])
    batch = backward_all(net, (x, y))
    singles = [backward_all(net, (x[i:i + 1], y[i:i + 1])) for i in range(3)]
    for layer, g in enumerate(batch):
        np.testing.assert_allclose(g.grad_a, np.mean([s[layer].grad_a for s in singles], axis=0), atol=1e-10)
        np.testing.assert_allclose(g.grad_b, np.mean([s[layer].grad_b for s in singles], axis=0), atol=1e-10)
    dup = backward_all(net, (np.repeat(x[:1], 5, axis=0), np.repeat(y[:1], 5)))
    np.testing.assert_allclose(dup[0].grad_a, singles[0][0].grad_a, atol=1e-14)


def test_rate_zero_masks_equal_unmasked(rng):
    net = build_network([4, 6, 3], rank=2, seed=1)
    x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, 5)
    masks = [sample_mask(0.0, (a.n1, a.n2), seed=i) for i, a in enumerate(net.adapters)]
    for a, b in zip(backward_all(net, (x, y)), backward_all(net, (x, y), masks)):
        np.testing.assert_array_equal(a.grad_a, b.grad_a)
        np.testing.assert_array_equal(a.grad_b, b.grad_b)
    with pytest.raises(ShapeError):
        backward_all(net, (x, y), masks[:1])


@pytest.mark.parametrize("activation", ["tanh", "relu", "identity"])
def test_network_gradients_match_finite_differences(rng, activation):
    net = build_network([5, 6, 4], rank=2, seed=11, activation=activation)
    net = net.with_adapters([a.with_factors(rng.uniform(-1, 1, a.b_mat.shape), a.a_mat) for a in net.adapters])
    x, y = rng.normal(size=(6, 5)), rng.integers(0, 4, 6)
    masks = [sample_mask(0.3, (a.n1, a.n2), seed=20 + i) for i, a in enumerate(net.adapters)]
    grads = backward_all(net, (x, y), masks)
    for layer, g in enumerate(grads):
        def loss_b(b, layer=layer):
            ads = list(net.adapters)
            ads[layer] = ads[layer].with_factors(b, ads[layer].a_mat)
            return forward_loss(net.with_adapters(ads), (x, y), masks)[0]

        def loss_a(a, layer=layer):
            ads = list(net.adapters)
            ads[layer] = ads[layer].with_factors(ads[layer].b_mat, a)
            return forward_loss(net.with_adapters(ads), (x, y), masks)[0]

        fd_b = central_difference(loss_b, net.adapters[layer].b_mat)
        fd_a = central_difference(loss_a, net.adapters[layer].a_mat)
        scale = max(1.0, np.abs(fd_a).max(), np.abs(fd_b).max())
        assert np.abs(fd_b - g.grad_b).max() / scale < 1e-4
        assert np.abs(fd_a - g.grad_a).max() / scale < 1e-4


def test_loss_and_accuracy_are_finite():
    ds = generate_synthetic(40, 3, 2, seed=0)
    net = build_network([3, 4, 2], rank=1, seed=0)
    loss, _ = forward_loss(net, (ds.features, ds.labels))
    assert np.isfinite(loss)
    assert 0.0 <= accuracy(net, ds) <= 1.0
    with pytest.raises(ShapeError):
        forward_loss(net, (np.ones((2, 5)), np.zeros(2)))
