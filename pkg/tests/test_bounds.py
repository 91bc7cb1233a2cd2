import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedlodrop.bounds import (
    BoundConstants,
    TrainingTrace,
    bound_sweep,
    convergence_bound,
    drop_probability,
    estimate_constants,
    generalization_gap,
    gradient_error_bound,
    loss_descent_bound,
    phs_bound_device,
    phs_bound_server,
    regularized_loss,
)
from fedlodrop.lora_core import DomainError

rates = st.floats(0.0, 0.99)


def consts(**kw):
    base = dict(hessian_min_per_device=(0.5,), shard_sizes=(4,))
    base.update(kw)
    return BoundConstants(**base)


def test_phs_device_examples():
    c = consts()
    assert phs_bound_device(c, 0, 0.5) == pytest.approx(0.25, abs=1e-15)
    assert phs_bound_device(c, 0, 0.0) == pytest.approx(2 / (0.5 * 4))
    assert phs_bound_device(c, 0, 0.5) < phs_bound_device(c, 0, 0.2)
    assert phs_bound_device(consts(hessian_min_per_device=(0.0,)), 0, 0.0) == math.inf
    with pytest.raises(DomainError):
        phs_bound_device(c, 0, 1.0)


def test_phs_server_examples(rng):
    c = consts()
    assert phs_bound_server(c, [0.3]) == pytest.approx(phs_bound_device(c, 0, 0.3), rel=1e-15)
    two = consts(hessian_min_per_device=(0.5, 0.5), shard_sizes=(4, 4))
    single = 2 / ((0.5 + 2 * drop_probability(0.3)) * 8)
    assert phs_bound_server(two, [0.3, 0.3]) == pytest.approx(2 * single, rel=1e-15)
    for _ in range(20):
        K = int(rng.integers(1, 6))
        lam = rng.uniform(0.1, 2, K)
        sizes = rng.integers(1, 50, K)
        c = BoundConstants(lipschitz_eta=rng.uniform(0.5, 3), reg_lambda=rng.uniform(0.1, 2),
                           hessian_min_per_device=tuple(lam), shard_sizes=tuple(sizes))
        g = rng.uniform(0, 0.9, K)
        oracle = 0.0
        for k in range(K):
            oracle += 2 * c.lipschitz_eta**2 / ((lam[k] + 2 * c.reg_lambda * (2 * g[k] - g[k] ** 2)) * sizes.sum())
        assert phs_bound_server(c, g) == pytest.approx(oracle, rel=1e-12)


def test_generalization_gap_worked_example():
    c = BoundConstants(loss_range_C=1.0, lipschitz_eta=1.0, hessian_min_per_device=(0.0,), reg_lambda=0.5,
                       shard_sizes=(100,), confidence_delta=0.5)
    assert generalization_gap(c, [0.5]) == pytest.approx(math.sqrt(0.33), abs=1e-12)
    with pytest.raises(DomainError):
        generalization_gap(c, [0.0])


def test_generalization_gap_scales_with_dataset():
    c = consts(shard_sizes=(50,))
    d = consts(shard_sizes=(100,))
    assert generalization_gap(d, [0.3]) == pytest.approx(generalization_gap(c, [0.3]) / math.sqrt(2), rel=1e-12)


@given(rates, rates, st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_stability_bounds_decrease_in_rate(g1, g2, lam, hess):
    lo, hi = sorted((g1, g2))
    c = consts(reg_lambda=lam, hessian_min_per_device=(hess,))
    if hi - lo > 1e-6:
        assert phs_bound_device(c, 0, hi) < phs_bound_device(c, 0, lo)
        assert generalization_gap(c, [hi]) < generalization_gap(c, [lo])
    if lo > 1e-6:
        assert phs_bound_device(consts(reg_lambda=lam * 2, hessian_min_per_device=(hess,)), 0, lo) < \
            phs_bound_device(c, 0, lo)


def test_gradient_error_examples():
    c = BoundConstants(n1=4, n2=4, n_adapted=1)
    assert gradient_error_bound(c, [0.25]) == pytest.approx(4.0)
    assert gradient_error_bound(c, [0.0]) == 0.0
    c3 = BoundConstants(n1=4, n2=4, n_adapted=3)
    assert gradient_error_bound(c3, [0.25], per_layer=True) == pytest.approx(4.0)
    assert gradient_error_bound(c3, [0.25]) == pytest.approx(12.0)


@given(st.lists(rates, min_size=1, max_size=5), st.floats(0.1, 3), st.floats(0.1, 3))
def test_gradient_error_matches_summation(gs, h, g):
    K = len(gs)
    sizes = tuple(range(1, K + 1))
    c = BoundConstants(grad_bound_H=h, weight_bound_G=g, n1=3, n2=5, n_adapted=2,
                       hessian_min_per_device=(0.0,) * K, shard_sizes=sizes)
    oracle = sum(2 * 8 * 2 * h**2 * g**4 * (sizes[k] / sum(sizes)) * gs[k] for k in range(K))
    assert gradient_error_bound(c, gs) == pytest.approx(oracle, rel=1e-12, abs=1e-300)


def test_loss_descent_examples():
    # coefficient U'(n1+n2)H^2 G^4 = 2 with these choices; gamma 0.5 makes the dropout term 1
    c = BoundConstants(pl_mu=1.0, optimality_gap_rho=2.0, lipschitz_eta=2.0, n1=1, n2=1, n_adapted=1)
    assert loss_descent_bound(c, [0.5]) == pytest.approx(-0.5)
    assert loss_descent_bound(c, [0.0]) == pytest.approx(-1.0)
    c0 = BoundConstants(pl_mu=0.0, lipschitz_eta=2.0)
    assert loss_descent_bound(c0, [0.3]) == pytest.approx(gradient_error_bound(c0, [0.3]) / (2 * 2.0))


def test_convergence_examples():
    # dropout term 2 (n1+n2) H^2 G^4 gamma with n1 = n2 = 1 is 4 gamma; gamma = 0.125 gives 0.5
    c = BoundConstants(lipschitz_eta=1.0)
    sched = np.full((4, 1), 0.125)
    assert convergence_bound(c, sched, T=4, loss_init_gap=2.0) == pytest.approx(1.5)
    assert convergence_bound(c, np.zeros((4, 1)), loss_init_gap=2.0) == pytest.approx(1.0)
    long = convergence_bound(c, np.full((400, 1), 0.125), loss_init_gap=2.0)
    assert long - 2.0 * 2.0 / 400 == pytest.approx(0.5)
    with pytest.raises(DomainError):
        convergence_bound(c, sched, T=3)


def test_regularized_loss(rng):
    assert regularized_loss(1.25, np.ones(4), gamma=0.0) == 1.25
    assert regularized_loss(1.0, np.array([2.0, 0.0]), reg_lambda=1.0, gamma=0.5) == pytest.approx(4.0)
    delta = rng.normal(size=50)
    d = rng.random((100_000, 50)) < drop_probability(0.3)
    mc = np.mean(np.sum((d * delta) ** 2, axis=1))
    assert mc == pytest.approx(drop_probability(0.3) * np.sum(delta**2), rel=0.01)
    with pytest.raises(DomainError):
        regularized_loss(0.0, np.ones(2), theta0=np.ones(3))


def test_estimate_constants_constant_and_two_point():
    trace = TrainingTrace()
    for _ in range(3):
        trace.append([np.array([3.0, 4.0])], [np.array([0.0, 2.0])])
    c = estimate_constants(trace)
    assert c.weight_bound_G == 5.0 and c.grad_bound_H == 2.0
    two = TrainingTrace()
    two.append([np.array([0.0])], [np.array([1.0])])
    two.append([np.array([2.0])], [np.array([4.0])])
    assert estimate_constants(two).lipschitz_eta == pytest.approx(1.5)
    with pytest.raises(DomainError):
        estimate_constants(TrainingTrace())


def test_estimate_eta_on_quadratic(rng):
    q = rng.normal(size=(6, 6))
    hess = q @ q.T + np.eye(6)
    lam_max = np.linalg.eigvalsh(hess).max()
    w = rng.normal(size=6)
    trace = TrainingTrace()
    for _ in range(20):
        trace.append([w], [hess @ w])
        w = w - 0.5 / lam_max * hess @ w
    assert estimate_constants(trace).lipschitz_eta <= 1.05 * lam_max


def test_constants_validation():
    with pytest.raises(DomainError):
        BoundConstants(lipschitz_eta=0.0)
    with pytest.raises(DomainError):
        BoundConstants(confidence_delta=1.0)
    with pytest.raises(DomainError):
        BoundConstants(hessian_min_per_device=(1.0, 1.0))
    with pytest.raises(DomainError):
        gradient_error_bound(BoundConstants(), [0.1, 0.2])


def test_bound_sweep_rows():
    c = consts()
    rows = bound_sweep(c, [0.0, 0.25, 0.5])
    assert [r["gamma"] for r in rows] == [0.0, 0.25, 0.5]
    assert rows[2]["phs_server"] == pytest.approx(phs_bound_server(c, [0.5]))
    assert rows[0]["gradient_error"] == 0.0
