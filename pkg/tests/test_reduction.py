import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rodl.nlmc import CoarseSystem
from rodl.reduction import (BadS, EmptyInputs, ZeroTruth, apply_reduced, dominance, dominance_from_codes,
                            eigen_subspace_compare, linear_operator, rel_l2, rel_l2_rows, scaled_s_grid,
                            sparsity_profile, truncate, truncation_error_curve)
from rodl.ronet import SubNetParams, forward_sub
from rodl.training import TrainConfig, init_model, init_subnet, random_orthogonal, train

from planted import planted_pairs


def test_rel_l2_examples():
    t = np.array([1.0, -2.0, 2.0])
    assert rel_l2(t, t) == 0.0
    assert rel_l2(np.zeros(3), t) == 1.0
    assert rel_l2(2 * t, t) == 1.0
    with pytest.raises(ZeroTruth):
        rel_l2(t, np.zeros(3))
    np.testing.assert_allclose(rel_l2_rows([[0, 0], [2, 0]], [[1, 0], [1, 0]]), [1.0, 1.0])


def test_dominance_examples():
    d = dominance_from_codes([[0.0, 3.0, 0.0, 4.0]])
    np.testing.assert_array_equal(d.S, [0, 3, 0, 4])
    assert d.order[:2].tolist() == [3, 1]
    tie = dominance_from_codes([[1.0, 0.0], [0.0, 1.0]])
    assert tie.S[0] == tie.S[1] and tie.order.tolist() == [0, 1]
    with pytest.raises(EmptyInputs):
        dominance_from_codes(np.zeros((0, 3)))


def exact_planted_net(Q, W_hat, b_hat, gamma):
    return SubNetParams.linear(Q.T @ W_hat, Q.T @ b_hat, Q, gamma)


def test_dominance_recovers_planted_support():
    support = [1, 4, 9, 13]
    traj, Q, W_hat, b_hat = planted_pairs(m=16, n=200, seed=3, support=support)
    p = exact_planted_net(Q, W_hat, b_hat, 1e-6)
    # b_hat puts a constant 0.05 on code 0, below every planted amplitude
    order = dominance(p, traj[:, 0])
    assert sorted(order.order[:4].tolist()) == support


def test_trained_network_recovers_support():
    support = [2, 5, 11, 17]
    traj, *_ = planted_pairs(m=20, n=400, seed=0, support=support, Q=np.eye(20))
    cfg = TrainConfig(lr=1e-2, epochs=300, batch_size=16, early_stop_patience=300)
    net, _ = train(init_model(20, 1, 0, 1.0, w2="identity"), traj[:360], cfg)
    order = dominance(net.layers[0], traj[:360, 0])
    assert sorted(order.order[:4].tolist()) == support


@pytest.fixture
def layer(rng):
    return init_subnet(6, rng, noise=0.4, gamma=0.1)


def test_truncate_full_is_bit_exact(layer, rng):
    X = rng.standard_normal((10, 6))
    order = dominance(layer, X)
    op = truncate(layer, order, 6)
    assert np.array_equal(apply_reduced(op, X), linear_operator(layer, X))


def test_truncate_rejects_bad_s(layer, rng):
    order = dominance(layer, rng.standard_normal((4, 6)))
    for s in (0, 7, 2.5):
        with pytest.raises(BadS):
            truncate(layer, order, s)


def test_single_mode_output_is_rank_one(layer, rng):
    X = rng.standard_normal((10, 6))
    order = dominance(layer, X)
    out = apply_reduced(truncate(layer, order, 1), X)
    col = layer.W2[:, order.order[0]]
    resid = out - np.outer(out @ col, col) / (col @ col)
    assert np.max(np.abs(resid)) < 1e-12


def test_apply_reduced_examples(layer, rng):
    order = dominance(layer, rng.standard_normal((4, 6)))
    op = truncate(layer, order, 3)
    np.testing.assert_allclose(apply_reduced(op, np.zeros(6)), op.W2s @ layer.b[0], atol=1e-15)
    x = rng.standard_normal(6)
    naive = np.zeros(6)
    for j in order.order[:3]:
        h = sum(layer.W1[0][j, k] * x[k] for k in range(6)) + layer.b[0][j]
        naive += h * layer.W2[:, j]
    np.testing.assert_allclose(apply_reduced(op, x), naive, atol=1e-12)


def test_endpoint_equals_network_error_without_threshold(rng):
    m = 8
    p = init_subnet(m, rng, noise=0.3, gamma=0.0)
    X = rng.standard_normal((12, m))
    Y = rng.standard_normal((12, m))
    curve = truncation_error_curve(p, dominance(p, X), X, Y, [1, 4, m])
    np.testing.assert_allclose(curve.errors[-1], curve.nn_errors, rtol=1e-12)
    assert np.max(curve.to_nn[-1]) < 1e-12


def test_planted_truncation_curve_is_nonincreasing():
    traj, Q, W_hat, b_hat = planted_pairs(m=30, s=6, n=300, seed=4, tail=0.05)
    p = exact_planted_net(Q, W_hat, b_hat, 1e-3)
    X, Y = traj[:, 0], traj[:, 1]
    curve = truncation_error_curve(p, dominance(p, X), X, Y, range(1, 31))
    assert curve.max_uptick() <= 0.01
    assert curve.mean[-1] < 0.01


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), s=st.integers(1, 6))
def test_truncation_triangle_relation(seed, s):
    rng = np.random.default_rng(seed)
    p = init_subnet(6, rng, noise=0.5, gamma=float(rng.uniform(0, 0.3)))
    X, Y = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
    curve = truncation_error_curve(p, dominance(p, X), X, Y, [s])
    nn, _ = forward_sub(p, X)
    scale = np.linalg.norm(nn, axis=1) / np.linalg.norm(Y, axis=1)
    assert np.all(curve.errors[0] <= curve.nn_errors + curve.to_nn[0] * scale + 1e-12)


def test_scaled_grid():
    assert scaled_s_grid(445) == [5, 10, 20, 40, 80, 160, 320, 445]
    assert scaled_s_grid(100) == [1, 2, 4, 9, 18, 36, 72, 100]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), m=st.integers(1, 12))
def test_sparsity_tail_properties(seed, m):
    rng = np.random.default_rng(seed)
    W2 = random_orthogonal(m, rng)
    prof = sparsity_profile(W2, rng.standard_normal((7, m)))
    assert np.all(np.diff(prof.tail) <= 1e-12)
    assert prof.eps(m) <= 1e-12
    assert np.all(np.diff(prof.quadratic_avg) <= 0)


def test_sparsity_tail_of_exactly_sparse_targets(rng):
    Q = random_orthogonal(10, rng)
    C = np.zeros((20, 10))
    C[:, [1, 3, 7]] = rng.standard_normal((20, 3))
    prof = sparsity_profile(Q, C @ Q.T)
    assert prof.eps(3) < 1e-12 and prof.eps(2) > 0


def _toy_system(rng, m=12):
    B = rng.standard_normal((m, m))
    M = B @ B.T / m + np.eye(m)
    C = rng.standard_normal((m, m))
    return CoarseSystem(M, C @ C.T, rng.standard_normal(m), 0.05)


def test_eigen_compare_exact_and_negative_control(rng):
    cs = _toy_system(rng)
    same = eigen_subspace_compare(cs, cs.W_hat, 4)
    assert same.full_distance() < 1e-10
    assert same.off_diagonal_true() <= 1e-8
    np.testing.assert_allclose(np.diag(same.T_true), same.lam, atol=1e-10)
    rand = eigen_subspace_compare(cs, init_subnet(12, rng), 4)
    assert rand.block_distance() > 0.5 * rand.block_norm()
    with pytest.raises(BadS):
        eigen_subspace_compare(cs, cs.W_hat, 0)


def test_eigen_compare_matches_on_subspace_only(rng):
    """A map equal to W_hat on the leading eigenvectors and different elsewhere."""
    cs = _toy_system(rng)
    lam, V = cs.eigen()
    r = 4
    Vinv = V.T @ cs.M
    D = np.diag(np.concatenate([lam[:r], rng.uniform(-1, 1, cs.m - r)]))
    W = V @ D @ Vinv
    cmp = eigen_subspace_compare(cs, W, r)
    assert cmp.block_distance() < 1e-10
    assert cmp.full_distance() > 0.1
