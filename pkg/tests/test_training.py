import numpy as np
import pytest

from rodl.ronet import RonetModel, SubNetParams, forward_sub, loss, orth_residual, predict
from rodl.reduction import rel_l2_rows
from rodl.training import (Diverged, TrainConfig, backprop, calibrate_gamma, fd_check, init_model, init_subnet,
                           train)

from planted import planted_pairs


def random_traj(rng, B, T, m, scale=1.0):
    return scale * rng.standard_normal((B, T + 1, m))


def test_linear_gradient_matches_least_squares(rng):
    m, B = 4, 7
    W1, b = rng.standard_normal((m, m)), rng.standard_normal(m)
    model = RonetModel([SubNetParams.linear(W1, b, np.eye(m))], [0.0])
    traj = random_traj(rng, B, 1, m)
    X, Y = traj[:, 0], traj[:, 1]
    R = X @ W1.T + b - Y
    _, g = backprop(model, traj)
    np.testing.assert_allclose(g[0][0], 2.0 / B * R.T @ X, atol=1e-12)
    np.testing.assert_allclose(g[0][1], 2.0 / B * R.sum(axis=0), atol=1e-12)


def test_zero_model_zero_bias_gradient():
    m = 3
    model = RonetModel([SubNetParams.linear(np.zeros((m, m)), np.zeros(m), np.zeros((m, m)))], [0.0])
    _, g = backprop(model, np.zeros((2, 2, m)))
    assert np.all(g[0][1] == 0)


@pytest.mark.parametrize("shape", [
    dict(m=4, T=1, depth=1, act="identity", eta=0.0),
    dict(m=5, T=2, depth=1, act="identity", eta=0.7),
    dict(m=4, T=1, depth=2, act="tanh", eta=1.0),
    dict(m=3, T=3, depth=3, act="tanh", eta=0.3, width=6),
    dict(m=4, T=2, depth=2, act="relu", eta=1.0, width=5),
])
def test_fd_on_random_models(shape):
    rng = np.random.default_rng(shape["m"] * 10 + shape["T"])
    layers = [init_subnet(shape["m"], rng, depth=shape["depth"], width=shape.get("width"),
                          activation_name=shape["act"], noise=0.5, w2="gaussian", gamma=0.05)
              for _ in range(shape["T"])]
    for p in layers:
        for v in p.b:
            v += 0.3 * rng.standard_normal(v.shape)
    model = RonetModel(layers, [shape["eta"]] * shape["T"])
    traj = random_traj(rng, 6, shape["T"], shape["m"])
    assert fd_check(model, traj) <= 1e-4


def test_fd_linear_smooth_case(rng):
    m = 4
    model = RonetModel([SubNetParams.linear(rng.standard_normal((m, m)), rng.standard_normal(m),
                                            rng.standard_normal((m, m)))], [0.0])
    assert fd_check(model, random_traj(rng, 5, 1, m)) <= 1e-6


def test_fd_dead_zone_is_exactly_flat(rng):
    m = 3
    model = RonetModel([SubNetParams.linear(0.01 * rng.standard_normal((m, m)), np.zeros(m),
                                            rng.standard_normal((m, m)), gamma=10.0)], [0.0])
    traj = random_traj(rng, 4, 1, m)
    _, g = backprop(model, traj)
    assert all(np.all(a == 0) for a in g[0])
    assert fd_check(model, traj) == 0.0


def test_fd_kink_margin_zero_sees_kink():
    # one code sits exactly on the threshold: the one-sided slopes disagree there
    m = 2
    p = SubNetParams.linear(np.eye(m), np.zeros(m), np.eye(m), gamma=0.5)
    model = RonetModel([p], [0.0])
    traj = np.array([[[0.5, 2.0], [1.0, -1.0]]])
    assert fd_check(model, traj, kink_margin=0.0) > 0.1
    with pytest.raises(ValueError):
        fd_check(model, traj)


def test_fd_detects_corrupted_gradient(rng):
    m = 3
    model = init_model(m, 1, 0, 1.0, noise=0.3)
    traj = random_traj(rng, 4, 1, m)

    def corrupt(grads):
        grads[0][0] = grads[0][0] * 1.5
        return grads
    assert fd_check(model, traj, grad_hook=corrupt) > 0.1


def test_fd_refuses_to_check_nothing():
    m = 2
    model = RonetModel([SubNetParams.linear(np.eye(m), np.zeros(m), np.eye(m), gamma=1.0)], [0.0])
    with pytest.raises(ValueError):
        fd_check(model, np.array([[[1.0, -1.0], [0.0, 0.0]]]), kink_margin=1.0)


def test_planted_m20_generalizes():
    traj, *_ = planted_pairs(m=20, seed=0)
    cfg = TrainConfig(lr=3e-3, epochs=300, batch_size=16, early_stop_patience=300)
    net, rep = train(init_model(20, 1, 0, 1.0), traj[:360], cfg)
    err = rel_l2_rows(predict(net, traj[360:, 0])[:, 0], traj[360:, 1])
    assert err.mean() <= 0.05
    assert sum(np.diff(rep.loss_curve[:10]) > 0) <= 2


def test_orthogonality_drift_from_gaussian_init():
    traj, *_ = planted_pairs(m=20, seed=0)
    m0 = init_model(20, 1, 0, 1.0, w2="gaussian")
    cfg = TrainConfig(lr=1e-2, epochs=300, batch_size=16, early_stop_patience=300)
    _, rep = train(m0, traj[:360], cfg)
    assert rep.orth_residuals[0] <= 0.1 * orth_residual(m0.layers[0].W2)


def test_zero_data_drives_bias_to_zero():
    m = 5
    model = init_model(m, 1, 3, 1.0)
    model.layers[0].b[0][:] = 0.3
    cfg = TrainConfig(lr=1e-2, epochs=200, batch_size=8, early_stop_patience=200)
    net, _ = train(model, np.zeros((16, 2, m)), cfg, calibrate=False)
    assert np.max(np.abs(net.layers[0].b[0])) < 1e-3
    rep = loss(net, np.zeros((16, 2, m)))
    assert rep.misfit[0] < 1e-6
    assert rep.total == pytest.approx(net.eta[0] * rep.penalty[0], abs=1e-6)


def test_training_is_deterministic():
    traj, *_ = planted_pairs(m=8, n=64, seed=2)
    cfg = TrainConfig(lr=1e-2, epochs=20, batch_size=16, seed=5)
    a = train(init_model(8, 1, 1), traj, cfg)[1]
    b = train(init_model(8, 1, 1), traj, cfg)[1]
    assert a.loss_curve == b.loss_curve


def test_best_epoch_parameters_returned():
    traj, *_ = planted_pairs(m=8, n=64, seed=2)
    cfg = TrainConfig(lr=1e-2, epochs=30, batch_size=16)
    net, rep = train(init_model(8, 1, 1), traj, cfg)
    assert loss(net, traj).total == pytest.approx(min(rep.loss_curve), rel=1e-12)


def test_divergence_is_reported(rng):
    cfg = TrainConfig(optimizer="sgd", lr=50.0, epochs=50, batch_size=4)
    with pytest.raises(Diverged):
        train(init_model(4, 1, 0, 1.0), random_traj(rng, 8, 1, 4), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")


def test_calibrated_gamma_is_scaled_median(rng):
    m = 6
    model = init_model(m, 2, 0)
    traj = random_traj(rng, 10, 2, m)
    calibrate_gamma(model, traj, 0.1)
    p0 = model.layers[0]
    z = traj[:, 0] @ p0.W1[0].T + p0.b[0]
    assert p0.gamma == pytest.approx(0.1 * np.median(np.abs(z)))
    o, _ = forward_sub(p0, traj[:, 0])
    p1 = model.layers[1]
    assert p1.gamma == pytest.approx(0.1 * np.median(np.abs(o @ p1.W1[0].T + p1.b[0])))
