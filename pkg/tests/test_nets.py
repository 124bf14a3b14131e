"""Gradient, optimizer and persistence checks for the network machinery."""

import numpy as np
import pytest

from uavckm.nets import (Adam, BatchNorm, Dense, Relu, ResidualBlock,
                         Sequential, Tanh, mlp, mse_loss, numeric_param_grad,
                         residual_regressor)

RNG = np.random.default_rng(99)


def check_gradients(net: Sequential, n_in: int, batch: int = 8,
                    max_checks: int = 100, train: bool = True):
    """Analytic grads vs central finite differences on sampled entries."""
    rng = np.random.default_rng(5)
    x = rng.normal(size=(batch, n_in))
    out_dim = net.forward(x, train=train).shape[1]
    y = rng.normal(size=(batch, out_dim))

    def loss_fn():
        return mse_loss(net.forward(x, train=train), y)[0]

    net.zero_grads()
    pred = net.forward(x, train=train)
    _loss, g = mse_loss(pred, y)
    net.backward(g)

    entries = [(name, p, grad, idx)
               for name, p, grad in net.trainables()
               for idx in np.ndindex(p.shape)]
    if len(entries) > max_checks:
        pick = rng.choice(len(entries), size=max_checks, replace=False)
        entries = [entries[i] for i in pick]
    for name, p, grad, idx in entries:
        fd = numeric_param_grad(net, loss_fn, p, idx)
        analytic = grad[idx]
        rel = abs(analytic - fd) / max(1.0, abs(analytic) + abs(fd))
        assert rel <= 1e-4, f"{name}{idx}: analytic={analytic:.3e} fd={fd:.3e}"


def test_dense_gradients():
    check_gradients(Sequential([Dense(5, 3, RNG)]), 5)


def test_relu_path_gradients():
    check_gradients(Sequential([Dense(5, 8, RNG), Relu(), Dense(8, 2, RNG)]), 5)


def test_tanh_path_gradients():
    check_gradients(Sequential([Dense(5, 8, RNG), Tanh(), Dense(8, 2, RNG)]), 5)


def test_batchnorm_train_gradients():
    check_gradients(Sequential([Dense(4, 6, RNG), BatchNorm(6), Dense(6, 2, RNG)]), 4)


def test_batchnorm_eval_gradients():
    net = Sequential([Dense(4, 6, RNG), BatchNorm(6), Dense(6, 2, RNG)])
    # populate running stats first
    net.forward(np.random.default_rng(0).normal(size=(32, 4)), train=True)
    check_gradients(net, 4, train=False)


def test_residual_block_gradients():
    check_gradients(Sequential([ResidualBlock(6, RNG)]), 6)


def test_full_regressor_gradients():
    check_gradients(residual_regressor(7, 12, 2, RNG), 7)


def test_batchnorm_needs_batch_in_train():
    bn = BatchNorm(3)
    with pytest.raises(ValueError):
        bn.forward(np.ones((1, 3)), train=True)


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm(2, momentum=1.0)  # running stats = last batch stats
    rng = np.random.default_rng(3)
    x = rng.normal(loc=5.0, scale=2.0, size=(64, 2))
    bn.forward(x, train=True)
    y = bn.forward(x, train=False)
    assert np.allclose(y.mean(axis=0), 0.0, atol=1e-6)
    assert np.allclose(y.std(axis=0), 1.0, atol=1e-2)


def test_mse_loss_value_and_grad():
    pred = np.array([1.0, 2.0, 3.0])
    target = np.array([0.0, 2.0, 5.0])
    loss, g = mse_loss(pred, target)
    assert loss == pytest.approx((1 + 0 + 4) / 3)
    assert np.allclose(g, 2.0 * (pred - target) / 3)


def test_adam_matches_reference_formula():
    p = np.array([1.0])
    opt = Adam([p], lr=0.1)
    grads = [np.array([0.5]), np.array([-0.25]), np.array([1.0])]
    # hand-rolled reference
    ref_p, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g[0]
        v = 0.999 * v + 0.001 * g[0] ** 2
        ref_p -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        opt.step([g])
    assert p[0] == pytest.approx(ref_p, rel=1e-12)


def test_state_dict_round_trip():
    net = residual_regressor(5, 8, 2, np.random.default_rng(1))
    net.forward(np.random.default_rng(2).normal(size=(16, 5)), train=True)
    state = {k: v.copy() for k, v in net.state_dict().items()}
    other = residual_regressor(5, 8, 2, np.random.default_rng(9))
    other.load_state_dict(state)
    x = np.random.default_rng(3).normal(size=(4, 5))
    assert np.array_equal(net.forward(x, train=False), other.forward(x, train=False))


def test_state_dict_rejects_mismatch():
    net = residual_regressor(5, 8, 2, np.random.default_rng(1))
    other = residual_regressor(5, 8, 3, np.random.default_rng(1))
    with pytest.raises(ValueError):
        net.load_state_dict(other.state_dict())


def test_init_deterministic():
    a = mlp([4, 8, 2], np.random.default_rng(7))
    b = mlp([4, 8, 2], np.random.default_rng(7))
    for (_, pa, _g1), (_, pb, _g2) in zip(a.trainables(), b.trainables()):
        assert np.array_equal(pa, pb)
