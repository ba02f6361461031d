import math

import numpy as np
import pytest

from fstmatch.nets import (Dense, DenseStack, TrainConfig, TrainingError, encoder, forward, grad_check,
                           grad_check_params, jitter_biases, load_model, load_networks, loss_and_grad,
                           save_model, save_networks, sigmoid, softmax_ce, train, truth_logit)


def linear(W, b=None):
    W = np.asarray(W, dtype=float)
    return DenseStack([Dense(W, np.zeros(W.shape[1]) if b is None else np.asarray(b, float))])


def test_forward_examples():
    x = np.array([0.3, -2.0, 5.0])
    np.testing.assert_array_equal(forward(linear(np.eye(3)), x), x)
    assert np.all(forward(encoder(3, 4), np.zeros(3)) == 0)
    np.testing.assert_array_equal(forward(linear([[1, 1], [1, -1]]), [2, 3]), [5, -1])
    with pytest.raises(ValueError):
        forward(linear(np.eye(3)), np.zeros(4))


def test_truth_logit():
    model = linear([[2, 5]])
    assert truth_logit(model, [1.0], 1) == 5.0
    assert truth_logit(encoder(6, 3), np.zeros(6), 2) == 0.0
    x = np.random.default_rng(0).normal(size=6)
    m = encoder(6, 3, seed=4)
    assert truth_logit(m, x, 1) == forward(m, x)[1]
    with pytest.raises(ValueError):
        truth_logit(model, [1.0], 2)


def test_softmax_ce_values():
    loss, grad = softmax_ce(np.zeros((3, 5)), np.array([0, 1, 4]))
    assert loss == pytest.approx(math.log(5))
    big = np.array([[50.0, 0.0]])
    assert softmax_ce(big, np.array([0]))[0] < 1e-20
    logits = np.array([[0.2, -1.0, 0.5], [1.0, 0.0, 0.0]])
    _, g = softmax_ce(logits, np.array([2, 0]))
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    np.testing.assert_allclose(g, (p - np.eye(3)[[2, 0]]) / 2, atol=1e-15)


def test_empty_batch():
    with pytest.raises(ValueError):
        loss_and_grad(encoder(3, 2), np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_grad_check_quadratic_is_exact():
    W = np.random.default_rng(0).normal(size=(4, 1))
    x = np.random.default_rng(1).normal(size=(8, 4))

    def loss():
        return float(((x @ W) ** 2).sum())

    grads = [2 * x.T @ (x @ W)]
    assert grad_check_params([W], loss, grads, fraction=1.0) < 1e-9


def test_sigmoid_derivative_at_zero():
    z = np.zeros(1)
    grads = [np.array([sigmoid(0.0) * (1 - sigmoid(0.0))])]
    assert grads[0][0] == 0.25
    assert grad_check_params([z], lambda: float(sigmoid(z[0])), grads, fraction=1.0) < 1e-9


def test_grad_check_default_encoder(small_world):
    batch = small_world.samples("train")[:32]
    X = np.stack([s.flat for s in batch])
    model = encoder(X.shape[1], 2, seed=1)
    assert grad_check(model, X, [s.label for s in batch]) < 1e-4
    ident = encoder(X.shape[1], small_world.config.n_identities, seed=2)
    jitter_biases([ident])
    masked = X * (np.random.default_rng(0).random(X.shape) < 0.5)
    assert grad_check(ident, masked, [s.source_id for s in batch], fraction=0.2) < 1e-4


def test_train_separable():
    gen = np.random.default_rng(0)
    X = np.concatenate([gen.normal(-2, 0.5, (40, 2)), gen.normal(2, 0.5, (40, 2))])
    y = np.repeat([0, 1], 40)
    model, hist = train(encoder(2, 2, hidden=8), X, y, TrainConfig(learning_rate=1e-2, epochs=200, batch_size=16))
    assert hist[-1]["acc"] == 1.0
    assert len(hist) == 200


def test_zero_learning_rate_and_determinism():
    gen = np.random.default_rng(1)
    X, y = gen.normal(size=(30, 3)), gen.integers(0, 2, 30)
    init = encoder(3, 2)
    frozen, _ = train(init, X, y, TrainConfig(learning_rate=0.0, epochs=3))
    assert all(np.array_equal(a, b) for a, b in zip(init.params, frozen.params))
    cfg = TrainConfig(epochs=4, seed=7)
    a, ha = train(init, X, y, cfg)
    b, hb = train(init, X, y, cfg)
    assert ha == hb and all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    for opt in ("sgd", "adam"):
        train(init, X, y, TrainConfig(epochs=1, optimizer=opt))


def test_divergence_names_epoch():
    X = np.array([[np.nan, 1.0]])
    with pytest.raises(TrainingError, match="epoch 0"):
        train(linear(np.eye(2)), X, [0], TrainConfig(epochs=2, batch_size=1))


def test_bad_config():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1).validate()
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs").validate()


@pytest.mark.parametrize("fmt", ["npz", "csv"])
def test_checkpoint_roundtrip(tmp_path, fmt):
    model = encoder(7, 3, hidden=5, seed=9)
    jitter_biases([model])
    back = load_model(save_model(model, tmp_path / "m", fmt))
    assert all(np.array_equal(a, b) for a, b in zip(model.params, back.params))
    assert [l.activation for l in back.layers] == ["relu", "identity"]


def test_multi_network_order_survives(tmp_path):
    nets = {"zeta": encoder(3, 2, seed=1), "alpha": encoder(3, 4, seed=2)}
    loaded, manifest = load_networks(save_networks(nets, tmp_path / "pair"))
    assert list(loaded) == ["zeta", "alpha"]
    assert loaded["alpha"].output_dim == 4
