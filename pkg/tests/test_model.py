from __future__ import annotations

import hashlib
import math

import numpy as np
import pytest

from pbench.model import (
    ModelParams,
    TrainConfig,
    TrainingError,
    gradient_check,
    init_params,
    load_checkpoint,
    loss_and_grads,
    predict,
    predict_many,
    predict_proba,
    save_checkpoint,
    train,
)
from pbench.manifest import FeatureGrid


def toy(n: int = 20, seed: int = 0):
    """Two linearly separable classes on a 2x2 grid: the sign of cell 0 minus cell 3."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, 2, 2)).astype(np.float32)
    labels = []
    for i in range(n):
        if i % 2:
            X[i, 0, 0], X[i, 1, 1] = 0.9, 0.1
            labels.append("A")
        else:
            X[i, 0, 0], X[i, 1, 1] = 0.1, 0.9
            labels.append("B")
    return X, labels


def test_zero_output_layer_gives_uniform_loss():
    rng = np.random.Generator(np.random.PCG64(0))
    p = init_params(4, 4, 8, ["a", "b", "c", "d", "e", "f"], rng)
    X = rng.random((10, 16)).astype(np.float32)
    loss, _ = loss_and_grads(p.arrays(), X, np.arange(10) % 6)
    assert loss == pytest.approx(math.log(6), abs=1e-6)


def test_separable_toy_reaches_full_train_accuracy():
    X, y = toy()
    params = train(X, y, TrainConfig(hidden=8, epochs=200, learning_rate=0.5, batch_size=4, seed=1))
    assert predict_many(params, X) == y


def test_training_is_bit_deterministic():
    X, y = toy()
    cfg = TrainConfig(hidden=8, epochs=5, learning_rate=0.1, batch_size=4, seed=3)
    a, b = train(X, y, cfg), train(X, y, cfg)
    assert save_checkpoint(a) == save_checkpoint(b)


def test_divergence_names_the_epoch():
    X, y = toy()
    with pytest.raises(TrainingError, match="epoch 1"):
        train(X * 1e3, y, TrainConfig(hidden=8, epochs=3, learning_rate=1e30, batch_size=4))


def test_training_input_errors():
    X, y = toy()
    with pytest.raises(TrainingError, match="empty"):
        train(X[:0], [], TrainConfig())
    with pytest.raises(TrainingError, match="two classes"):
        train(X[:3], ["A"] * 3, TrainConfig())


def test_probabilities_sum_to_one():
    rng = np.random.Generator(np.random.PCG64(5))
    p = init_params(4, 4, 16, list("abc"), rng)
    p.W2[:] = rng.normal(size=p.W2.shape)
    X = rng.random((100, 4, 4)).astype(np.float32)
    s = predict_proba(p, X).sum(axis=1)
    assert np.all(np.abs(s - 1) < 1e-6)


def test_zero_weights_predict_first_class():
    p = ModelParams(np.zeros((3, 4), np.float32), np.zeros(3, np.float32), np.zeros((2, 3), np.float32),
                    np.zeros(2, np.float32), ("first", "second"), 2, 2)
    label, prob = predict(p, FeatureGrid(np.full((2, 2), 0.3, np.float32)))
    assert label == "first"
    assert prob.tolist() == [0.5, 0.5]


def test_bias_bump_forces_argmax():
    rng = np.random.Generator(np.random.PCG64(9))
    p = init_params(4, 4, 16, list("abcd"), rng)
    p.W2[:] = rng.normal(scale=0.1, size=p.W2.shape)
    p.b2[2] += 10
    X = rng.random((50, 4, 4)).astype(np.float32)
    assert set(predict_many(p, X)) == {"c"}


def test_dimension_mismatch():
    rng = np.random.Generator(np.random.PCG64(0))
    p = init_params(4, 4, 4, list("ab"), rng)
    with pytest.raises(ValueError):
        predict(p, FeatureGrid(np.zeros((2, 2), np.float32)))


def test_gradient_check_passes_and_catches_corruption():
    X, y = toy(8)
    cfg = TrainConfig(hidden=5, seed=2)
    assert gradient_check(cfg, X, y) <= 1e-4

    def doubled_w2(arrays, X_, y_):
        loss, grads = loss_and_grads(arrays, X_, y_)
        grads[2] = grads[2] * 2
        return loss, grads

    assert gradient_check(cfg, X, y, grad_fn=doubled_w2) > 1e-1


def test_gradient_check_smallest_instance():
    X, _ = toy(2)
    assert gradient_check(TrainConfig(hidden=1, seed=4), X[:1], ["A"]) <= 1e-4


def test_checkpoint_round_trip_hash_is_stable():
    X, y = toy()
    params = train(X, y, TrainConfig(hidden=6, epochs=2, learning_rate=0.1, batch_size=4))
    data = save_checkpoint(params)
    assert data[:4] == b"PBM1"
    back = load_checkpoint(data)
    assert hashlib.sha256(save_checkpoint(back)).digest() == hashlib.sha256(data).digest()
    assert back.class_order == params.class_order
    assert back.train_meta["prng"] == "numpy.PCG64"


def test_checkpoint_rejects_damage():
    X, y = toy()
    data = save_checkpoint(train(X, y, TrainConfig(hidden=4, epochs=1, batch_size=4)))
    with pytest.raises(ValueError):
        load_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        load_checkpoint(data[:-3])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(class_weighting="balanced")
    assert TrainConfig.from_mapping({"hidden": "32", "seed": "4"}) == TrainConfig(hidden=32, seed=4)
