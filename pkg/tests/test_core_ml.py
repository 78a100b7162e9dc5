from __future__ import annotations

import math

import numpy as np
import pytest

from adagq.core_ml import (
    Batch,
    ConfigurationError,
    Model,
    evaluate,
    forward_loss,
    gradient,
    init_model,
    lr_at_round,
    sgd_step,
    train_epoch,
)
from oracles import fd_max_rel_error


def _batch(rng, n=32, d=8, c=4):
    return Batch(rng.normal(size=(n, d)), rng.integers(0, c, size=n))


def reference_loss(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    """Independent forward pass written with plain loops over layers."""
    h = x
    sizes = model.layer_sizes
    off = 0
    for li, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = model.weights[off : off + a * b].reshape(a, b)
        off += a * b
        bias = model.weights[off : off + b]
        off += b
        h = h @ W + bias
        if li < len(sizes) - 2:
            h = np.where(h > 0, h, 0.0)
    total = 0.0
    for row, label in zip(h, y):
        m = max(row)
        z = sum(math.exp(v - m) for v in row)
        total += -(row[label] - m - math.log(z))
    return total / len(y)


def test_uniform_logits_loss_is_log_classes():
    m = Model("logistic_regression", 5, 10)
    b = _batch(np.random.default_rng(0), d=5, c=10)
    assert forward_loss(m, b) == pytest.approx(math.log(10), abs=1e-12)


def test_saturated_correct_logits_loss_vanishes():
    m = Model("logistic_regression", 1, 3)
    m.layers()[0][1][:] = [1000.0, 0.0, 0.0]
    assert forward_loss(m, Batch(np.zeros((1, 1)), np.array([0]))) < 1e-12


@pytest.mark.parametrize("kind", ["logistic_regression", "mlp"])
def test_forward_matches_reference_implementation(kind):
    rng = np.random.default_rng(42)
    m = init_model(kind, 8, 4, (16,), rng)
    b = _batch(rng)
    assert forward_loss(m, b) == pytest.approx(reference_loss(m, b.features, b.labels), rel=1e-12)


def test_zero_input_gradient_blocks():
    rng = np.random.default_rng(1)
    m = init_model("logistic_regression", 6, 3, rng=rng)
    y = np.array([0, 2, 2, 1])
    b = Batch(np.zeros((4, 6)), y)
    g = gradient(m, b)
    (gw, gb), = m.layers(g)
    assert np.all(gw == 0)
    bias = m.layers()[0][1]
    p = np.exp(bias - bias.max())
    p /= p.sum()
    expected = (p[None, :] - np.eye(3)[y]).mean(axis=0)
    np.testing.assert_allclose(gb, expected, atol=1e-15)


@pytest.mark.parametrize("kind", ["logistic_regression", "mlp"])
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    m = init_model(kind, 32, 10, (16,), rng)
    assert fd_max_rel_error(m, _batch(rng, d=32, c=10), rng) <= 1e-5


def test_gradient_vanishes_at_convex_optimum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(60, 3))
    y = rng.integers(0, 3, size=60)
    # overlapping labels keep the optimum finite
    b = Batch(x, y)
    m = Model("logistic_regression", 3, 3)
    for _ in range(20000):
        m = sgd_step(m, gradient(m, b), 1.0)
    assert np.linalg.norm(gradient(m, b)) <= 1e-6


def test_dimension_mismatch_raises():
    m = Model("logistic_regression", 4, 2)
    with pytest.raises(ConfigurationError):
        forward_loss(m, Batch(np.zeros((2, 3)), np.array([0, 1])))
    with pytest.raises(ConfigurationError):
        Model("mlp", 4, 2, ())


def test_sgd_step_arithmetic_and_linearity():
    m = Model("logistic_regression", 1, 1, weights=np.array([1.0, 1.0]))
    np.testing.assert_array_equal(sgd_step(m, np.array([2.0, -2.0]), 0.5).weights, [0.0, 2.0])
    np.testing.assert_array_equal(sgd_step(m, np.array([2.0, -2.0]), 0.0).weights, m.weights)
    g1, g2 = np.array([0.5, 0.25]), np.array([-1.0, 2.0])
    two = sgd_step(sgd_step(m, g1, 0.5), g2, 0.5)
    one = sgd_step(m, g1 + g2, 0.5)
    np.testing.assert_allclose(two.weights, one.weights, rtol=0, atol=1e-15)


def test_sgd_step_decreases_convex_loss():
    rng = np.random.default_rng(5)
    m = init_model("logistic_regression", 8, 4, rng=rng)
    b = _batch(rng)
    assert forward_loss(sgd_step(m, gradient(m, b), 1e-3), b) < forward_loss(m, b)


def test_lr_schedule():
    assert lr_at_round(0) == 0.01
    assert lr_at_round(1) == pytest.approx(0.00995, rel=1e-12)
    assert lr_at_round(100) == pytest.approx(0.006058, abs=5e-7)


def test_loss_permutation_invariant():
    rng = np.random.default_rng(9)
    m = init_model("mlp", 8, 4, (16,), rng)
    b = _batch(rng)
    perm = rng.permutation(32)
    assert forward_loss(m, b) == pytest.approx(forward_loss(m, Batch(b.features[perm], b.labels[perm])), rel=1e-13)


def test_evaluate():
    m = Model("logistic_regression", 1, 2)
    m.layers()[0][1][:] = [0.0, 5.0]
    assert evaluate(m, np.zeros((1, 1)), np.array([1]))[1] == 1.0
    with pytest.raises(ValueError):
        evaluate(m, np.zeros((0, 1)), np.zeros(0, dtype=int))

    rng = np.random.default_rng(11)
    n = 10000
    y = np.arange(n) % 10
    rand_model = init_model("logistic_regression", 8, 10, rng=rng)
    acc = evaluate(rand_model, rng.normal(size=(n, 8)) * 1e-9, rng.permutation(y))[1]
    sd = math.sqrt(0.1 * 0.9 / n)
    assert abs(acc - 0.1) <= 3 * sd

    x = rng.normal(size=(64, 8))
    yy = rng.integers(0, 10, size=64)
    full = [forward_loss(rand_model, Batch(x[i : i + 16], yy[i : i + 16])) for i in range(0, 64, 16)]
    assert evaluate(rand_model, x, yy)[0] == pytest.approx(np.mean(full), rel=1e-13)


def test_train_epoch_does_not_mutate_input():
    rng = np.random.default_rng(2)
    m = init_model("mlp", 8, 4, (16,), rng)
    before = m.weights.copy()
    b = _batch(rng, n=50)
    out = train_epoch(m, b.features, b.labels, 0.1, 16, np.random.default_rng(0))
    np.testing.assert_array_equal(m.weights, before)
    assert not np.array_equal(out.weights, before)
