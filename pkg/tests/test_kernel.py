import math

import numpy as np
import pytest

from regionmdp.errors import DataError, TrainingError
from regionmdp.kernel import (
    KernelModel,
    Standardizer,
    TrainConfig,
    kernel_exact,
    loss_and_grads,
    train_kernel,
)


def test_kernel_exact_values():
    assert kernel_exact(np.array([3.0, -1.0]), np.array([3.0, -1.0]), np.array([2.0, 0.5])) == 1.0
    v = kernel_exact(np.array([1.0, 0.0]), np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    assert v == pytest.approx(math.exp(-1.0), abs=1e-12)
    # zero weight masks out the differing coordinate
    v = kernel_exact(np.array([1.0, 0.0]), np.array([0.0, 0.0]), np.array([0.0, 5.0]))
    assert v == 1.0


def test_kernel_exact_dimension_mismatch():
    with pytest.raises(DataError):
        kernel_exact(np.zeros(2), np.zeros(3), np.zeros(2))


def test_project_zero_frequencies():
    model = KernelModel.initialize(d=3, n_actions=2, rff_dim=8, seed=0)
    model.omega = np.zeros_like(model.omega)
    model.b = np.zeros_like(model.b)
    z = model.project(np.ones(3))
    np.testing.assert_allclose(z, math.sqrt(2.0 / 8.0))


def test_rff_self_similarity():
    model = KernelModel.initialize(d=10, n_actions=2, rff_dim=2048, seed=1)
    rng = np.random.default_rng(2)
    X = rng.normal(size=(50, 10))
    Z = model.project(X)
    norms = np.einsum("ij,ij->i", Z, Z)
    assert np.all(np.abs(norms - 1.0) <= 0.05)


def test_rff_matches_exact_kernel():
    model = KernelModel.initialize(d=10, n_actions=2, rff_dim=2048, seed=3)
    rng = np.random.default_rng(4)
    w = rng.uniform(0.5, 1.5, size=10)
    model.u = np.log(w)
    X = rng.normal(size=(1000, 10))
    Y = rng.normal(size=(1000, 10))
    Zx = model.project(X)
    Zy = model.project(Y)
    approx = np.einsum("ij,ij->i", Zx, Zy)
    exact = np.array([kernel_exact(x, y, w) for x, y in zip(X, Y)])
    assert float(np.mean(np.abs(approx - exact))) <= 0.05


def test_rff_unbiased_over_redraws():
    rng = np.random.default_rng(5)
    x = rng.normal(size=6)
    y = rng.normal(size=6)
    w = rng.uniform(0.5, 1.5, size=6)
    target = kernel_exact(x, y, w)
    estimates = []
    for seed in range(50):
        model = KernelModel.initialize(d=6, n_actions=2, rff_dim=64, seed=seed)
        model.u = np.log(w)
        estimates.append(float(model.project(x)[0] @ model.project(y)[0]))
    estimates = np.array(estimates)
    sigma = estimates.std(ddof=1) / math.sqrt(len(estimates))
    assert abs(estimates.mean() - target) <= 3.0 * sigma + 1e-12


def _toy_problem(rng, n=40, d=5, n_actions=3, D=16):
    X = rng.normal(size=(n, d))
    y = rng.integers(0, n_actions, size=n)
    model = KernelModel.initialize(d, n_actions, D, seed=11)
    u = rng.normal(scale=0.3, size=d)
    V = rng.normal(scale=0.5, size=(D, n_actions))
    return X, y, model, u, V


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    X, y, model, u, V = _toy_problem(rng, n=10)
    X = X[:10]
    y = y[:10]
    loss, grad_u, grad_V = loss_and_grads(u, V, X, y, model.omega, model.b)
    h = 1e-6

    fd_u = np.zeros_like(u)
    for k in range(len(u)):
        up, dn = u.copy(), u.copy()
        up[k] += h
        dn[k] -= h
        lp, _, _ = loss_and_grads(up, V, X, y, model.omega, model.b)
        ld, _, _ = loss_and_grads(dn, V, X, y, model.omega, model.b)
        fd_u[k] = (lp - ld) / (2 * h)
    rel_u = np.linalg.norm(grad_u - fd_u) / np.linalg.norm(fd_u)
    assert rel_u <= 1e-4

    fd_V = np.zeros_like(V)
    for i in range(V.shape[0]):
        for j in range(V.shape[1]):
            up, dn = V.copy(), V.copy()
            up[i, j] += h
            dn[i, j] -= h
            lp, _, _ = loss_and_grads(u, up, X, y, model.omega, model.b)
            ld, _, _ = loss_and_grads(u, dn, X, y, model.omega, model.b)
            fd_V[i, j] = (lp - ld) / (2 * h)
    rel_V = np.linalg.norm(grad_V - fd_V) / np.linalg.norm(fd_V)
    assert rel_V <= 1e-4


def test_zero_epochs_keeps_unit_weights():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(100, 3))
    y = (X[:, 0] > 0).astype(np.int64)
    model = train_kernel(X, y, TrainConfig(epochs=0, rff_dim=32, seed=0))
    np.testing.assert_array_equal(model.w, np.ones(3))
    np.testing.assert_array_equal(model.V, np.ones((32, 2)))


def test_weights_stay_positive_and_loss_decreases():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(600, 4))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(np.int64)
    model = train_kernel(
        X, y, TrainConfig(learning_rate=0.05, epochs=10, batch_size=128, rff_dim=128, seed=1)
    )
    assert np.all(model.w > 0)
    assert model.final_loss <= model.initial_loss


def test_signal_feature_gains_weight():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(3000, 2))
    y = (X[:, 0] > 0).astype(np.int64)  # feature 1 is pure noise
    model = train_kernel(
        X, y, TrainConfig(learning_rate=0.1, epochs=40, batch_size=256, rff_dim=128, seed=2)
    )
    assert model.w[0] / model.w[1] >= 3.0


def test_predict_probs_normalized_and_uniform_at_zero_V():
    model = KernelModel.initialize(d=4, n_actions=3, rff_dim=64, seed=10)
    rng = np.random.default_rng(11)
    X = rng.normal(size=(100, 4))
    model.V = np.zeros_like(model.V)
    P = model.predict_action_probs(X)
    np.testing.assert_allclose(P, 1.0 / 3.0)
    model.V = rng.normal(size=model.V.shape)
    P = model.predict_action_probs(X)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(P > 0)


def test_separable_accuracy():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(2000, 3))
    y = (X[:, 0] > 0).astype(np.int64)
    model = train_kernel(
        X, y, TrainConfig(learning_rate=0.1, epochs=10, batch_size=256, rff_dim=128, seed=3)
    )
    pred = np.argmax(model.predict_action_probs(X), axis=1)
    assert float(np.mean(pred == y)) >= 0.9


def test_training_deterministic():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(400, 3))
    y = (X[:, 1] > 0).astype(np.int64)
    cfg = TrainConfig(learning_rate=0.05, epochs=5, batch_size=64, rff_dim=64, seed=9)
    a = train_kernel(X, y, cfg)
    b = train_kernel(X, y, cfg)
    assert a.w.tobytes() == b.w.tobytes()
    assert a.V.tobytes() == b.V.tobytes()


def test_divergence_raises():
    rng = np.random.default_rng(14)
    X = rng.normal(size=(200, 3)) * 100.0
    y = (X[:, 0] > 0).astype(np.int64)
    with pytest.raises(TrainingError):
        train_kernel(
            X,
            y,
            TrainConfig(learning_rate=1e6, epochs=50, batch_size=64, rff_dim=32, seed=0),
            standardizer=Standardizer.identity(3),
        )


def test_save_load_bit_identical(tmp_path):
    rng = np.random.default_rng(15)
    X = rng.normal(size=(300, 3))
    y = (X[:, 0] > 0).astype(np.int64)
    model = train_kernel(X, y, TrainConfig(epochs=3, rff_dim=64, seed=4))
    path = tmp_path / "kernel.json"
    model.save(path)
    back = KernelModel.load(path)
    Q = rng.normal(size=(20, 3))
    np.testing.assert_array_equal(model.project(Q), back.project(Q))
    np.testing.assert_array_equal(
        model.predict_action_probs(Q), back.predict_action_probs(Q)
    )
