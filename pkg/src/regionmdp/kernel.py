"""Weighted Gaussian similarity kernel learned from behavior actions.

Similarity between two states is k(x, y) = exp(-||w .* (x - y)||^2) with a
learned non-negative weight per state dimension. The weights are trained by
random-feature acceleration: states are mapped through a random cosine
feature map z so that z(x)'z(y) approximates k(x, y), and a multinomial
logistic regression on z predicts the logged action. Minibatch gradient
descent jointly updates the regression coefficients V and the log-weights u
(w = exp(u), keeping w positive) against the cross-entropy of
softmax(z(x)'V).

Shapes: d state dims, D random features, A actions. omega is (D, d) with
entries drawn Normal(0, sqrt(2)) once per model (the spectral density of
exp(-||u||^2)), b is (D,) Uniform[0, 2pi), V is (D, A).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from regionmdp.errors import DataError, TrainingError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 20
    batch_size: int = 256
    rff_dim: int = 2048
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.rff_dim < 1:
            raise DataError("learning_rate, batch_size and rff_dim must be positive")
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-score transform; zero-variance features pass through."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std = np.where(std > 0.0, std, 1.0)
        return cls(mean, std)

    @classmethod
    def identity(cls, d: int) -> "Standardizer":
        return cls(np.zeros(d), np.ones(d))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


def kernel_exact(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """exp(-||w .* (x - y)||^2); 1 at zero weighted distance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape != y.shape or x.shape != w.shape:
        raise DataError("kernel_exact needs x, y, w of identical shape")
    diff = w * (x - y)
    return float(np.exp(-np.dot(diff, diff)))


class KernelModel:
    """Frozen random features plus learned (u, V) and the feature standardizer.

    All public methods take raw (unstandardized) states.
    """

    def __init__(
        self,
        u: np.ndarray,
        V: np.ndarray,
        omega: np.ndarray,
        b: np.ndarray,
        standardizer: Standardizer,
        seed: int,
    ) -> None:
        self.u = np.asarray(u, dtype=np.float64)
        self.V = np.asarray(V, dtype=np.float64)
        self.omega = np.asarray(omega, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.standardizer = standardizer
        self.seed = seed
        self.initial_loss: Optional[float] = None
        self.final_loss: Optional[float] = None
        self.epoch_losses: list[float] = []

    @classmethod
    def initialize(
        cls,
        d: int,
        n_actions: int,
        rff_dim: int,
        seed: int,
        standardizer: Optional[Standardizer] = None,
    ) -> "KernelModel":
        """u = 0 (so w = 1), V = all ones, fresh frozen (omega, b)."""
        rng = np.random.default_rng(seed)
        omega = rng.normal(0.0, math.sqrt(2.0), size=(rff_dim, d))
        b = rng.uniform(0.0, 2.0 * math.pi, size=rff_dim)
        return cls(
            u=np.zeros(d),
            V=np.ones((rff_dim, n_actions)),
            omega=omega,
            b=b,
            standardizer=standardizer or Standardizer.identity(d),
            seed=seed,
        )

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.u)

    @property
    def d(self) -> int:
        return self.omega.shape[1]

    @property
    def rff_dim(self) -> int:
        return self.omega.shape[0]

    @property
    def n_actions(self) -> int:
        return self.V.shape[1]

    def weighted_coords(self, X: np.ndarray) -> np.ndarray:
        """w .* standardize(x); Euclidean distance here inverts the kernel."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise DataError(f"expected {self.d} features, got {X.shape[1]}")
        return self.standardizer.apply(X) * self.w

    def project(self, X: np.ndarray) -> np.ndarray:
        """Random feature map: sqrt(2/D) cos(omega (w .* x) + b), rows per state."""
        S = self.weighted_coords(X)
        return _rff(S, self.omega, self.b)

    def predict_action_probs(self, X: np.ndarray) -> np.ndarray:
        """softmax(z(x)'V) per state; rows sum to 1."""
        return _softmax(self.project(X) @ self.V)

    def to_json_dict(self) -> dict:
        return {
            "d": self.d,
            "rff_dim": self.rff_dim,
            "n_actions": self.n_actions,
            "seed": self.seed,
            "u": self.u.tolist(),
            "V": self.V.tolist(),
            "omega": self.omega.tolist(),
            "b": self.b.tolist(),
            "standardizer_mean": self.standardizer.mean.tolist(),
            "standardizer_std": self.standardizer.std.tolist(),
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "KernelModel":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        model = cls(
            u=np.array(obj["u"]),
            V=np.array(obj["V"]),
            omega=np.array(obj["omega"]),
            b=np.array(obj["b"]),
            standardizer=Standardizer(
                np.array(obj["standardizer_mean"]), np.array(obj["standardizer_std"])
            ),
            seed=int(obj["seed"]),
        )
        model.initial_loss = obj.get("initial_loss")
        model.final_loss = obj.get("final_loss")
        return model


def _rff(S: np.ndarray, omega: np.ndarray, b: np.ndarray) -> np.ndarray:
    D = omega.shape[0]
    return math.sqrt(2.0 / D) * np.cos(S @ omega.T + b)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(
    u: np.ndarray,
    V: np.ndarray,
    X_std: np.ndarray,
    y: np.ndarray,
    omega: np.ndarray,
    b: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of softmax(z(x)'V) and its gradients in (u, V).

    X_std must already be standardized. Chain rule through the cosine map:
    with theta = omega (w .* x) + b and G = (P - Y) V',
    dL/dw_k = sum_i x_ik * [-sqrt(2/D) (G_i .* sin theta_i) omega]_k / B
    and dL/du = w .* dL/dw from the exp reparameterization.
    """
    B, d = X_std.shape
    D = omega.shape[0]
    # divergence shows up as a non-finite loss, reported by the caller;
    # silence the intermediate overflow noise on the way there
    with np.errstate(over="ignore", invalid="ignore"):
        w = np.exp(u)
        S = X_std * w
        theta = S @ omega.T + b
        Z = math.sqrt(2.0 / D) * np.cos(theta)
        P = _softmax(Z @ V)
        n = len(y)
        logp = np.log(np.clip(P[np.arange(n), y], 1e-300, None))
        loss = float(-logp.mean())

        R = P.copy()
        R[np.arange(n), y] -= 1.0
        R /= B
        grad_V = Z.T @ R
        G = R @ V.T  # (B, D)
        H = -math.sqrt(2.0 / D) * ((G * np.sin(theta)) @ omega)  # (B, d): dL/dS
        grad_w = (H * X_std).sum(axis=0)
        grad_u = grad_w * w
    return loss, grad_u, grad_V


def train_kernel(
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    standardizer: Optional[Standardizer] = None,
) -> KernelModel:
    """Joint minibatch gradient descent on (u, V).

    Features are z-scored with statistics from X unless a standardizer is
    supplied; the transform is stored on the returned model and applied to
    every later query. Epoch order is reshuffled by the seeded RNG; the
    result is bit-reproducible for identical inputs and config.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise DataError("kernel training needs >= 2 distinct actions")
    n, d = X.shape
    n_actions = int(y.max()) + 1
    standardizer = standardizer or Standardizer.fit(X)
    model = KernelModel.initialize(d, n_actions, cfg.rff_dim, cfg.seed, standardizer)
    X_std = standardizer.apply(X)

    model.initial_loss, _, _ = loss_and_grads(
        model.u, model.V, X_std, y, model.omega, model.b
    )
    rng = np.random.default_rng([cfg.seed, 1])
    batch = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = n // batch
        for j in range(n_batches):
            idx = order[j * batch : (j + 1) * batch]
            loss, grad_u, grad_V = loss_and_grads(
                model.u, model.V, X_std[idx], y[idx], model.omega, model.b
            )
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {j}; "
                    f"lower the learning rate (currently {cfg.learning_rate})"
                )
            model.V = model.V - cfg.learning_rate * grad_V
            model.u = model.u - cfg.learning_rate * grad_u
            epoch_loss += loss
        model.epoch_losses.append(epoch_loss / max(n_batches, 1))
    model.final_loss, _, _ = loss_and_grads(model.u, model.V, X_std, y, model.omega, model.b)
    return model
