"""Small differentiable models exposing per-sample losses and gradients.

The trainer only needs three things from a model: a parameter vector, a
batched per-sample forward/backward, and a forward-only loss pass for probe
evaluations. Everything here is plain numpy on float64; per-sample gradients
are materialized as a (B, d) array because the privatization step needs each
row's norm before any averaging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, targets, and a fixed train/test index split."""

    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(
                f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]}")
        if self.train_idx.size == 0:
            raise ValueError("training split is empty")

    @property
    def n_train(self) -> int:
        return int(self.train_idx.size)

    def train_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[self.train_idx], self.y[self.train_idx]

    def test_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[self.test_idx], self.y[self.test_idx]


class QuadraticBowl:
    """Deterministic bowl 0.5 * |w - center|^2, identical for every sample.

    Features and targets are ignored; the model exists to give optimizer and
    step-size logic an exactly known curvature (identity Hessian).
    """

    metric_name = "loss"

    def __init__(self, dim: int, center: np.ndarray | None = None):
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        self.dim = dim
        if center is None:
            center = np.zeros(dim)
        center = np.asarray(center, dtype=np.float64)
        if center.shape != (dim,):
            raise ValueError(f"center must have shape ({dim},), got {center.shape}")
        self.center = center

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        # start at unit distance from the minimizer, along the first axis
        w = self.center.copy()
        w[0] += 1.0
        return w

    def losses(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        diff = w - self.center
        value = 0.5 * float(diff @ diff)
        return np.full(X.shape[0], value)

    def per_sample(self, w: np.ndarray, X: np.ndarray,
                   y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        diff = w - self.center
        losses = np.full(X.shape[0], 0.5 * float(diff @ diff))
        grads = np.tile(diff, (X.shape[0], 1))
        return losses, grads

    def metric(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        diff = w - self.center
        return 0.5 * float(diff @ diff)


class LinearRegressionModel:
    """Squared-error regression: loss_i = 0.5 * (x_i . w - y_i)^2."""

    metric_name = "mse"

    def __init__(self, n_features: int):
        if n_features < 1:
            raise ValueError(f"n_features must be positive, got {n_features}")
        self.dim = n_features

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.dim)

    def losses(self, w, X, y):
        r = X @ w - y
        return 0.5 * r * r

    def per_sample(self, w, X, y):
        r = X @ w - y
        return 0.5 * r * r, r[:, None] * X

    def metric(self, w, X, y) -> float:
        r = X @ w - y
        return float(np.mean(r * r))


class LogisticRegressionModel:
    """Binary cross-entropy on labels in {0, 1}: loss_i = softplus(s) - y*s."""

    metric_name = "accuracy"

    def __init__(self, n_features: int):
        if n_features < 1:
            raise ValueError(f"n_features must be positive, got {n_features}")
        self.dim = n_features

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.dim)

    def losses(self, w, X, y):
        s = X @ w
        return np.logaddexp(0.0, s) - y * s

    def per_sample(self, w, X, y):
        s = X @ w
        losses = np.logaddexp(0.0, s) - y * s
        grads = (expit(s) - y)[:, None] * X
        return losses, grads

    def metric(self, w, X, y) -> float:
        s = X @ w
        return float(np.mean((s > 0) == (y > 0.5)))


class MlpClassifier:
    """One-hidden-layer tanh network with softmax cross-entropy.

    Parameters are flattened as [W1 (p*h), b1 (h), W2 (h*c), b2 (c)].
    """

    metric_name = "accuracy"

    def __init__(self, n_features: int, hidden_units: int = 16, n_classes: int = 3):
        if n_features < 1 or hidden_units < 1 or n_classes < 2:
            raise ValueError(
                f"bad architecture: features={n_features}, "
                f"hidden={hidden_units}, classes={n_classes}")
        self.n_features = n_features
        self.hidden_units = hidden_units
        self.n_classes = n_classes
        self.dim = (n_features * hidden_units + hidden_units
                    + hidden_units * n_classes + n_classes)

    def _unpack(self, w):
        p, h, c = self.n_features, self.hidden_units, self.n_classes
        i = 0
        W1 = w[i:i + p * h].reshape(p, h); i += p * h
        b1 = w[i:i + h]; i += h
        W2 = w[i:i + h * c].reshape(h, c); i += h * c
        b2 = w[i:i + c]
        return W1, b1, W2, b2

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        p, h, c = self.n_features, self.hidden_units, self.n_classes
        W1 = rng.standard_normal((p, h)) / np.sqrt(p)
        W2 = rng.standard_normal((h, c)) / np.sqrt(h)
        return np.concatenate([W1.ravel(), np.zeros(h), W2.ravel(), np.zeros(c)])

    def _forward(self, w, X):
        W1, b1, W2, b2 = self._unpack(w)
        hidden = np.tanh(X @ W1 + b1)
        logits = hidden @ W2 + b2
        return hidden, logits

    def losses(self, w, X, y):
        _, logits = self._forward(w, X)
        labels = y.astype(int)
        return logsumexp(logits, axis=1) - logits[np.arange(X.shape[0]), labels]

    def per_sample(self, w, X, y):
        W1, b1, W2, b2 = self._unpack(w)
        B = X.shape[0]
        hidden = np.tanh(X @ W1 + b1)
        logits = hidden @ W2 + b2
        labels = y.astype(int)
        lse = logsumexp(logits, axis=1)
        losses = lse - logits[np.arange(B), labels]
        probs = np.exp(logits - lse[:, None])
        dlogits = probs
        dlogits[np.arange(B), labels] -= 1.0
        gW2 = hidden[:, :, None] * dlogits[:, None, :]
        gb2 = dlogits
        dhidden = dlogits @ W2.T
        dpre = (1.0 - hidden * hidden) * dhidden
        gW1 = X[:, :, None] * dpre[:, None, :]
        gb1 = dpre
        grads = np.concatenate(
            [gW1.reshape(B, -1), gb1, gW2.reshape(B, -1), gb2], axis=1)
        return losses, grads

    def metric(self, w, X, y) -> float:
        _, logits = self._forward(w, X)
        return float(np.mean(np.argmax(logits, axis=1) == y.astype(int)))


def build_model(kind: str, n_features: int, *, hidden_units: int = 16,
                n_classes: int = 3, center: np.ndarray | None = None):
    if kind == "bowl":
        return QuadraticBowl(n_features, center=center)
    if kind == "linear":
        return LinearRegressionModel(n_features)
    if kind == "logistic":
        return LogisticRegressionModel(n_features)
    if kind == "mlp":
        return MlpClassifier(n_features, hidden_units=hidden_units,
                             n_classes=n_classes)
    raise ValueError(f"unknown model kind {kind!r}")


def split_indices(n: int, test_fraction: float,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= test_fraction < 1:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    perm = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    if n - n_test < 1:
        raise ValueError("split leaves no training rows")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def make_synthetic(kind: str, n_samples: int, n_features: int, seed: int, *,
                   noise_std: float = 0.1, flip_rate: float = 0.05,
                   margin: float = 0.1, feature_scale: float = 1.0,
                   n_classes: int = 3, test_fraction: float = 0.2) -> Dataset:
    """Generate a dataset with a planted rule the matching model can recover.

    linear:   y = X w* + noise_std * eps, |w*| = 1
    logistic: y = [X w* > 0], rows within margin * feature_scale of the
              boundary are redrawn, then a flip_rate fraction of labels flip
    mlp:      y = argmax(X W*), top-two score gap must clear the margin,
              then labels flip at flip_rate
    bowl:     placeholder features, everything is in the model itself
    """
    if n_samples < 2:
        raise ValueError(f"n_samples must be at least 2, got {n_samples}")
    rng = np.random.default_rng(seed)

    if kind == "bowl":
        X = np.zeros((n_samples, n_features))
        y = np.zeros(n_samples)
    elif kind == "linear":
        X = feature_scale * rng.standard_normal((n_samples, n_features))
        w_star = rng.standard_normal(n_features)
        w_star /= np.linalg.norm(w_star)
        y = X @ w_star + noise_std * rng.standard_normal(n_samples)
    elif kind == "logistic":
        w_star = rng.standard_normal(n_features)
        w_star /= np.linalg.norm(w_star)
        X = feature_scale * rng.standard_normal((n_samples, n_features))
        gap = margin * feature_scale
        s = X @ w_star
        for _ in range(1000):
            bad = np.abs(s) < gap
            if not np.any(bad):
                break
            X[bad] = feature_scale * rng.standard_normal((int(bad.sum()), n_features))
            s = X @ w_star
        else:
            raise RuntimeError("margin resampling did not converge")
        y = (s > 0).astype(np.float64)
        flips = rng.random(n_samples) < flip_rate
        y[flips] = 1.0 - y[flips]
    elif kind == "mlp":
        W_star = rng.standard_normal((n_features, n_classes))
        W_star /= np.linalg.norm(W_star, axis=0)
        X = feature_scale * rng.standard_normal((n_samples, n_features))
        gap = margin * feature_scale
        scores = X @ W_star
        for _ in range(1000):
            part = np.partition(scores, -2, axis=1)
            bad = (part[:, -1] - part[:, -2]) < gap
            if not np.any(bad):
                break
            X[bad] = feature_scale * rng.standard_normal((int(bad.sum()), n_features))
            scores = X @ W_star
        else:
            raise RuntimeError("margin resampling did not converge")
        y = np.argmax(scores, axis=1).astype(np.float64)
        flips = rng.random(n_samples) < flip_rate
        if np.any(flips):
            shift = rng.integers(1, n_classes, size=int(flips.sum()))
            y[flips] = (y[flips] + shift) % n_classes
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    train_idx, test_idx = split_indices(n_samples, test_fraction, rng)
    return Dataset(X=X, y=y, train_idx=train_idx, test_idx=test_idx)


def load_csv(path: str, seed: int, test_fraction: float = 0.2) -> Dataset:
    """Load features-then-target rows from a headed CSV and split."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64,
                      ndmin=2)
    if data.shape[1] < 2:
        raise ValueError("need at least one feature column and one target column")
    X, y = data[:, :-1], data[:, -1]
    rng = np.random.default_rng(seed)
    train_idx, test_idx = split_indices(X.shape[0], test_fraction, rng)
    return Dataset(X=X, y=y, train_idx=train_idx, test_idx=test_idx)
