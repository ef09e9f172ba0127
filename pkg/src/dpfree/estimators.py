"""Scikit-learn style estimators wrapping the private trainer.

AutoDPClassifier fits logistic regression for binary targets and a small
softmax network for multiclass ones; AutoDPRegressor fits squared-error
linear regression. Both release every gradient and loss through the
privatizing mechanisms and pick the learning rate automatically, so the
constructor surface is mostly privacy budget and schedule shape, not tuning
knobs. epsilon=None turns privacy off (no noise, exact accounting skipped),
which is useful for debugging pipelines.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .accounting import PrivacyBudget, default_delta, plan_report
from .models import Dataset, LinearRegressionModel, LogisticRegressionModel, MlpClassifier
from .training import TrainerConfig, train


def _build_config(est, n_train: int) -> TrainerConfig:
    budget = None
    if est.epsilon is not None:
        delta = est.delta if est.delta is not None else default_delta(n_train)
        budget = PrivacyBudget(epsilon=est.epsilon, delta=delta)
    return TrainerConfig(
        steps=est.steps,
        batch_size=min(est.batch_size, n_train),
        budget=budget,
        gamma=est.gamma,
        interval=est.interval,
        optimizer=est.optimizer,
        clip_mode=est.clip_mode,
        clip_threshold=est.clip_threshold,
        noise_kind=est.noise_kind,
        eta0=est.eta0,
        loss_clip0=est.loss_clip0,
        growth_cap=est.growth_cap,
        auto_lr=est.auto_lr,
        seed=est.seed,
    )


def _augment(X: np.ndarray, fit_intercept: bool) -> np.ndarray:
    if not fit_intercept:
        return X
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _full_train_dataset(X: np.ndarray, y: np.ndarray) -> Dataset:
    return Dataset(X=X, y=y, train_idx=np.arange(X.shape[0]),
                   test_idx=np.array([], dtype=int))


class AutoDPClassifier(ClassifierMixin, BaseEstimator):
    """Differentially private classifier with automatic learning rates."""

    def __init__(self, epsilon: float | None = 8.0, delta: float | None = None,
                 steps: int = 500, batch_size: int = 64, interval: int = 5,
                 gamma: float = 1.01, optimizer: str = "adamw",
                 clip_mode: str = "automatic", clip_threshold: float | None = None,
                 noise_kind: str = "gaussian", eta0: float = 1e-4,
                 loss_clip0: float = 1.0, growth_cap: float = 10.0,
                 auto_lr: bool = True, hidden_units: int = 16,
                 fit_intercept: bool = True, seed: int = 0):
        self.epsilon = epsilon
        self.delta = delta
        self.steps = steps
        self.batch_size = batch_size
        self.interval = interval
        self.gamma = gamma
        self.optimizer = optimizer
        self.clip_mode = clip_mode
        self.clip_threshold = clip_threshold
        self.noise_kind = noise_kind
        self.eta0 = eta0
        self.loss_clip0 = loss_clip0
        self.growth_cap = growth_cap
        self.auto_lr = auto_lr
        self.hidden_units = hidden_units
        self.fit_intercept = fit_intercept
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y).astype(np.float64)
        Xa = _augment(X, self.fit_intercept)
        if len(self.classes_) == 2:
            model = LogisticRegressionModel(Xa.shape[1])
        else:
            model = MlpClassifier(Xa.shape[1], hidden_units=self.hidden_units,
                                  n_classes=len(self.classes_))
        config = _build_config(self, X.shape[0])
        result = train(model, _full_train_dataset(Xa, codes), config)
        self.model_ = model
        self.result_ = result
        self.weights_ = result.params
        self.noise_plan_ = result.plan
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X)
        Xa = _augment(X, self.fit_intercept)
        if len(self.classes_) == 2:
            return Xa @ self.weights_
        _, logits = self.model_._forward(self.weights_, Xa)
        return logits

    def predict_proba(self, X):
        scores = self.decision_function(X)
        if scores.ndim == 1:
            p = expit(scores)
            return np.column_stack([1.0 - p, p])
        return np.exp(scores - logsumexp(scores, axis=1)[:, None])

    def predict(self, X):
        scores = self.decision_function(X)
        if scores.ndim == 1:
            return self.classes_[(scores > 0).astype(int)]
        return self.classes_[np.argmax(scores, axis=1)]

    def privacy_report(self) -> dict | None:
        """Noise plan and budget decomposition for the fitted run, if private."""
        check_is_fitted(self, "result_")
        result = self.result_
        if result.plan is None:
            return None
        delta = self.delta if self.delta is not None else default_delta(
            result.sampling.dataset_size)
        budget = PrivacyBudget(epsilon=self.epsilon, delta=delta)
        return plan_report(result.plan, budget, result.sampling)


class AutoDPRegressor(RegressorMixin, BaseEstimator):
    """Differentially private linear regression with automatic learning rates."""

    def __init__(self, epsilon: float | None = 8.0, delta: float | None = None,
                 steps: int = 500, batch_size: int = 64, interval: int = 5,
                 gamma: float = 1.01, optimizer: str = "adamw",
                 clip_mode: str = "automatic", clip_threshold: float | None = None,
                 noise_kind: str = "gaussian", eta0: float = 1e-4,
                 loss_clip0: float = 1.0, growth_cap: float = 10.0,
                 auto_lr: bool = True, fit_intercept: bool = True, seed: int = 0):
        self.epsilon = epsilon
        self.delta = delta
        self.steps = steps
        self.batch_size = batch_size
        self.interval = interval
        self.gamma = gamma
        self.optimizer = optimizer
        self.clip_mode = clip_mode
        self.clip_threshold = clip_threshold
        self.noise_kind = noise_kind
        self.eta0 = eta0
        self.loss_clip0 = loss_clip0
        self.growth_cap = growth_cap
        self.auto_lr = auto_lr
        self.fit_intercept = fit_intercept
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        y = y.astype(np.float64)
        Xa = _augment(X, self.fit_intercept)
        model = LinearRegressionModel(Xa.shape[1])
        config = _build_config(self, X.shape[0])
        result = train(model, _full_train_dataset(Xa, y), config)
        self.result_ = result
        self.weights_ = result.params
        self.noise_plan_ = result.plan
        if self.fit_intercept:
            self.coef_ = self.weights_[:-1]
            self.intercept_ = float(self.weights_[-1])
        else:
            self.coef_ = self.weights_
            self.intercept_ = 0.0
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X)
        return X @ self.coef_ + self.intercept_
