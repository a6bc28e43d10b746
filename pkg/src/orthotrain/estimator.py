"""scikit-learn wrappers around OPT training and energy refinement."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .data import Dataset
from .energy import NORM_MIN, refine_mhe
from .ortho import OrthoSpec
from .train import ModelSpec, OptimizerConfig, TrainConfig, predict_logits, train_run


class OPTClassifier(ClassifierMixin, BaseEstimator):
    """ReLU MLP whose hidden layers are trained as ``W = R V`` with frozen ``V``.

    ``method=None`` trains an ordinary MLP with the same settings.
    """

    def __init__(self, hidden=(256, 256), method="gs", lr=0.01, momentum=0.9, batch=100, epochs=20,
                 weight_decay=5e-4, init="he", seed=0):
        self.hidden = hidden
        self.method = method
        self.lr = lr
        self.momentum = momentum
        self.batch = batch
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.init = init
        self.seed = seed

    def _config(self, n_features, n_classes):
        ortho = None if self.method is None else OrthoSpec(method=self.method)
        model = ModelSpec(dims=(n_features, *self.hidden, n_classes), ortho=ortho, init=self.init)
        return TrainConfig(model=model, optimizer=OptimizerConfig(lr=self.lr, momentum=self.momentum),
                           batch=self.batch, epochs=self.epochs, weight_decay=self.weight_decay,
                           seed=self.seed, eval_every=10**9)

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError(f"need at least two classes; got 1 class ({self.classes_[0]!r})")
        data = Dataset(X, codes, X, codes, name="fit", num_classes=len(self.classes_))
        result = train_run(self._config(X.shape[1], len(self.classes_)), dataset=data)
        if result.diverged:
            raise ArithmeticError(result.message)
        self.model_ = result.model
        self.records_ = result.records
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return predict_logits(self.model_, X)

    def decision_function(self, X):
        z = self._logits(X)
        return z[:, 1] - z[:, 0] if z.shape[1] == 2 else z

    def predict_proba(self, X):
        z = self._logits(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self._logits(X)
        return self.classes_[np.argmax(z, axis=1)]


class MHERefiner(TransformerMixin, BaseEstimator):
    """Lowers the hyperspherical energy of the rows of ``X`` (rows are neurons).

    The rows are refined jointly, so the output for one row depends on the
    others. Zero rows have no direction and pass through unchanged.
    """

    def __init__(self, steps=50, lr=0.1, s=1.0, half_space=False):
        self.steps = steps
        self.lr = lr
        self.s = s
        self.half_space = half_space

    def fit(self, X, y=None):
        validate_data(self, X, dtype=np.float64)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        out = X.copy()
        live = np.sqrt(np.sum(X * X, axis=1)) >= NORM_MIN
        if np.count_nonzero(live) >= 2:
            out[live] = refine_mhe(X[live], self.steps, self.lr, self.s, self.half_space)
        return out
