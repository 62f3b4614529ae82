"""scikit-learn wrapper around the training loop."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .trainer import TrainConfig, train


class QATClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained with quantized hidden convolutions.

    ``X`` is float32 NCHW (or NHW for single-channel images). Labels may be
    any hashable values; they are encoded internally.
    """

    def __init__(self, model="cnn4", scheme="signed-binary", p=0.5, delta_coeff=0.05,
                 ede=True, epochs=30, batch_size=64, lr=0.01, width=16,
                 nonlinearity="prelu", seed=0):
        self.model = model
        self.scheme = scheme
        self.p = p
        self.delta_coeff = delta_coeff
        self.ede = ede
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.width = width
        self.nonlinearity = nonlinearity
        self.seed = seed

    @staticmethod
    def _images(X):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4:
            raise ValueError(f"expected NCHW images, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("images contain NaN or Inf")
        return np.ascontiguousarray(X)

    def fit(self, X, y, validation_data=None):
        X = self._images(X)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        self.classes_ = unique_labels(y)
        yi = np.searchsorted(self.classes_, y).astype(np.int64)
        if validation_data is None:
            Xv, yv = X, yi
        else:
            Xv = self._images(validation_data[0])
            yv = np.searchsorted(self.classes_, np.asarray(validation_data[1])).astype(np.int64)
        cfg = TrainConfig(
            model=self.model, scheme=self.scheme, p=self.p, delta_coeff=self.delta_coeff,
            ede=self.ede, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            width=self.width, nonlinearity=self.nonlinearity, seed=self.seed,
        )
        self.result_ = train(cfg, data=(X, yi, Xv, yv))
        self.network_ = self.result_.state.model
        self.history_ = self.result_.metrics
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = self._images(X)
        self.network_.eval()
        with torch.no_grad():
            return self.network_(torch.from_numpy(X)).numpy()

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def quantized_layers(self):
        check_is_fitted(self)
        return self.result_.quantized_layers()
