"""scikit-learn style wrappers around a built model.

The network is forward-only with deterministic seeded weights, so ``fit``
only validates the input layout and builds the model. Images are batches
shaped ``[n, H, W, 3]`` with H and W divisible by 32.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from coat import model as M
from coat import tensor as T
from coat.errors import DimensionError


def _check_images(X, dtype) -> np.ndarray:
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=T.resolve_dtype(dtype))
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise DimensionError(f"expected images shaped [n, H, W, 3], got {X.shape}")
    if X.shape[1] % 32 or X.shape[2] % 32:
        raise DimensionError(f"image sides must be divisible by 32, got {X.shape[1]}x{X.shape[2]}")
    return X


class _ModelMixin:
    def _build(self, X):
        M.get_spec(self.model)
        _check_images(X, self.dtype)
        self.model_ = M.build_model(self.model, seed=self.seed, dtype=self.dtype)
        self.n_params_ = M.count_params(self.model_)
        return self

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return _check_images(X, self.dtype)


class CoaTFeatures(_ModelMixin, TransformerMixin, BaseEstimator):
    """Maps images to the classifier input vector (pooled CLS features)."""

    def __init__(self, model: str = "coat_lite_tiny", seed: int = 0, dtype: str = "f32"):
        self.model = model
        self.seed = seed
        self.dtype = dtype

    def fit(self, X, y=None):
        return self._build(X)

    def transform(self, X) -> np.ndarray:
        X = self._images(X)
        return np.stack([self.model_.pooled(T.Tensor(x, self.dtype)).data for x in X])


class CoaTClassifier(_ModelMixin, ClassifierMixin, BaseEstimator):
    """Predicts the argmax class of the seeded (untrained) classifier head."""

    def __init__(self, model: str = "coat_lite_tiny", seed: int = 0, dtype: str = "f32"):
        self.model = model
        self.seed = seed
        self.dtype = dtype

    def fit(self, X, y=None):
        self._build(X)
        self.classes_ = np.arange(self.model_.spec.num_classes)
        return self

    def decision_function(self, X) -> np.ndarray:
        X = self._images(X)
        return np.stack([self.model_(T.Tensor(x, self.dtype)).data for x in X])

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]
