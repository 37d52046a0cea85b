"""Estimator-style interface over the training pipeline."""

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .datasets import Dataset
from .model import LayerSpec, classify, predict_scores, train_multi_layer
from .optimize import OptConfig
from .validation import as_images


class CCNNClassifier(ClassifierMixin, BaseEstimator):
    """Convexified convolutional network classifier.

    With `layers=None` a single stage is built from the flat keyword
    arguments; otherwise `layers` is a sequence of LayerSpec instances (or
    dicts of LayerSpec fields) trained greedily in order, and the flat
    stage arguments are ignored.

    Parameters mirror LayerSpec and OptConfig; `seed` drives both the
    minibatch shuffle and (for the single-stage form) the feature map.

    Attributes
    ----------
    classes_ : array
        Sorted unique labels seen in fit.
    model_ : CcnnModel
        The trained network.
    records_ : list
        Per-stage lists of per-epoch diagnostic dicts.

    Examples
    --------
    >>> clf = CCNNClassifier(kernel="linear", features="identity",
    ...                      patch_side=2, stride=2, R=5.0, epochs=5)
    >>> clf.fit(X_train, y_train).score(X_test, y_test)  # doctest: +SKIP
    """

    def __init__(self, kernel="gaussian", gamma=0.2, features="random",
                 m=500, r=16, R=30.0, patch_side=5, stride=1, pad=0,
                 pool_side=1, pool_stride=1, gcn=False, lcn=True, zca=True,
                 zca_eps=1e-5, scale="auto", layers=None, epochs=10,
                 batch_size=50, step_size=1.0, schedule="inv_sqrt",
                 projection="nuclear", project_every=1, seed=0):
        self.kernel = kernel
        self.gamma = gamma
        self.features = features
        self.m = m
        self.r = r
        self.R = R
        self.patch_side = patch_side
        self.stride = stride
        self.pad = pad
        self.pool_side = pool_side
        self.pool_stride = pool_stride
        self.gcn = gcn
        self.lcn = lcn
        self.zca = zca
        self.zca_eps = zca_eps
        self.scale = scale
        self.layers = layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.step_size = step_size
        self.schedule = schedule
        self.projection = projection
        self.project_every = project_every
        self.seed = seed

    def _specs(self):
        if self.layers is not None:
            specs = []
            for entry in self.layers:
                if isinstance(entry, LayerSpec):
                    specs.append(entry)
                else:
                    specs.append(LayerSpec(**dict(entry)))
            if not specs:
                raise ValueError("layers must not be empty")
            return specs
        return [LayerSpec(
            kernel=self.kernel, gamma=self.gamma, features=self.features,
            m=self.m, r=self.r, R=self.R, patch_side=self.patch_side,
            stride=self.stride, pad=self.pad, pool_side=self.pool_side,
            pool_stride=self.pool_stride, gcn=self.gcn, lcn=self.lcn,
            zca=self.zca, zca_eps=self.zca_eps, scale=self.scale,
            seed=self.seed,
        )]

    def _coerce(self, X, fitted):
        """Accept flat sklearn-style (n, features) input alongside images.

        At fit time a 2-D matrix is unfolded to single-channel square
        images; afterwards it is reshaped to the fitted image shape.
        """
        arr = np.asarray(X)
        if arr.ndim == 2:
            if fitted:
                c, h, w = self.input_shape_
                if arr.shape[1] != c * h * w:
                    raise ValueError(
                        f"X has {arr.shape[1]} features, the fitted model "
                        f"expects {c * h * w}"
                    )
                arr = arr.reshape(len(arr), c, h, w)
            else:
                side = math.isqrt(arr.shape[1])
                if side * side != arr.shape[1]:
                    raise ValueError(
                        f"cannot unfold {arr.shape[1]} features into square "
                        "images; pass X with explicit image dimensions"
                    )
                arr = arr.reshape(len(arr), 1, side, side)
        return as_images(arr)

    def fit(self, X, y):
        """Fit on images X (n, channels, h, w) or (n, h, w) and labels y."""
        X = self._coerce(X, fitted=False)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(
                f"y must be 1-D with {len(X)} entries, got shape {y.shape}"
            )
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes to fit")
        specs = self._specs()
        opt = OptConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            step_size=self.step_size, schedule=self.schedule,
            projection=self.projection, radius=specs[0].R,
            project_every=self.project_every, seed=self.seed,
        )
        ds = Dataset(X, encoded.astype(np.int64))
        self.input_shape_ = tuple(X.shape[1:])
        self.model_ = train_multi_layer(ds, specs, opt)
        self.records_ = self.model_.meta["records"]
        return self

    def decision_function(self, X):
        """Raw class scores, shape (n, n_classes)."""
        check_is_fitted(self, "model_")
        return predict_scores(self.model_, self._coerce(X, fitted=True))

    def predict(self, X):
        """Predicted labels in the original label space."""
        check_is_fitted(self, "model_")
        idx = classify(self.model_, self._coerce(X, fitted=True))
        return self.classes_[np.atleast_1d(idx)]
