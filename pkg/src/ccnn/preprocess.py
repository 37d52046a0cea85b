"""Patch and image preprocessing fitted on training data only.

The per-layer chain runs in a fixed order: local contrast normalization,
then ZCA whitening, then the kernel-domain scaling (unit ball for the
inverse polynomial kernel, unit sphere for the Gaussian). Every fitted
statistic comes from training patches and is stored with the model so test
inputs pass through identical transforms.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_matrix

logger = logging.getLogger(__name__)

_SD_FLOOR = 1e-8
_NORM_FLOOR = 1e-12


def global_contrast_normalize(images) -> np.ndarray:
    """Standardize each image to zero mean and unit variance over its pixels.

    Accepts (C, h, w) or (n, C, h, w); the standard deviation is floored at
    1e-8 so constant images map to zeros.
    """
    X = np.asarray(images, dtype=np.float64)
    single = X.ndim == 3
    if single:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"images must be 3-D or 4-D, got shape {X.shape}")
    flat = X.reshape(X.shape[0], -1)
    mean = flat.mean(axis=1)
    sd = np.maximum(flat.std(axis=1), _SD_FLOOR)
    out = (flat - mean[:, None]) / sd[:, None]
    out = out.reshape(X.shape)
    return out[0] if single else out


def local_contrast_normalize(Z) -> np.ndarray:
    """Standardize each patch row to zero mean, unit variance (sd floor 1e-8).

    Constant patches map to the zero vector.
    """
    Z = check_matrix(Z, name="Z")
    mean = Z.mean(axis=1, keepdims=True)
    sd = np.maximum(Z.std(axis=1, keepdims=True), _SD_FLOOR)
    return (Z - mean) / sd


def unit_sphere_normalize(Z):
    """Scale each patch row to unit Euclidean norm.

    Exactly-zero rows are returned unchanged and flagged.

    Returns
    -------
    (normalized, degenerate) : (array (N, d), bool array (N,))
        `degenerate[i]` is True where row i was zero and left as-is.
    """
    Z = check_matrix(Z, name="Z")
    norms = np.linalg.norm(Z, axis=1)
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    return Z / safe[:, None], degenerate


class PatchScaler(TransformerMixin, BaseEstimator):
    """Scale patches into the unit ball.

    fit computes gamma_ = 1 / max(max training norm, 1e-12); transform
    multiplies by gamma_. With clip=True, rows still outside the ball after
    scaling (possible only for unseen patches) are radially projected onto
    it, which keeps them inside the inverse polynomial kernel's domain.
    """

    def __init__(self, clip: bool = False):
        self.clip = clip

    def fit(self, Z, y=None):
        Z = check_matrix(Z, name="Z")
        if Z.shape[0] == 0:
            raise ValueError("cannot fit scaler on an empty patch set")
        max_norm = float(np.linalg.norm(Z, axis=1).max())
        self.gamma_ = 1.0 / max(max_norm, _NORM_FLOOR)
        return self

    def transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "gamma_")
        Z = check_matrix(Z, name="Z")
        out = Z * self.gamma_
        if self.clip:
            norms = np.linalg.norm(out, axis=1)
            over = norms > 1.0
            if np.any(over):
                out[over] /= norms[over, None]
        return out


class ZcaWhitener(TransformerMixin, BaseEstimator):
    """ZCA whitening of patch vectors.

    fit stores the training mean and W = E (Lambda + eps I)^(-1/2) E^T from
    the eigendecomposition of the training patch covariance; transform maps
    z to W (z - mean). As eps -> 0 the whitened training covariance
    approaches the identity.
    """

    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def fit(self, Z, y=None):
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        Z = check_matrix(Z, name="Z")
        if Z.shape[0] == 0:
            raise ValueError("cannot fit ZCA on an empty patch set")
        self.mean_ = Z.mean(axis=0)
        centered = Z - self.mean_
        cov = centered.T @ centered / Z.shape[0]
        lam, E = np.linalg.eigh(cov)
        lam = np.maximum(lam, 0.0)
        self.whiten_ = (E * (lam + self.eps) ** -0.5) @ E.T
        return self

    def transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "whiten_")
        Z = check_matrix(Z, d=self.mean_.shape[0], name="Z")
        return (Z - self.mean_) @ self.whiten_


class PatchPreprocessor(TransformerMixin, BaseEstimator):
    """The fitted per-layer patch chain: contrast norm -> ZCA -> scaling.

    Parameters
    ----------
    lcn : bool
        Apply local contrast normalization per patch.
    zca : bool
        Fit and apply ZCA whitening.
    zca_eps : float
        Eigenvalue regularizer for the whitener.
    scale : {"unit_ball", "unit_sphere", "none"}
        Final scaling step. unit_ball fits a PatchScaler (with clipping for
        unseen patches); unit_sphere normalizes rows and leaves zero rows
        flagged.
    """

    def __init__(self, lcn: bool = True, zca: bool = True,
                 zca_eps: float = 1e-5, scale: str = "unit_ball"):
        self.lcn = lcn
        self.zca = zca
        self.zca_eps = zca_eps
        self.scale = scale

    def _check_params(self):
        if self.scale not in ("unit_ball", "unit_sphere", "none"):
            raise ValueError(f"unknown scale mode {self.scale!r}")

    def fit(self, Z, y=None):
        self._check_params()
        Z = check_matrix(Z, name="Z")
        if self.lcn:
            Z = local_contrast_normalize(Z)
        if self.zca:
            self.zca_ = ZcaWhitener(self.zca_eps).fit(Z)
            Z = self.zca_.transform(Z)
        else:
            self.zca_ = None
        if self.scale == "unit_ball":
            self.scaler_ = PatchScaler(clip=True).fit(Z)
        else:
            self.scaler_ = None
        self.dim_ = Z.shape[1]
        self.degenerate_count_ = 0
        if self.scale == "unit_sphere":
            _, degenerate = unit_sphere_normalize(Z)
            self.degenerate_count_ = int(degenerate.sum())
            if self.degenerate_count_:
                logger.warning(
                    "%d of %d training patches are zero after preprocessing "
                    "and stay off the unit sphere",
                    self.degenerate_count_, Z.shape[0],
                )
        return self

    def transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "dim_")
        Z = check_matrix(Z, name="Z")
        if self.lcn:
            Z = local_contrast_normalize(Z)
        if self.zca_ is not None:
            Z = self.zca_.transform(Z)
        if self.scale == "unit_ball":
            Z = self.scaler_.transform(Z)
        elif self.scale == "unit_sphere":
            Z, _ = unit_sphere_normalize(Z)
        return Z

    def to_payload(self):
        """Fitted state as (flags dict, arrays dict) for serialization."""
        check_is_fitted(self, "dim_")
        flags = {"lcn": self.lcn, "zca": self.zca, "zca_eps": self.zca_eps,
                 "scale": self.scale, "dim": self.dim_}
        arrays = {}
        if self.zca_ is not None:
            arrays["zca_mean"] = self.zca_.mean_
            arrays["zca_whiten"] = self.zca_.whiten_
        if self.scaler_ is not None:
            arrays["scale_gamma"] = np.asarray([self.scaler_.gamma_])
        return flags, arrays

    @classmethod
    def from_payload(cls, flags, arrays) -> "PatchPreprocessor":
        pre = cls(lcn=flags["lcn"], zca=flags["zca"],
                  zca_eps=flags["zca_eps"], scale=flags["scale"])
        pre.dim_ = int(flags["dim"])
        pre.degenerate_count_ = 0
        if flags["zca"]:
            zca = ZcaWhitener(flags["zca_eps"])
            zca.mean_ = np.asarray(arrays["zca_mean"], dtype=np.float64)
            zca.whiten_ = np.asarray(arrays["zca_whiten"], dtype=np.float64)
            pre.zca_ = zca
        else:
            pre.zca_ = None
        if flags["scale"] == "unit_ball":
            scaler = PatchScaler(clip=True)
            scaler.gamma_ = float(np.asarray(arrays["scale_gamma"]).ravel()[0])
            pre.scaler_ = scaler
        else:
            pre.scaler_ = None
        return pre
