"""Kernels on patches, their feature-space factorizations, and the
activation smoothness constants that size the nuclear-norm budget.

Three kernels are supported:

- ``inverse_poly``: k(z, z') = 1 / (2 - <z, z'>), defined on the unit ball;
- ``gaussian``: k(z, z') = exp(-gamma ||z - z'||^2), used on the unit sphere;
- ``linear``: k(z, z') = <z, z'>, the ablation baseline with no domain
  condition (its explicit feature map is the identity).

A feature map turns the implicit kernel space into m coordinates so that
training patch (i, p) gets row Q[(i, p)] with Q Q^T approximating (or
exactly equal to) the patch kernel matrix, and unseen patches are embedded
consistently: the exact and Nystrom maps reproduce their training rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_matrix

KERNEL_KINDS = ("inverse_poly", "gaussian", "linear")
DOMAIN_TOL = 1e-6


@dataclass(frozen=True)
class KernelSpec:
    """A kernel kind plus its bandwidth (Gaussian only)."""

    kind: str
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian":
            if self.gamma is None or not self.gamma > 0:
                raise ValueError(
                    f"gaussian kernel needs gamma > 0, got {self.gamma!r}"
                )
        elif self.gamma is not None:
            raise ValueError(f"kernel {self.kind!r} takes no gamma")


def check_domain(spec: KernelSpec, Z, tol: float = DOMAIN_TOL,
                 name: str = "patches") -> None:
    """Verify patches lie in the kernel's domain.

    inverse_poly requires norms <= 1 + tol; gaussian requires norms within
    tol of 1; linear has no condition. Raises ValueError naming the first
    offending patch.
    """
    if spec.kind == "linear":
        return
    Z = check_matrix(Z, name=name)
    norms = np.linalg.norm(Z, axis=1)
    if spec.kind == "inverse_poly":
        bad = norms > 1.0 + tol
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ValueError(
                f"{name}[{i}] has norm {norms[i]:.8g} > 1 + {tol:g}; the "
                f"inverse polynomial kernel is defined on the unit ball"
            )
    else:
        bad = np.abs(norms - 1.0) > tol
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ValueError(
                f"{name}[{i}] has norm {norms[i]:.8g} not within {tol:g} of "
                f"1; the Gaussian kernel expects unit-sphere patches"
            )


def kernel_matrix(spec: KernelSpec, X, Y=None, check: bool = True,
                  tol: float = DOMAIN_TOL) -> np.ndarray:
    """Pairwise kernel values k(x_i, y_j); symmetric when Y is None."""
    X = check_matrix(X, name="X")
    self_gram = Y is None
    Y = X if self_gram else check_matrix(Y, d=X.shape[1], name="Y")
    if check:
        check_domain(spec, X, tol, name="X")
        if not self_gram:
            check_domain(spec, Y, tol, name="Y")
    inner = X @ Y.T
    if spec.kind == "linear":
        K = inner
    elif spec.kind == "inverse_poly":
        K = 1.0 / (2.0 - inner)
    else:
        sq = (np.sum(X * X, axis=1)[:, None]
              + np.sum(Y * Y, axis=1)[None, :] - 2.0 * inner)
        np.maximum(sq, 0.0, out=sq)
        K = np.exp(-spec.gamma * sq)
    if self_gram:
        K = (K + K.T) / 2.0
    return K


def kernel_eval(spec: KernelSpec, z1, z2, check: bool = True,
                tol: float = DOMAIN_TOL) -> float:
    """Evaluate k(z1, z2) for two patch vectors."""
    z1 = np.asarray(z1, dtype=np.float64).reshape(1, -1)
    z2 = np.asarray(z2, dtype=np.float64).reshape(1, -1)
    return float(kernel_matrix(spec, z1, z2, check=check, tol=tol)[0, 0])


# ---------------------------------------------------------------------------
# Feature maps


class IdentityFeatures(TransformerMixin, BaseEstimator):
    """Raw patches as their own features (the linear kernel's explicit map)."""

    def fit(self, Z, y=None):
        Z = check_matrix(Z, name="Z")
        self.n_features_ = Z.shape[1]
        self.training_rows_ = Z.copy()
        return self

    def transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "n_features_")
        return check_matrix(Z, d=self.n_features_, name="Z")

    def to_payload(self):
        check_is_fitted(self, "n_features_")
        return {"variant": "identity", "m": self.n_features_}, {}

    @classmethod
    def from_payload(cls, header, arrays) -> "IdentityFeatures":
        fm = cls()
        fm.n_features_ = int(header["m"])
        fm.training_rows_ = None
        return fm


class ExactKernelFeatures(TransformerMixin, BaseEstimator):
    """Exact factorization K = Q Q^T of the training patch kernel matrix.

    fit eigendecomposes K, clips negative eigenvalues (rejecting any below
    -1e-8), drops components below drop_tol, and keeps Q = E Lambda^(1/2)
    as training_rows_. transform embeds z as Lambda^(-1/2) E^T v(z) with
    v(z)_j = k(z, z_j) over the stored training patches, which reproduces
    the training rows exactly.
    """

    def __init__(self, kernel: str = "gaussian", gamma: float | None = None,
                 drop_tol: float = 1e-10, domain_tol: float = DOMAIN_TOL):
        self.kernel = kernel
        self.gamma = gamma
        self.drop_tol = drop_tol
        self.domain_tol = domain_tol

    @property
    def _spec(self) -> KernelSpec:
        return KernelSpec(self.kernel, self.gamma)

    def fit(self, Z, y=None):
        Z = check_matrix(Z, name="Z")
        spec = self._spec
        check_domain(spec, Z, self.domain_tol)
        K = kernel_matrix(spec, Z, check=False)
        lam, E = np.linalg.eigh(K)
        if lam.min() < -1e-8:
            raise ValueError(
                f"kernel matrix has eigenvalue {lam.min():.3g} < -1e-8; "
                f"not positive semidefinite within tolerance"
            )
        order = np.argsort(lam)[::-1]
        lam, E = lam[order], E[:, order]
        keep = lam > self.drop_tol
        lam, E = lam[keep], E[:, keep]
        self.landmarks_ = Z.copy()
        # eigh hands back Fortran-ordered vectors; store C order so a
        # serialized copy reproduces transform outputs bit for bit
        self.training_rows_ = np.ascontiguousarray(E * np.sqrt(lam))
        self._map = np.ascontiguousarray(E / np.sqrt(lam))
        self.n_features_ = int(lam.shape[0])
        return self

    def transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "n_features_")
        Z = check_matrix(Z, d=self.landmarks_.shape[1], name="Z")
        check_domain(self._spec, Z, self.domain_tol)
        v = kernel_matrix(self._spec, Z, self.landmarks_, check=False)
        return v @ self._map

    def to_payload(self):
        check_is_fitted(self, "n_features_")
        header = {"variant": "exact", "kernel": self.kernel,
                  "gamma": self.gamma, "m": self.n_features_}
        return header, {"landmarks": self.landmarks_, "map": self._map}

    @classmethod
    def from_payload(cls, header, arrays) -> "ExactKernelFeatures":
        fm = cls(kernel=header["kernel"], gamma=header["gamma"])
        fm.landmarks_ = np.asarray(arrays["landmarks"], dtype=np.float64)
        fm._map = np.asarray(arrays["map"], dtype=np.float64)
        fm.training_rows_ = None
        fm.n_features_ = int(header["m"])
        return fm


class NystromFeatures(TransformerMixin, BaseEstimator):
    """Nystrom approximation from m uniformly sampled landmark patches.

    fit samples m training patches without replacement (seeded), then forms
    (K_SS)^(-1/2) from the landmark block's eigendecomposition with
    eigenvalues below eig_floor treated as zero; transform embeds z as
    (K_SS)^(-1/2) [k(z, s_j)]_j. With m equal to the full patch count the
    factorization is exact.
    """

    def __init__(self, kernel: str = "gaussian", gamma: float | None = None,
                 m: int = 100, seed: int = 0, eig_floor: float = 1e-10,
                 domain_tol: float = DOMAIN_TOL,
                 store_training_rows: bool = True):
        self.kernel = kernel
        self.gamma = gamma
        self.m = m
        self.seed = seed
        self.eig_floor = eig_floor
        self.domain_tol = domain_tol
        self.store_training_rows = store_training_rows

    @property
    def _spec(self) -> KernelSpec:
        return KernelSpec(self.kernel, self.gamma)

    def fit(self, Z, y=None):
        Z = check_matrix(Z, name="Z")
        if not 1 <= self.m <= Z.shape[0]:
            raise ValueError(
                f"m must be in [1, {Z.shape[0]}] (the training patch count), "
                f"got {self.m}"
            )
        spec = self._spec
        check_domain(spec, Z, self.domain_tol)
        rng = np.random.default_rng(self.seed)
        idx = np.sort(rng.choice(Z.shape[0], size=self.m, replace=False))
        self.landmark_idx_ = idx
        self.landmarks_ = Z[idx].copy()
        K_ss = kernel_matrix(spec, self.landmarks_, check=False)
        lam, E = np.linalg.eigh(K_ss)
        inv_root = np.where(lam > self.eig_floor, 1.0 / np.sqrt(np.maximum(lam, self.eig_floor)), 0.0)
        self.inv_sqrt_ = (E * inv_root) @ E.T
        self.n_features_ = self.m
        if self.store_training_rows:
            self.training_rows_ = kernel_matrix(
                spec, Z, self.landmarks_, check=False) @ self.inv_sqrt_
        else:
            self.training_rows_ = None
        return self

    def transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "n_features_")
        Z = check_matrix(Z, d=self.landmarks_.shape[1], name="Z")
        check_domain(self._spec, Z, self.domain_tol)
        v = kernel_matrix(self._spec, Z, self.landmarks_, check=False)
        return v @ self.inv_sqrt_

    def to_payload(self):
        check_is_fitted(self, "n_features_")
        header = {"variant": "nystrom", "kernel": self.kernel,
                  "gamma": self.gamma, "m": self.n_features_,
                  "seed": self.seed}
        return header, {"landmarks": self.landmarks_,
                        "inv_sqrt": self.inv_sqrt_}

    @classmethod
    def from_payload(cls, header, arrays) -> "NystromFeatures":
        fm = cls(kernel=header["kernel"], gamma=header["gamma"],
                 m=int(header["m"]), seed=int(header.get("seed", 0)))
        fm.landmarks_ = np.asarray(arrays["landmarks"], dtype=np.float64)
        fm.inv_sqrt_ = np.asarray(arrays["inv_sqrt"], dtype=np.float64)
        fm.landmark_idx_ = None
        fm.training_rows_ = None
        fm.n_features_ = int(header["m"])
        return fm


class RandomFourierFeatures(TransformerMixin, BaseEstimator):
    """Random Fourier features for the Gaussian kernel.

    fit draws Omega with i.i.d. N(0, 2 gamma) entries and phases b uniform
    on [0, 2 pi); transform maps z to sqrt(2/m) cos(Omega^T z + b), whose
    inner products estimate exp(-gamma ||z - z'||^2). Defined for any input,
    so no domain check applies.
    """

    def __init__(self, gamma: float = 1.0, m: int = 100, seed: int = 0):
        self.gamma = gamma
        self.m = m
        self.seed = seed

    def fit(self, Z, y=None):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma!r}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        Z = check_matrix(Z, name="Z")
        rng = np.random.default_rng(self.seed)
        d = Z.shape[1]
        self.omega_ = rng.normal(0.0, math.sqrt(2.0 * self.gamma), size=(d, self.m))
        self.offset_ = rng.uniform(0.0, 2.0 * math.pi, size=self.m)
        self.n_features_ = self.m
        return self

    def transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "n_features_")
        Z = check_matrix(Z, d=self.omega_.shape[0], name="Z")
        return np.sqrt(2.0 / self.n_features_) * np.cos(Z @ self.omega_ + self.offset_)

    def to_payload(self):
        check_is_fitted(self, "n_features_")
        header = {"variant": "random", "kernel": "gaussian",
                  "gamma": self.gamma, "m": self.n_features_,
                  "seed": self.seed}
        return header, {"omega": self.omega_, "offset": self.offset_}

    @classmethod
    def from_payload(cls, header, arrays) -> "RandomFourierFeatures":
        fm = cls(gamma=header["gamma"], m=int(header["m"]),
                 seed=int(header.get("seed", 0)))
        fm.omega_ = np.asarray(arrays["omega"], dtype=np.float64)
        fm.offset_ = np.asarray(arrays["offset"], dtype=np.float64)
        fm.n_features_ = int(header["m"])
        return fm


FEATURE_MAP_CLASSES = {
    "identity": IdentityFeatures,
    "exact": ExactKernelFeatures,
    "nystrom": NystromFeatures,
    "random": RandomFourierFeatures,
}


def feature_map_from_payload(header, arrays):
    """Rebuild a fitted feature map from its serialized payload."""
    variant = header["variant"]
    if variant not in FEATURE_MAP_CLASSES:
        raise ValueError(f"unknown feature map variant {variant!r}")
    return FEATURE_MAP_CLASSES[variant].from_payload(header, arrays)


# ---------------------------------------------------------------------------
# Activation series and smoothness constants


ACTIVATION_NAMES = ("poly", "linear", "quadratic", "sin", "erf",
                    "smoothed_hinge")


@dataclass(frozen=True)
class Activation:
    """An activation's power-series representation sigma(t) = sum a_j t^j."""

    name: str
    coeffs: tuple[float, ...] = ()


def activation(name: str, coeffs=None) -> Activation:
    """Build an Activation by name.

    "poly" takes explicit coefficients (a_0, a_1, ...); "linear" and
    "quadratic" are shorthands for poly (0, 1) and (0, 0, 1); "sin", "erf"
    and "smoothed_hinge" use their closed-form series.
    """
    if name == "poly":
        if coeffs is None:
            raise ValueError("poly activation needs explicit coefficients")
        return Activation("poly", tuple(float(c) for c in coeffs))
    if coeffs is not None:
        raise ValueError(f"activation {name!r} takes no coefficients")
    if name == "linear":
        return Activation("poly", (0.0, 1.0))
    if name == "quadratic":
        return Activation("poly", (0.0, 0.0, 1.0))
    if name in ("sin", "erf", "smoothed_hinge"):
        return Activation(name)
    raise ValueError(f"unknown activation {name!r}")


def _coeff_log_abs(act: Activation, j: int) -> float | None:
    """log |a_j| of the activation's series, or None when a_j = 0."""
    if act.name == "poly":
        if j >= len(act.coeffs) or act.coeffs[j] == 0.0:
            return None
        return math.log(abs(act.coeffs[j]))
    if act.name == "sin":
        if j % 2 == 0:
            return None
        return -math.lgamma(j + 1)
    if act.name == "erf":
        if j % 2 == 0:
            return None
        k = (j - 1) // 2
        return math.log(2.0) - 0.5 * math.log(math.pi) - math.lgamma(k + 1) - math.log(j)
    if act.name == "smoothed_hinge":
        if j == 0:
            return -math.log(2.0) - 0.5 * math.log(math.pi)
        if j == 1:
            return -math.log(2.0)
        if j % 2 == 1:
            return None
        k = (j - 2) // 2
        return (-0.5 * math.log(math.pi) - math.lgamma(k + 1)
                - math.log(j - 1) - math.log(j))
    raise ValueError(f"unknown activation {act.name!r}")


def series_coefficient(act: Activation, j: int) -> float:
    """The signed series coefficient a_j (may underflow to 0 for large j)."""
    la = _coeff_log_abs(act, j)
    if la is None:
        return 0.0
    if act.name == "poly":
        return act.coeffs[j]
    if act.name in ("sin", "erf"):
        sign = -1.0 if ((j - 1) // 2) % 2 else 1.0
    else:  # smoothed_hinge: a_0, a_1 positive; even terms alternate
        sign = 1.0 if j <= 1 else (-1.0 if ((j - 2) // 2) % 2 else 1.0)
    try:
        return sign * math.exp(la)
    except OverflowError:
        return sign * math.inf


def _log_weight(spec: KernelSpec, j: int) -> float:
    if spec.kind == "inverse_poly":
        return (j + 1) * math.log(2.0)
    # gaussian: j! e^{2 gamma} / (2 gamma)^j
    g = spec.gamma
    return math.lgamma(j + 1) + 2.0 * g - j * math.log(2.0 * g)


def c_sigma(act: Activation, spec: KernelSpec, lam: float,
            tol: float = 1e-12, max_terms: int = 2000) -> float:
    """Feature-space norm constant C_sigma(lam) of an activation.

    C_sigma(lam)^2 sums w_j a_j^2 lam^(2 j) with kernel-dependent weights
    w_j (2^(j+1) for inverse_poly; j! e^(2 gamma) / (2 gamma)^j for
    gaussian). The sum is truncated once the running terms fall below
    `tol` times the partial sum.

    Raises
    ------
    ValueError
        For the linear kernel (no smoothness constant applies), for
        activation/kernel pairs whose series diverges (erf and
        smoothed_hinge lie outside the Gaussian kernel's feature space),
        or when the series fails to converge in double precision.
    """
    if spec.kind == "linear":
        raise ValueError(
            "smoothness constants are defined for the inverse_poly and "
            "gaussian kernels only"
        )
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    if spec.kind == "gaussian" and act.name in ("erf", "smoothed_hinge"):
        raise ValueError(
            f"the {act.name} series diverges in the Gaussian kernel's "
            f"feature space; use the inverse_poly kernel for this activation"
        )
    if lam == 0.0:
        la = _coeff_log_abs(act, 0)
        if la is None:
            return 0.0
        return math.exp(0.5 * _log_weight(spec, 0) + la)
    if act.coeffs == (0.0, 1.0) and spec.kind == "inverse_poly":
        # the linear activation's series has the single term 2^2 a_1^2
        # lam^2, so the constant reduces to exactly 2 lam
        return 2.0 * lam
    log_lam = math.log(lam)
    total = 0.0
    small_run = 0
    for j in range(max_terms):
        if act.name == "poly" and j >= len(act.coeffs):
            break
        la = _coeff_log_abs(act, j)
        if la is None:
            continue
        log_term = _log_weight(spec, j) + 2.0 * la + 2.0 * j * log_lam
        try:
            term = math.exp(log_term)
        except OverflowError:
            raise ValueError(
                f"C_sigma series for {act.name}/{spec.kind} overflows at "
                f"term {j} (lam = {lam:g}); the constant is not "
                f"representable in double precision"
            ) from None
        total += term
        if not math.isfinite(total):
            raise ValueError(
                f"C_sigma series for {act.name}/{spec.kind} diverges "
                f"(lam = {lam:g})"
            )
        if total > 0.0 and term < tol * total:
            small_run += 1
            if small_run >= 4:
                break
        else:
            small_run = 0
    else:
        if act.name != "poly":
            raise ValueError(
                f"C_sigma series for {act.name}/{spec.kind} did not "
                f"converge within {max_terms} terms (lam = {lam:g})"
            )
    return math.sqrt(total)


def estimate_kernel_spectral_norm(spec: KernelSpec, images, plan,
                                  transform=None,
                                  tol: float = DOMAIN_TOL) -> float:
    """Mean spectral norm of the per-image patch kernel matrix.

    Extracts each image's patches with `plan`, optionally maps them through
    `transform` (a fitted preprocessing callable), and averages
    ||K(X_i)||_2 over the sample. Useful as the B-hat diagnostic when
    sizing the radius.
    """
    from .patches import extract_patches_batch

    X = np.asarray(images)
    if X.ndim == 3:
        X = X[None]
    patches = extract_patches_batch(X, plan)
    norms = []
    for i in range(patches.shape[0]):
        Z = patches[i].astype(np.float64)
        if transform is not None:
            Z = transform(Z)
        K = kernel_matrix(spec, Z, check=True, tol=tol)
        eig = np.linalg.eigvalsh(K)
        norms.append(float(np.max(np.abs(eig))))
    return float(np.mean(norms))
