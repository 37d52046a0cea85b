"""Training, filter retrieval, layer stacking, prediction, and model files.

A trained network is a chain of convolutional layers plus a head. Every
stage shares one featurization recipe: patches are extracted on a fixed
grid, preprocessed with statistics fitted on training data, embedded by a
kernel feature map, and average-pooled. A layer turns the pooled feature
matrix Z(x) into an r-channel image H(x) = U^T Z(x)^T via its orthonormal
filter basis U; the head scores classes as tr(Z(x) A_l) with the trained
parameter matrix A.
"""

from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .errors import ConfigError, FormatError
from .kernels import (
    Activation,
    ExactKernelFeatures,
    IdentityFeatures,
    KernelSpec,
    NystromFeatures,
    RandomFourierFeatures,
    c_sigma,
    feature_map_from_payload,
)
from .optimize import LossSpec, OptConfig, psgd
from .patches import (
    ImageShape,
    PatchPlan,
    PoolPlan,
    apply_pool,
    build_pool_matrix,
    extract_patches_batch,
    plan_patches,
)
from .preprocess import PatchPreprocessor, global_contrast_normalize
from .serialize import (
    MODEL_MAGIC,
    MODEL_VERSION,
    Reader,
    Writer,
    checked_payload,
    load_features,
    save_features,
)

logger = logging.getLogger(__name__)

FEATURE_VARIANTS = ("identity", "exact", "nystrom", "random")


@dataclass(frozen=True)
class LayerSpec:
    """Configuration of one convolutional stage.

    gamma applies to the Gaussian kernel only and is ignored elsewhere;
    scale "auto" resolves to unit_sphere for the Gaussian kernel and
    unit_ball otherwise. R is the nuclear (or Frobenius) radius used when
    training this stage's parameter matrix; r is the filter count kept by
    the low-rank factorization.
    """

    kernel: str = "gaussian"
    gamma: float = 0.2
    features: str = "random"
    m: int = 500
    r: int = 16
    R: float = 30.0
    patch_side: int = 5
    stride: int = 1
    pad: int = 0
    pool_side: int = 1
    pool_stride: int = 1
    gcn: bool = False
    lcn: bool = True
    zca: bool = True
    zca_eps: float = 1e-5
    scale: str = "auto"
    seed: int = 0

    def __post_init__(self):
        if self.kernel not in ("inverse_poly", "gaussian", "linear"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.features not in FEATURE_VARIANTS:
            raise ConfigError(f"unknown feature variant {self.features!r}")
        if self.features == "random" and self.kernel != "gaussian":
            raise ConfigError(
                "random Fourier features apply to the gaussian kernel only"
            )
        if self.features == "identity" and self.kernel != "linear":
            raise ConfigError(
                "identity features are the linear kernel's feature map"
            )
        if self.kernel == "gaussian" and not self.gamma > 0:
            raise ConfigError(f"gaussian kernel needs gamma > 0, got {self.gamma}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.r < 1:
            raise ConfigError(f"r must be >= 1, got {self.r}")
        if self.R < 0:
            raise ConfigError(f"R must be >= 0, got {self.R}")
        if self.scale not in ("auto", "unit_ball", "unit_sphere", "none"):
            raise ConfigError(f"unknown scale mode {self.scale!r}")

    @property
    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.kernel,
                          self.gamma if self.kernel == "gaussian" else None)

    @property
    def scale_mode(self) -> str:
        if self.scale != "auto":
            return self.scale
        return "unit_sphere" if self.kernel == "gaussian" else "unit_ball"


def radius_from_bounds(act: Activation, spec: KernelSpec, b1: float,
                       b2: float, r: int, d2: int) -> float:
    """Nuclear radius from filter/coefficient norm bounds:
    C_sigma(b1) * b2 * r * sqrt(d2)."""
    if b1 < 0 or b2 < 0:
        raise ValueError("norm bounds must be >= 0")
    if r < 1 or d2 < 1:
        raise ValueError("r and d2 must be >= 1")
    return c_sigma(act, spec, b1) * b2 * r * math.sqrt(d2)


@dataclass
class FeatureStage:
    """A fitted featurization stage: plan, preprocessing, map, pooling."""

    spec: LayerSpec
    plan: PatchPlan
    pool: PoolPlan
    pre: PatchPreprocessor
    fmap: object

    @property
    def n_features(self) -> int:
        return self.fmap.n_features_

    def patch_features(self, images, chunk: int | None = None) -> np.ndarray:
        """Pooled feature matrices (n, P', m) for a stack of images."""
        X = np.asarray(images)
        if X.ndim == 3:
            X = X[None]
        n = X.shape[0]
        P, d1 = self.plan.n_patches, self.plan.patch_dim
        m = self.n_features
        if chunk is None:
            chunk = max(1, int(5e6 / max(P * m, 1)))
        out = np.empty((n, self.pool.n_pooled, m))
        for start in range(0, n, chunk):
            block = X[start:start + chunk]
            if self.spec.gcn:
                block = global_contrast_normalize(block)
            Z = extract_patches_batch(block, self.plan)
            b = Z.shape[0]
            flat = self.pre.transform(Z.reshape(b * P, d1).astype(np.float64))
            feats = self.fmap.transform(flat).reshape(b, P, m)
            out[start:start + b] = apply_pool(self.pool, feats)
        return out


def fit_stage(images, spec: LayerSpec) -> FeatureStage:
    """Fit one stage's preprocessing and feature map on training images."""
    X = np.asarray(images)
    if X.ndim == 3:
        X = X[None]
    shape = ImageShape(*(int(d) for d in X.shape[1:]))
    try:
        plan = plan_patches(shape, spec.patch_side, spec.stride, spec.pad)
        pool = build_pool_matrix(plan, spec.pool_side, spec.pool_stride)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if spec.gcn:
        X = global_contrast_normalize(X)
    Z = extract_patches_batch(X, plan)
    flat = Z.reshape(-1, plan.patch_dim).astype(np.float64)
    pre = PatchPreprocessor(lcn=spec.lcn, zca=spec.zca, zca_eps=spec.zca_eps,
                            scale=spec.scale_mode).fit(flat)
    flat = pre.transform(flat)
    gamma = spec.gamma if spec.kernel == "gaussian" else None
    if spec.features == "identity":
        fmap = IdentityFeatures()
    elif spec.features == "exact":
        fmap = ExactKernelFeatures(kernel=spec.kernel, gamma=gamma)
    elif spec.features == "nystrom":
        fmap = NystromFeatures(kernel=spec.kernel, gamma=gamma, m=spec.m,
                               seed=spec.seed, store_training_rows=False)
    else:
        fmap = RandomFourierFeatures(gamma=spec.gamma, m=spec.m,
                                     seed=spec.seed)
    fmap.fit(flat)
    return FeatureStage(spec, plan, pool, pre, fmap)


@dataclass
class CcnnLayer:
    """A trained convolutional layer: featurization stage plus filters U."""

    stage: FeatureStage
    U: np.ndarray

    @property
    def r(self) -> int:
        return self.U.shape[1]

    @property
    def output_shape(self) -> ImageShape:
        return ImageShape(self.r, self.stage.pool.pooled_h,
                          self.stage.pool.pooled_w)


@dataclass
class CcnnHead:
    """The top predictor: featurization stage plus parameter matrix A."""

    stage: FeatureStage
    A: np.ndarray
    d2: int


@dataclass
class CcnnModel:
    """A trained network: layers feeding a head.

    The head shares the last layer's featurization, so prediction runs
    layers[:-1] as transforms and then scores with the head; feature export
    runs every layer including the last.
    """

    layers: list
    head: CcnnHead
    d2: int
    meta: dict = field(default_factory=dict)


def retrieve_filters(A, r: int):
    """Top-r factorization of the trained matrix: A ~ U_hat V_hat^T.

    U_hat holds the first r left singular vectors (orthonormal columns);
    V_hat^T holds the first r rows of diag(s) V^T. A tie between singular
    values r and r+1 makes the split non-unique and is logged.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"A must be 2-D, got shape {A.shape}")
    if not 1 <= r <= min(A.shape):
        raise ValueError(
            f"r must be in [1, {min(A.shape)}] for shape {A.shape}, got {r}"
        )
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if r < s.size and abs(s[r - 1] - s[r]) <= 1e-9 * max(s[0], 1.0):
        logger.warning(
            "singular values %d and %d are tied at %.6g; the retained "
            "filter subspace is not unique", r - 1, r, s[r - 1],
        )
    return U[:, :r].copy(), (Vt[:r].T * s[:r]).copy()


def layer_forward(layer: CcnnLayer, image) -> np.ndarray:
    """H(x) = U^T Z(x)^T for one image, shape (r, P')."""
    F = layer.stage.patch_features(np.asarray(image)[None])[0]
    return layer.U.T @ F.T


def forward_batch(layer: CcnnLayer, images) -> np.ndarray:
    """Layer outputs as r-channel images, shape (n, r, pooled_h, pooled_w)."""
    F = layer.stage.patch_features(images)
    H = np.einsum("npm,mr->nrp", F, layer.U, optimize=True)
    out = layer.output_shape
    return H.reshape(len(F), out.channels, out.height, out.width)


def predict_scores(model: CcnnModel, images) -> np.ndarray:
    """Class scores (n, d2) for a stack of images."""
    X = np.asarray(images)
    if X.ndim == 3:
        X = X[None]
    for layer in model.layers[:-1]:
        X = forward_batch(layer, X)
    Z = model.head.stage.patch_features(X)
    m = model.head.stage.n_features
    A3 = model.head.A.reshape(m, model.d2, Z.shape[1])
    return np.einsum("npm,mlp->nl", Z, A3, optimize=True)


def predict(model: CcnnModel, x) -> np.ndarray:
    """Scores for a single image, shape (d2,)."""
    return predict_scores(model, np.asarray(x)[None])[0]


def classify(model: CcnnModel, images) -> np.ndarray:
    """Predicted labels; ties go to the lowest class index."""
    X = np.asarray(images)
    single = X.ndim == 3
    scores = predict_scores(model, X)
    labels = scores.argmax(axis=1)
    return labels[0] if single else labels


def train_two_layer(dataset: Dataset, spec: LayerSpec, opt: OptConfig,
                    d2: int | None = None):
    """Train one convex stage on a dataset.

    Returns
    -------
    (model, layer) : (CcnnModel, CcnnLayer)
        A depth-1 model (head on the raw inputs) and the retrieved layer
        for stacking. Per-epoch records land in model.meta["records"].
    """
    y = dataset.labels
    if d2 is None:
        d2 = int(y.max()) + 1 if len(y) else 0
    if d2 < 2:
        raise ValueError(f"need at least 2 classes, got d2 = {d2}")
    stage = fit_stage(dataset.images, spec)
    Zs = stage.patch_features(dataset.images)
    opt_eff = replace(opt, radius=spec.R) if opt.projection != "none" else opt
    A, records = psgd(Zs, y, LossSpec("multiclass_logistic", d2), opt_eff)
    U, _ = retrieve_filters(A, spec.r)
    layer = CcnnLayer(stage, U)
    head = CcnnHead(stage, A, d2)
    model = CcnnModel([layer], head, d2,
                      {"records": [[asdict(r) for r in records]]})
    return model, layer


def validate_stack(shape: ImageShape, specs) -> list[ImageShape]:
    """Check that the layer chain composes; returns each stage's input shape.

    Raises ConfigError naming the first stage whose geometry fails, before
    any training starts.
    """
    shapes = [shape]
    cur = shape
    for i, spec in enumerate(specs):
        try:
            plan = plan_patches(cur, spec.patch_side, spec.stride, spec.pad)
            pool = build_pool_matrix(plan, spec.pool_side, spec.pool_stride)
        except ValueError as exc:
            raise ConfigError(f"layer {i + 1}: {exc}") from None
        cur = ImageShape(spec.r, pool.pooled_h, pool.pooled_w)
        shapes.append(cur)
    return shapes


def train_multi_layer(dataset: Dataset, specs, opt: OptConfig,
                      cache_dir=None) -> CcnnModel:
    """Greedy layer-by-layer training.

    Each stage is trained as a full network on the previous stage's
    outputs; its retrieved layer is kept, and its head survives only for
    the final stage. Inter-stage activations are cached to disk in the
    feature-file format (float32), so every stage after the first trains
    on exactly what a feature export would contain.
    """
    specs = list(specs)
    if not specs:
        raise ConfigError("need at least one layer spec")
    validate_stack(dataset.shape, specs)
    y = dataset.labels
    d2 = int(y.max()) + 1 if len(y) else 0

    own_tmp = None
    if cache_dir is None:
        own_tmp = tempfile.TemporaryDirectory(prefix="ccnn_stages_")
        cache_dir = own_tmp.name
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)

    try:
        layers = []
        all_records = []
        cur = dataset.images
        head = None
        for s, spec in enumerate(specs):
            stage_ds = Dataset(cur, y)
            model_s, layer = train_two_layer(stage_ds, spec, opt, d2=d2)
            layers.append(layer)
            all_records.extend(model_s.meta["records"])
            head = model_s.head
            if s < len(specs) - 1:
                H = forward_batch(layer, cur)
                path = cache_dir / f"stage{s + 1}_features.ccnf"
                save_features(path, H)
                cur = load_features(path)
        return CcnnModel(layers, head, d2, {"records": all_records})
    finally:
        if own_tmp is not None:
            own_tmp.cleanup()


def convexify_on_features(features, labels, spec: LayerSpec, opt: OptConfig,
                          d2: int | None = None) -> CcnnModel:
    """Train a depth-1 model on precomputed feature images.

    `features` may be an (n, channels, gh, gw) array or the path of a
    feature file. Given the same spec, optimizer config, and inputs, this
    is the same computation as the corresponding stage of
    train_multi_layer.
    """
    if isinstance(features, (str, Path)):
        features = load_features(features)
    features = np.asarray(features)
    if features.ndim != 4:
        raise ValueError(
            f"features must be (n, channels, gh, gw), got shape "
            f"{features.shape}"
        )
    model, _ = train_two_layer(Dataset(features, labels), spec, opt, d2=d2)
    return model


# ---------------------------------------------------------------------------
# Model files


def _stage_block(w: Writer, stage: FeatureStage, matrix_name: str,
                 matrix: np.ndarray, extra: dict) -> None:
    pre_flags, pre_arrays = stage.pre.to_payload()
    fm_header, fm_arrays = stage.fmap.to_payload()
    arrays = {f"pre.{k}": v for k, v in pre_arrays.items()}
    arrays.update({f"fmap.{k}": v for k, v in fm_arrays.items()})
    arrays[matrix_name] = matrix
    names = sorted(arrays)
    header = {
        "shape": [stage.plan.shape.channels, stage.plan.shape.height,
                  stage.plan.shape.width],
        "spec": asdict(stage.spec),
        "pre": pre_flags,
        "fmap": fm_header,
        "matrix": matrix_name,
        "array_names": names,
    }
    header.update(extra)
    w.json(header)
    w.u32(len(names))
    for name in names:
        w.text(name)
        w.array(np.asarray(arrays[name], dtype=np.float64))


def _read_stage_block(r: Reader, path):
    header = r.json()
    count = r.u32()
    arrays = {}
    for _ in range(count):
        name = r.text()
        arrays[name] = r.array()
    spec = LayerSpec(**header["spec"])
    shape = ImageShape(*(int(v) for v in header["shape"]))
    plan = plan_patches(shape, spec.patch_side, spec.stride, spec.pad)
    pool = build_pool_matrix(plan, spec.pool_side, spec.pool_stride)
    pre = PatchPreprocessor.from_payload(
        header["pre"], {k[4:]: v for k, v in arrays.items()
                        if k.startswith("pre.")})
    fmap = feature_map_from_payload(
        header["fmap"], {k[5:]: v for k, v in arrays.items()
                         if k.startswith("fmap.")})
    stage = FeatureStage(spec, plan, pool, pre, fmap)
    matrix = arrays[header["matrix"]]
    return header, stage, matrix


def save_model(model: CcnnModel, path) -> None:
    """Write a model file (magic CCNN, version, layers, head, metadata,
    trailing CRC32)."""
    w = Writer()
    w.raw(MODEL_MAGIC)
    w.u16(MODEL_VERSION)
    w.u32(len(model.layers))
    for layer in model.layers:
        _stage_block(w, layer.stage, "U", layer.U, {"r": layer.r})
    _stage_block(w, model.head.stage, "A", model.head.A,
                 {"d2": model.head.d2})
    w.json(model.meta)
    with open(path, "wb") as fh:
        fh.write(w.finish_with_crc())


def load_model(path) -> CcnnModel:
    """Read a model file written by save_model.

    Raises FormatError on magic/version mismatch, truncation, or checksum
    failure.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    payload = checked_payload(data, MODEL_MAGIC, path)
    r = Reader(payload, path)
    version = r.u16()
    if version != MODEL_VERSION:
        raise FormatError(
            f"{path}: unsupported format version {version}; this build "
            f"reads version {MODEL_VERSION}"
        )
    n_layers = r.u32()
    layers = []
    for _ in range(n_layers):
        _, stage, U = _read_stage_block(r, path)
        layers.append(CcnnLayer(stage, U))
    head_header, head_stage, A = _read_stage_block(r, path)
    head = CcnnHead(head_stage, A, int(head_header["d2"]))
    meta = r.json()
    if not r.done():
        raise FormatError(f"{path}: trailing bytes after payload")
    return CcnnModel(layers, head, head.d2, meta)


def describe(model: CcnnModel) -> dict:
    """Structured summary used by inspection tooling."""
    layers = []
    for i, layer in enumerate(model.layers):
        st = layer.stage
        layers.append({
            "layer": i + 1,
            "input_shape": [st.plan.shape.channels, st.plan.shape.height,
                            st.plan.shape.width],
            "patch_side": st.plan.patch_side,
            "stride": st.plan.stride,
            "pad": st.plan.pad,
            "grid": [st.plan.grid_h, st.plan.grid_w],
            "pooled_grid": [st.pool.pooled_h, st.pool.pooled_w],
            "kernel": st.spec.kernel,
            "features": st.spec.features,
            "m": st.n_features,
            "r": layer.r,
        })
    s = np.linalg.svd(model.head.A, compute_uv=False)
    top = float(s.max()) if s.size else 0.0
    return {
        "layers": layers,
        "d2": model.d2,
        "head": {
            "shape": list(model.head.A.shape),
            "singular_values": [float(v) for v in s[:20]],
            "nuclear_norm": float(s.sum()),
            "spectral_norm": top,
            "frobenius_norm": float(np.sqrt(np.sum(s * s))),
            "effective_rank": float(s.sum() / top) if top > 0 else float("nan"),
        },
    }
