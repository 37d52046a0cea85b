"""Convexified convolutional networks.

Nuclear-norm-constrained convex training of convolutional layers over
kernelized patch features, with filter retrieval and greedy stacking.
"""

__version__ = "0.1.0"

from .datasets import (
    CropView,
    Dataset,
    PlantedSpec,
    gen_planted,
    load_amat,
    load_cifar10,
    load_idx,
    load_idx_labels,
    random_crop,
    split,
    write_amat,
    write_cifar10,
    write_idx,
)
from .errors import ConfigError, DataError, FormatError, NumericalError
from .estimator import CCNNClassifier
from .kernels import (
    Activation,
    ExactKernelFeatures,
    IdentityFeatures,
    KernelSpec,
    NystromFeatures,
    RandomFourierFeatures,
    activation,
    c_sigma,
    kernel_eval,
    kernel_matrix,
)
from .model import (
    CcnnHead,
    CcnnLayer,
    CcnnModel,
    FeatureStage,
    LayerSpec,
    classify,
    convexify_on_features,
    describe,
    fit_stage,
    forward_batch,
    layer_forward,
    load_model,
    predict,
    predict_scores,
    radius_from_bounds,
    retrieve_filters,
    save_model,
    train_multi_layer,
    train_two_layer,
    validate_stack,
)
from .optimize import (
    EpochRecord,
    LossSpec,
    OptConfig,
    effective_rank,
    loss_and_grad,
    objective_grad,
    objective_value,
    project_frobenius,
    project_l1,
    project_nuclear,
    psgd,
    records_to_csv,
)
from .patches import (
    ImageShape,
    PatchPlan,
    PoolPlan,
    apply_pool,
    build_pool_matrix,
    extract_patches,
    extract_patches_batch,
    plan_patches,
)
from .preprocess import (
    PatchPreprocessor,
    PatchScaler,
    ZcaWhitener,
    global_contrast_normalize,
    local_contrast_normalize,
    unit_sphere_normalize,
)
from .serialize import load_features, save_features

__all__ = [
    "__version__",
    "Activation", "CCNNClassifier", "CcnnHead", "CcnnLayer", "CcnnModel",
    "ConfigError", "CropView", "DataError", "Dataset", "EpochRecord",
    "ExactKernelFeatures", "FeatureStage", "FormatError", "IdentityFeatures",
    "ImageShape", "KernelSpec", "LayerSpec", "LossSpec", "NumericalError",
    "NystromFeatures", "OptConfig", "PatchPlan", "PatchPreprocessor",
    "PatchScaler", "PlantedSpec", "PoolPlan", "RandomFourierFeatures",
    "ZcaWhitener", "activation", "apply_pool", "build_pool_matrix",
    "c_sigma", "classify", "convexify_on_features", "describe",
    "effective_rank", "extract_patches", "extract_patches_batch",
    "fit_stage", "forward_batch", "gen_planted", "global_contrast_normalize",
    "kernel_eval", "kernel_matrix", "layer_forward", "load_amat",
    "load_cifar10", "load_features", "load_idx", "load_idx_labels",
    "load_model", "local_contrast_normalize", "loss_and_grad",
    "objective_grad", "objective_value", "plan_patches", "predict",
    "predict_scores", "project_frobenius", "project_l1", "project_nuclear",
    "psgd", "radius_from_bounds", "random_crop", "records_to_csv",
    "retrieve_filters", "save_features", "save_model", "split",
    "train_multi_layer", "train_two_layer", "unit_sphere_normalize",
    "validate_stack", "write_amat", "write_cifar10", "write_idx",
]
