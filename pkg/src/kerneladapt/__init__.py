"""Reconstruction-kernel domain adaptation lab.

Synthesizes paired smooth/sharp CT-like slices through filtered
backprojection, trains a residual U-Net lesion segmenter, and benchmarks
adaptation methods (reconstruction-space augmentation, adversarial feature
alignment, feature/prediction consistency) under one evaluation harness.
"""

from .adapt import (
    METHODS,
    TrainConfig,
    TrainData,
    f_consistency_loss,
    lambda_schedule,
    p_consistency_loss,
    predict_probs,
    train,
)
from .datagen import (
    DataConfig,
    DatasetBundle,
    PhantomConfig,
    build_datasets,
    generate_phantom,
    load_bundle,
    preprocess,
    save_bundle,
    split_folds,
    synthesize_domain_pair,
)
from .metrics import (
    MetricsReport,
    consistency_dice,
    cross_validate,
    dice,
    evaluate_bundle,
    wilcoxon_one_sided,
)
from .recon import KernelSpec, Sinogram, fbp_augment, kernel_response, radon, reconstruct
from .segnet import (
    ArchConfig,
    DomainDiscriminator,
    FeatureAggregator,
    ModelBundle,
    ResUNet,
    grad_reverse,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "DataConfig",
    "DatasetBundle",
    "DomainDiscriminator",
    "FeatureAggregator",
    "KernelSpec",
    "METHODS",
    "MetricsReport",
    "ModelBundle",
    "PhantomConfig",
    "ResUNet",
    "Sinogram",
    "TrainConfig",
    "TrainData",
    "build_datasets",
    "consistency_dice",
    "cross_validate",
    "dice",
    "evaluate_bundle",
    "f_consistency_loss",
    "fbp_augment",
    "generate_phantom",
    "grad_reverse",
    "kernel_response",
    "lambda_schedule",
    "load_bundle",
    "load_checkpoint",
    "p_consistency_loss",
    "predict_probs",
    "preprocess",
    "radon",
    "reconstruct",
    "save_bundle",
    "save_checkpoint",
    "split_folds",
    "synthesize_domain_pair",
    "train",
    "wilcoxon_one_sided",
    "__version__",
]
