"""Longitudinal lung-nodule malignancy classification from two CT time points
and clinical data: a global-local 3D encoder, dual feature graphs and a
cross-modal attention fusion stack.
"""

from .data import (
    ClinicalRecord,
    DatasetManifest,
    load_manifest,
    normalize_clinical,
    split_folds,
    synthesize_dataset,
)
from .glfe import GLFE, EncoderConfig
from .dualgraph import DualGraph, FeatureGraph
from .hcmgfm import HCMGFM, FusionConfig
from .metrics import Metrics, compute_auc, evaluate_metrics
from .model import DGSAN, ModelConfig, count_parameters, variant_config
from .training import (
    TrainConfig,
    evaluate,
    pretrain_glfe,
    run_ablation,
    run_cross_validation,
    train_dgsan,
)

__version__ = "0.1.0"
