"""Explainable recommendation: additive main effects and manifest feature
interactions fitted by small subnetworks, plus a group-constrained latent
factor block for what the features cannot express. Every prediction decomposes
exactly into named contributions, and global importance ratios attribute the
fitted variation across effects."""

from .clustering import Clustering, assign_cluster, kmeans
from .data import (
    CATEGORICAL,
    CLASSIFICATION,
    NUMERIC,
    REGRESSION,
    DataSplit,
    FeatureTable,
    ObservationSet,
    ScalingParams,
    encode_row,
    load_feature_table,
    load_observations,
    save_feature_table,
    save_observations,
    scale_features,
    split_observations,
)
from .errors import ValidationError
from .explain import (
    EffectCurve,
    ImportanceReport,
    InteractionSurface,
    group_interaction_matrix,
    group_profiles,
    importance_ratios,
    interaction_surface,
    local_explanation,
    main_effect_curve,
    write_report,
)
from .latent import LatentFactors, fit_latent
from .metrics import SvdBaseline, auc, baseline_svd, logloss, mae, rmse
from .model import FitConfig, GammliModel, PredictionResult, fit, load, save
from .simulate import (
    ColdSplit,
    SimulationConfig,
    SyntheticDataset,
    cold_start_split,
    generate,
    response_terms,
)
from .subnet import Subnet, TrainConfig, forward, init_subnet, train
from .tune import SearchSpace, TuneResult, build_tuner_context, coarse_to_fine_search

__version__ = "0.1.0"

__all__ = [
    "CATEGORICAL",
    "CLASSIFICATION",
    "NUMERIC",
    "REGRESSION",
    "Clustering",
    "ColdSplit",
    "DataSplit",
    "EffectCurve",
    "FeatureTable",
    "FitConfig",
    "GammliModel",
    "ImportanceReport",
    "InteractionSurface",
    "LatentFactors",
    "ObservationSet",
    "PredictionResult",
    "ScalingParams",
    "SearchSpace",
    "SimulationConfig",
    "Subnet",
    "SvdBaseline",
    "SyntheticDataset",
    "TrainConfig",
    "TuneResult",
    "ValidationError",
    "assign_cluster",
    "auc",
    "baseline_svd",
    "build_tuner_context",
    "coarse_to_fine_search",
    "cold_start_split",
    "encode_row",
    "fit",
    "fit_latent",
    "forward",
    "generate",
    "group_interaction_matrix",
    "group_profiles",
    "importance_ratios",
    "init_subnet",
    "interaction_surface",
    "kmeans",
    "load",
    "load_feature_table",
    "load_observations",
    "local_explanation",
    "logloss",
    "mae",
    "main_effect_curve",
    "response_terms",
    "rmse",
    "save",
    "save_feature_table",
    "save_observations",
    "scale_features",
    "split_observations",
    "train",
    "write_report",
]
