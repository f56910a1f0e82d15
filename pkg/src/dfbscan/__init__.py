"""Data-free backdoor scanning of classifier heads.

The scanner never runs inference: it reads a model's final-layer weights
and biases, derives 62 per-class anomaly indicators from them, and flags
models whose anomaly-score vector drifts away from a clean reference.
"""

from dfbscan.calibration import (
    ConfigSet,
    build_profile,
    clean_reference,
    f1_score,
    optimize_lambda,
    optimize_lambda_from_similarities,
)
from dfbscan.detector import (
    ClueProfile,
    DetectionReport,
    ReferenceFreeResult,
    anomaly_score,
    cosine_similarity,
    detect,
    detect_reference_free,
    load_profile,
    save_profile,
)
from dfbscan.errors import ScanError
from dfbscan.indicators import (
    ALL_INDICATORS,
    N_INDICATORS,
    Form,
    IndicatorId,
    IndicatorMatrix,
    Major,
    compute_indicator_matrix,
    extend_indicator,
    indicator_catalog,
    indicator_id,
    indicator_index,
    major_indicator,
)
from dfbscan.params import (
    FinalLayerParams,
    binary_size,
    load_final_layer,
    save_final_layer,
)
from dfbscan.selection import (
    FeatureTable,
    L1PathPoint,
    SelectionResult,
    featurize,
    rank_by_accuracy,
    rank_by_iforest,
    rank_by_mutual_info,
    rfe_ranking,
    select_l1_logistic,
    select_rfe,
    sweep_subset,
)
from dfbscan.synth import (
    Attack,
    SynthSpec,
    generate_benchmark,
    generate_clean,
    generate_model,
    inject,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_INDICATORS",
    "Attack",
    "ClueProfile",
    "ConfigSet",
    "DetectionReport",
    "FeatureTable",
    "FinalLayerParams",
    "Form",
    "IndicatorId",
    "IndicatorMatrix",
    "L1PathPoint",
    "Major",
    "N_INDICATORS",
    "ReferenceFreeResult",
    "ScanError",
    "SelectionResult",
    "SynthSpec",
    "anomaly_score",
    "binary_size",
    "build_profile",
    "clean_reference",
    "compute_indicator_matrix",
    "cosine_similarity",
    "detect",
    "detect_reference_free",
    "extend_indicator",
    "f1_score",
    "featurize",
    "generate_benchmark",
    "generate_clean",
    "generate_model",
    "indicator_catalog",
    "indicator_id",
    "indicator_index",
    "inject",
    "load_final_layer",
    "load_profile",
    "major_indicator",
    "optimize_lambda",
    "optimize_lambda_from_similarities",
    "rank_by_accuracy",
    "rank_by_iforest",
    "rank_by_mutual_info",
    "rfe_ranking",
    "save_final_layer",
    "save_profile",
    "select_l1_logistic",
    "select_rfe",
    "sweep_subset",
    "__version__",
]
