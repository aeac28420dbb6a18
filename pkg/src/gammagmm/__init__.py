"""gammagmm: posterior estimation of a dataset's contamination factor.

Builds an anomaly-score space from several unsupervised detectors, fits a
Dirichlet-process Gaussian mixture to it by variational inference, and chains
per-component anomalousness probabilities into a Monte Carlo posterior for
the proportion of anomalies. Classical threshold estimators and an evaluation
harness are included for benchmarking.
"""

__version__ = "0.1.0"

from .detectors import DetectorSpec, hbos_scores, iforest_scores, knn_scores, lof_scores
from .dpgmm import DpgmmConfig, FitDiagnostics, MixturePosterior, fit
from .gammapost import (
    CalibrationInfeasibleError,
    ComponentOrdering,
    GammaPosterior,
    SigmoidParams,
    calibrate,
    conditional_probability,
    estimate_posterior,
    joint_probabilities,
    order_components,
    point_estimate,
    representative_value,
    sample_gamma,
    truncate_conditionals,
)
from .scorespace import (
    RawDataset,
    ScoreMatrix,
    build_score_matrix,
    ingest_scores,
    load_dataset_csv,
    transform_matrix,
    transform_scores,
)
from .thresholds import ThresholdEstimate, estimate_all

__all__ = [
    "__version__",
    "DetectorSpec",
    "DpgmmConfig",
    "FitDiagnostics",
    "MixturePosterior",
    "CalibrationInfeasibleError",
    "ComponentOrdering",
    "GammaPosterior",
    "SigmoidParams",
    "RawDataset",
    "ScoreMatrix",
    "ThresholdEstimate",
    "build_score_matrix",
    "calibrate",
    "conditional_probability",
    "estimate_all",
    "estimate_posterior",
    "fit",
    "hbos_scores",
    "iforest_scores",
    "ingest_scores",
    "joint_probabilities",
    "knn_scores",
    "load_dataset_csv",
    "lof_scores",
    "order_components",
    "point_estimate",
    "representative_value",
    "sample_gamma",
    "transform_matrix",
    "transform_scores",
    "truncate_conditionals",
]
