"""Anomalous change point detection via probabilistic predictive coding.

The pipeline encodes signal segments into a latent space, forecasts the
distribution of future latents with mean-variance heads, and scores how
well observations conform to those forecasts via chi-squared survival
probabilities of Mahalanobis distances.
"""

from .autodiff import NumericError, ShapeError, Tape, Tensor
from .conformance import (
    ConformanceReport,
    StepScore,
    chi2_survival,
    classify,
    log_likelihood,
    mahalanobis,
    probability_of_conformance,
    regularized_upper_gamma,
    score_sequence,
)
from .datagen import (
    Dataset,
    LabeledSequence,
    PropDataset,
    SineConfig,
    bounded_random_walk,
    gen_dataset,
    gen_frequency_grid,
    gen_prop_dataset,
    gen_prop_sample,
    gen_sine_signal,
    load_dataset,
    save_dataset,
    sequences_to_array,
)
from .errors import ConfigError, DataError
from .estimator import PpcDetector, batch_conformance
from .metrics import (
    ConfusionCounts,
    confusion,
    fit_gaussian,
    ks_uniformity,
    metrics_suite,
    pr_auc,
    roc_auc,
    select_threshold_max_f1,
)
from .model import (
    Forecast,
    PipelineConfig,
    PpcModel,
    build_pipeline,
    load_checkpoint,
    preset,
    save_checkpoint,
)
from .training import (
    RmsProp,
    TrainResult,
    joint_loss,
    mle_loss,
    recon_loss,
    train,
    warmup_loss,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConformanceReport", "ConfusionCounts", "DataError",
    "Dataset", "Forecast", "LabeledSequence", "NumericError",
    "PipelineConfig", "PpcDetector", "PpcModel", "PropDataset", "RmsProp",
    "ShapeError", "SineConfig", "StepScore", "Tape", "Tensor", "TrainResult",
    "batch_conformance", "bounded_random_walk", "build_pipeline",
    "chi2_survival", "classify", "confusion", "fit_gaussian", "gen_dataset",
    "gen_frequency_grid", "gen_prop_dataset", "gen_prop_sample",
    "gen_sine_signal", "joint_loss", "ks_uniformity", "load_checkpoint",
    "load_dataset", "log_likelihood", "mahalanobis", "metrics_suite",
    "mle_loss", "pr_auc", "preset", "probability_of_conformance",
    "recon_loss", "regularized_upper_gamma", "roc_auc", "save_checkpoint",
    "save_dataset", "score_sequence", "select_threshold_max_f1",
    "sequences_to_array", "train",
    "warmup_loss",
]
