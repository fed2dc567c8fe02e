"""Koopman model averaging: learned linear embeddings, Bayesian weighting and control."""

from .averaging import (
    KmaResult,
    ModelEnsemble,
    WeightedModel,
    build_weighted_model,
    elpd,
    pseudo_bma_weights,
    rollout,
    run_kma,
)
from .control import MpcController, MpcSpec, closed_loop, design_lqr, solve_box_qp, solve_dare
from .dynamics import Dataset, SystemSpec, generate_dataset, make_system, simulate
from .edmd import LinearEmbeddingModel, MonomialFeatures, fit_model, least_squares
from .errors import ConfigError, DivergedError, KmaError, NotStabilizableError, RankDeficientWarning
from .features import FeatureMap, feature_backward, feature_forward, init_features
from .training import TrainConfig, TrainReport, train_base_model

__version__ = "0.1.0"
