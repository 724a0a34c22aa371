"""Dual-frequency graph recommender with behavior-guided candidate calibration."""

from .behavior import BehaviorModel, EaseResidual, RawCoocResidual, build_behavior_graph
from .calibrator import (
    CandidateSet,
    candidate_set,
    conservative_coeff,
    global_correction_score,
    inference_score,
    train_score,
)
from .config import Config, parse_config
from .data import (
    Dataset,
    FeatureMatrix,
    Interaction,
    Split,
    load_features,
    load_interactions,
    validate_split_integrity,
    write_features,
)
from .encoder import ChannelEmbeddings, ModelParams, channel_input, encode, init_params
from .fixture import make_planted
from .graphs import (
    GraphBundle,
    build_content_knn,
    build_multimodal_item_graph,
    build_normalized_bipartite,
)
from .metrics import MetricsReport, evaluate, ndcg_at, recall_at, stratify_items
from .scoring import ScoringModel
from .sparse import SparseGraph
from .spectral import BandSet, band_slices, base_score, fit_bands, fuse
from .trainer import TrainConfig, fit, load_checkpoint, sample_batch, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BandSet",
    "BehaviorModel",
    "CandidateSet",
    "ChannelEmbeddings",
    "Config",
    "Dataset",
    "EaseResidual",
    "FeatureMatrix",
    "GraphBundle",
    "Interaction",
    "MetricsReport",
    "ModelParams",
    "RawCoocResidual",
    "ScoringModel",
    "SparseGraph",
    "Split",
    "TrainConfig",
    "band_slices",
    "base_score",
    "build_behavior_graph",
    "build_content_knn",
    "build_multimodal_item_graph",
    "build_normalized_bipartite",
    "candidate_set",
    "channel_input",
    "conservative_coeff",
    "encode",
    "evaluate",
    "fit",
    "fit_bands",
    "fuse",
    "global_correction_score",
    "inference_score",
    "init_params",
    "load_checkpoint",
    "load_features",
    "load_interactions",
    "make_planted",
    "ndcg_at",
    "parse_config",
    "recall_at",
    "sample_batch",
    "save_checkpoint",
    "stratify_items",
    "train_score",
    "validate_split_integrity",
    "write_features",
]
