"""Adaptive text / generated-image query fusion for interactive retrieval."""

from .estimators import AdaptiveFusion, CosineRetriever, StaticFusion, TextOnlyFusion
from .model import FusionConfig, FusionParams, count_params, fuse_forward, init_params, static_fusion
from .retrieval import EmbeddingIndex, build_index
from .synthgen import GenConfig, generate_corpus, generate_dialogues
from .training import TrainConfig, info_nce_loss, train

__version__ = "0.1.0"

__all__ = [
    "AdaptiveFusion",
    "CosineRetriever",
    "EmbeddingIndex",
    "FusionConfig",
    "FusionParams",
    "GenConfig",
    "StaticFusion",
    "TextOnlyFusion",
    "TrainConfig",
    "build_index",
    "count_params",
    "fuse_forward",
    "generate_corpus",
    "generate_dialogues",
    "info_nce_loss",
    "init_params",
    "static_fusion",
    "train",
]
