"""Divide-and-conquer metric learning.

The embedding layer is split into K slices ("learners"), the data into K
clusters; each learner trains on its own cluster, clusters are refreshed
and re-matched periodically, and the slices are merged and fine-tuned at
the end. DivideConquerEmbedding wraps the whole pipeline in a
scikit-learn style estimator; the dcembed command line exposes it for
file-based runs.
"""

from .dataset import (
    FeatureDataset,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_by_class,
)
from .embedding import EmbeddingModel, embed_dataset
from .errors import CheckpointError, ConfigError, DataError
from .estimator import DivideConquerEmbedding
from .losses import BetaParam, LossConfig, ProxyBank
from .metrics import MetricReport, evaluate
from .partition import Partition, kmeans, match_learners
from .sampling import BatchSpec
from .trainer import TrainConfig, Trainer, TrainLog, build_model, load_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BatchSpec",
    "BetaParam",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DivideConquerEmbedding",
    "EmbeddingModel",
    "FeatureDataset",
    "LossConfig",
    "MetricReport",
    "Partition",
    "ProxyBank",
    "SynthSpec",
    "TrainConfig",
    "TrainLog",
    "Trainer",
    "build_model",
    "embed_dataset",
    "evaluate",
    "generate_synthetic",
    "kmeans",
    "load_checkpoint",
    "load_dataset",
    "match_learners",
    "save_dataset",
    "split_by_class",
    "__version__",
]
