"""scikit-learn style front end for the divide-and-conquer embedding.

fit() runs the full pipeline (cluster, divided training, merge,
fine-tune); transform() returns merged unit-norm embeddings; score() is
Recall@1 under Euclidean distance.
"""

from __future__ import annotations

from typing import Optional

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .dataset import FeatureDataset
from .embedding import embed_dataset
from .losses import LossConfig
from .metrics import recall_at_k
from .sampling import BatchSpec
from .trainer import TrainConfig, Trainer, build_model
from .validation import check_feature_matrix, check_labels


class DivideConquerEmbedding(TransformerMixin, BaseEstimator):
    """Metric-learning transformer with a sliced, separately trained
    embedding layer.

    Parameters mirror TrainConfig; see the README for the training
    procedure. ``loss`` is one of triplet / margin / proxy_nca and
    ``sampler`` of semihard / distance_weighted / all / none (None picks
    the default for the loss).
    """

    def __init__(self, embedding_dim: int = 128, n_learners: int = 8,
                 recluster_period: int = 2, epochs: int = 40,
                 finetune_epochs: Optional[int] = None, loss: str = "margin",
                 alpha: float = 0.2, beta_init: float = 1.2,
                 beta_lr: float = 0.01, learning_rate: float = 0.01,
                 batch_size: int = 32, samples_per_class: int = 4,
                 sampler: Optional[str] = None, partition_mode: str = "kmeans",
                 split_embedding: bool = True, use_adapter: bool = True,
                 random_state: int = 0):
        self.embedding_dim = embedding_dim
        self.n_learners = n_learners
        self.recluster_period = recluster_period
        self.epochs = epochs
        self.finetune_epochs = finetune_epochs
        self.loss = loss
        self.alpha = alpha
        self.beta_init = beta_init
        self.beta_lr = beta_lr
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.samples_per_class = samples_per_class
        self.sampler = sampler
        self.partition_mode = partition_mode
        self.split_embedding = split_embedding
        self.use_adapter = use_adapter
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            n_learners=self.n_learners,
            recluster_period=self.recluster_period,
            epochs=self.epochs,
            finetune_epochs=self.finetune_epochs,
            embedding_dim=self.embedding_dim,
            use_adapter=self.use_adapter,
            loss=LossConfig(kind=self.loss, alpha=self.alpha,
                            beta_init=self.beta_init, beta_lr=self.beta_lr),
            batch=BatchSpec(batch_size=self.batch_size,
                            per_class=self.samples_per_class),
            learning_rate=self.learning_rate,
            seed=self.random_state,
            partition_mode=self.partition_mode,
            split_embedding=self.split_embedding,
            sampler=self.sampler,
        )

    def fit(self, X, y):
        X = check_feature_matrix(X, "X")
        y = check_labels(y, X.shape[0], "y")
        ds = FeatureDataset.from_arrays(X, y)
        cfg = self._train_config()
        model = build_model(ds.m, cfg)
        trainer = Trainer(ds, model, cfg)
        trainer.run()
        self.model_ = model
        self.train_log_ = trainer.log
        self.partition_ = trainer.partition
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this DivideConquerEmbedding instance is not fitted yet; "
                "call fit() first"
            )

    def transform(self, X):
        """Merged embeddings, one unit-length row per sample."""
        self._check_fitted()
        X = check_feature_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, fit saw {self.n_features_in_}"
            )
        return embed_dataset(self.model_, X)

    def score(self, X, y) -> float:
        """Recall@1 of the embedded X against labels y."""
        emb = self.transform(X)
        y = check_labels(y, emb.shape[0], "y")
        return recall_at_k(emb, y, ks=(1,))[1]
