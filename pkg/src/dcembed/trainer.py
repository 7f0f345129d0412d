"""Training orchestration: divided stage, re-clustering with learner
matching, merge + fine-tune stage, checkpointing, logging.

Determinism contract: a run is fully determined by (dataset, config). Four
independent RNG streams are derived from the seed -- model init [seed, 0],
clustering [seed, 1], batches [seed, 2], evaluation [seed, 3] -- so that
e.g. re-clustering never shifts the batch sequence, and a K=1 split run is
bit-for-bit identical to the unsplit baseline.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import FeatureDataset
from .embedding import EmbeddingModel, embed_dataset
from .errors import CheckpointError, ConfigError, DataError
from .losses import BetaParam, LossConfig, ProxyBank, batch_loss
from .metrics import evaluate
from .optim import AdamGroup
from .partition import (
    Partition,
    iou_matrix,
    kmeans,
    label_partition,
    match_learners,
    random_partition,
)
from .sampling import BatchSpec, build_batch, mine, sample_cluster

log = logging.getLogger(__name__)

PARTITION_MODES = ("kmeans", "random", "labels", "none")
CHECKPOINT_VERSION = 1
ADAPTER_LR_SCALE = 0.1
DEFAULT_SAMPLERS = {
    "margin": "distance_weighted",
    "triplet": "semihard",
    "proxy_nca": "none",
}


@dataclass(frozen=True)
class TrainConfig:
    """Everything that defines a training run besides the data."""

    n_learners: int = 8
    recluster_period: int = 2
    epochs: int = 40
    finetune_epochs: Optional[int] = None  # None: 10% of epochs
    embedding_dim: int = 128
    use_adapter: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    batch: BatchSpec = field(default_factory=BatchSpec)
    learning_rate: float = 0.01
    seed: int = 0
    partition_mode: str = "kmeans"
    split_embedding: bool = True
    sampler: Optional[str] = None  # None: default for the loss kind
    lambda_cut: float = 1.4
    kmeans_max_iters: int = 100
    eval_ks: tuple = (1, 2, 4, 8)
    checkpoint_every: int = 1  # divided/finetune epochs; 0 disables

    def __post_init__(self):
        if self.n_learners < 1:
            raise ConfigError(f"n_learners must be >= 1, got {self.n_learners}")
        if self.recluster_period < 1:
            raise ConfigError(
                f"recluster_period must be >= 1, got {self.recluster_period}"
            )
        if self.epochs < 0 or (self.finetune_epochs or 0) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if self.split_embedding and self.embedding_dim % self.n_learners != 0:
            raise ConfigError(
                f"embedding_dim ({self.embedding_dim}) must be divisible by "
                f"n_learners ({self.n_learners})"
            )
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.partition_mode not in PARTITION_MODES:
            raise ConfigError(
                f"partition_mode {self.partition_mode!r} not in {PARTITION_MODES}"
            )
        if self.partition_mode == "none" and self.n_learners != 1:
            raise ConfigError(
                f"partition_mode 'none' requires n_learners=1, got {self.n_learners}"
            )
        if self.kmeans_max_iters < 1:
            raise ConfigError("kmeans_max_iters must be >= 1")
        if not self.eval_ks or min(self.eval_ks) < 1:
            raise ConfigError(f"eval_ks must be positive, got {self.eval_ks}")

    @property
    def effective_sampler(self) -> str:
        return self.sampler if self.sampler is not None else DEFAULT_SAMPLERS[self.loss.kind]

    @property
    def effective_finetune_epochs(self) -> int:
        if self.finetune_epochs is not None:
            return self.finetune_epochs
        return int(round(0.1 * self.epochs))

    def to_jsonable(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


class TrainLog:
    """Ordered event records, serialized as JSON lines.

    Records carry no wall-clock fields, so two runs with the same config
    and seed produce byte-identical logs.
    """

    def __init__(self, records: Optional[list] = None):
        self.records = list(records) if records else []

    def append(self, kind: str, **fields) -> dict:
        rec = {"kind": kind, **fields}
        self.records.append(rec)
        return rec

    def of_kind(self, kind: str) -> list:
        return [r for r in self.records if r["kind"] == kind]

    def recluster_epochs(self) -> list:
        return [r["epoch"] for r in self.of_kind("recluster")]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


def build_model(in_dim: int, cfg: TrainConfig) -> EmbeddingModel:
    """Model for a config: K slices when splitting, one otherwise.

    Initialization draws from the model RNG stream [seed, 0] only.
    """
    n_slices = cfg.n_learners if cfg.split_embedding else 1
    return EmbeddingModel(
        in_dim, cfg.embedding_dim, n_slices, use_adapter=cfg.use_adapter,
        rng=np.random.default_rng([cfg.seed, 0]),
    )


class Trainer:
    """Owns all mutable training state for one run."""

    def __init__(self, ds: FeatureDataset, model: EmbeddingModel,
                 cfg: TrainConfig, eval_ds: Optional[FeatureDataset] = None):
        if model.in_dim != ds.m:
            raise DataError(
                f"model expects {model.in_dim}-dim features, dataset has {ds.m}"
            )
        if model.embed_dim != cfg.embedding_dim:
            raise ConfigError(
                f"model embed_dim {model.embed_dim} != config embedding_dim "
                f"{cfg.embedding_dim}"
            )
        expected = cfg.n_learners if cfg.split_embedding else 1
        if model.n_slices != expected:
            raise ConfigError(
                f"model has {model.n_slices} slices, config requires {expected}"
            )
        self.ds = ds
        self.model = model
        self.cfg = cfg
        self.eval_ds = eval_ds
        self.log = TrainLog()
        self.rngs = {
            "cluster": np.random.default_rng([cfg.seed, 1]),
            "batch": np.random.default_rng([cfg.seed, 2]),
            "eval": np.random.default_rng([cfg.seed, 3]),
        }
        self.opt = AdamGroup(lr=cfg.learning_rate)
        self.beta_opt = AdamGroup(lr=cfg.loss.beta_lr)
        self.proxy_opt = AdamGroup(lr=cfg.learning_rate)
        self.partition: Optional[Partition] = None
        self.betas = {}
        if cfg.loss.kind == "margin":
            for k in range(model.n_slices):
                self.betas[f"slice{k}"] = self._new_beta()
        self.proxies = {}
        self.stage = "divided"
        self.next_epoch = 0
        self.ft_done = 0
        self.checkpoint_dir: Optional[Path] = None

    def _new_beta(self) -> BetaParam:
        cfg = self.cfg
        classes = self.ds.classes if cfg.loss.beta_mode == "per_class" else None
        return BetaParam(cfg.loss.beta_init, cfg.loss.beta_mode, classes)

    # ---------------- partitioning ----------------

    def _full_embeddings(self) -> np.ndarray:
        return embed_dataset(self.model, self.ds.features)

    def _recluster(self, epoch: int) -> None:
        """Create (or refresh, kmeans mode only) the data partition."""
        cfg = self.cfg
        first = self.partition is None
        if cfg.partition_mode == "kmeans":
            emb = self._full_embeddings()
            new = kmeans(emb, cfg.n_learners, cfg.kmeans_max_iters,
                         self.rngs["cluster"], epoch=epoch)
            total_iou = None
            if not first:
                matched = match_learners(iou_matrix(self.partition, new))
                new = new.relabeled(matched.learner_for_cluster)
                total_iou = float(matched.total_iou)
            self.partition = new
            self.log.append(
                "recluster", epoch=epoch, mode=cfg.partition_mode,
                total_iou=total_iou, sizes=new.sizes().tolist(),
                objective=float(new.objectives[-1]) if new.objectives else None,
            )
        elif first:
            n = self.ds.n
            if cfg.partition_mode == "random":
                new = random_partition(n, cfg.n_learners, self.rngs["cluster"])
            elif cfg.partition_mode == "labels":
                new = label_partition(self.ds.labels, cfg.n_learners)
            else:  # none
                new = Partition(np.zeros(n, dtype=np.int64), 1)
            self.partition = new
            self.log.append(
                "recluster", epoch=epoch, mode=cfg.partition_mode,
                total_iou=None, sizes=new.sizes().tolist(), objective=None,
            )
        else:
            return  # fixed partition modes never refresh
        self._refresh_proxies()

    def _refresh_proxies(self) -> None:
        """Proxy banks restart from class centroids of the new clusters."""
        if self.cfg.loss.kind != "proxy_nca":
            return
        model, ds = self.model, self.ds
        if self.cfg.split_embedding and model.n_slices == self.partition.n_clusters:
            for k in range(model.n_slices):
                members = self.partition.members(k)
                emb = embed_dataset(model, ds.features[members], learner=k)
                self.proxies[f"slice{k}"] = ProxyBank.from_centroids(
                    emb, ds.labels[members]
                )
                self.proxy_opt.reset(f"proxy/slice{k}")
        else:
            emb = self._full_embeddings()
            self.proxies["slice0"] = ProxyBank.from_centroids(emb, ds.labels)
            self.proxy_opt.reset("proxy/slice0")

    # ---------------- core update ----------------

    def _train_step(self, indices: np.ndarray, labels: np.ndarray,
                    learner: Optional[int], slot: str):
        cfg = self.cfg
        x = self.ds.features[indices]
        emb = self.model.forward(x, learner)
        tuples = mine(
            cfg.effective_sampler, emb, labels,
            alpha=cfg.loss.alpha, lambda_cut=cfg.lambda_cut,
            rng=self.rngs["batch"],
        )
        res = batch_loss(
            emb, labels, cfg.loss, tuples,
            beta=self.betas.get(slot), proxies=self.proxies.get(slot),
        )
        if res.degenerate:
            return res
        grads = self.model.backward(x, res.grad_embeddings, learner)
        for k, g in grads.weight_slices.items():
            lo, hi = self.model.slice_bounds(k)
            self.opt.step(f"weight/slice{k}", self.model.weight[lo:hi], g)
        if grads.adapter_weight is not None:
            # the adapter stands in for a pretrained representation, so it
            # is fine-tuned an order of magnitude more gently than the
            # randomly initialized embedding layer
            self.opt.step("adapter_weight", self.model.adapter_weight,
                          grads.adapter_weight, lr_scale=ADAPTER_LR_SCALE)
            self.opt.step("adapter_bias", self.model.adapter_bias,
                          grads.adapter_bias, lr_scale=ADAPTER_LR_SCALE)
        if cfg.loss.kind == "margin":
            beta = self.betas[slot]
            self.beta_opt.step(f"beta/{slot}", beta.values, res.beta_grad)
        elif cfg.loss.kind == "proxy_nca":
            bank = self.proxies[slot]
            self.proxy_opt.step(f"proxy/{slot}", bank.vectors, res.proxy_grad)
            bank.renormalize()
        return res

    def _iterations_per_epoch(self) -> int:
        return math.ceil(self.ds.n / self.cfg.batch.batch_size)

    def _train_epoch(self, epoch: int) -> None:
        cfg = self.cfg
        part = self.partition
        sums = np.zeros(part.n_clusters)
        counts = np.zeros(part.n_clusters, dtype=int)
        degenerate = 0
        shrunk = 0
        for _ in range(self._iterations_per_epoch()):
            k = sample_cluster(part.n_clusters, self.rngs["batch"])
            members = part.members(k)
            batch = build_batch(members, self.ds.labels[members], cfg.batch,
                                self.rngs["batch"], cluster=k)
            shrunk += int(batch.shrunk)
            learner = k if cfg.split_embedding and self.model.n_slices > 1 else (
                0 if cfg.split_embedding else None)
            slot = f"slice{k if learner is not None else 0}"
            res = self._train_step(batch.indices, batch.labels, learner, slot)
            sums[k] += res.loss
            counts[k] += 1
            degenerate += int(res.degenerate)
        cluster_losses = [
            float(sums[k] / counts[k]) if counts[k] else None
            for k in range(part.n_clusters)
        ]
        self.log.append(
            "epoch", epoch=epoch, stage="divided",
            mean_loss=float(sums.sum() / max(1, counts.sum())),
            cluster_losses=cluster_losses,
            degenerate_batches=degenerate, shrunk_batches=shrunk,
            iterations=int(counts.sum()),
        )
        if degenerate:
            log.info("epoch %d: %d degenerate batches skipped", epoch, degenerate)

    def _evaluate(self, epoch: int, stage: str) -> None:
        if self.eval_ds is None:
            return
        report = evaluate(
            self.model, self.eval_ds.features, self.eval_ds.labels,
            ks=self.cfg.eval_ks, rng=self.rngs["eval"],
        )
        self.log.append(
            "eval", epoch=epoch, stage=stage,
            recall_at={str(k): float(v) for k, v in sorted(report.recall_at.items())},
            nmi=float(report.nmi),
            map=None if report.map_score is None else float(report.map_score),
        )

    # ---------------- stages ----------------

    def train(self, stop_after: Optional[int] = None) -> TrainLog:
        """Divided stage of the run (resumes from self.next_epoch)."""
        cfg = self.cfg
        if self.stage != "divided":
            return self.log
        if cfg.epochs == 0 and self.partition is None:
            self._recluster(0)
            self._evaluate(0, "divided")
        for epoch in range(self.next_epoch, cfg.epochs):
            if epoch % cfg.recluster_period == 0:
                self._recluster(epoch)
                self._evaluate(epoch, "divided")
            self._train_epoch(epoch)
            self.next_epoch = epoch + 1
            due = cfg.checkpoint_every and self.next_epoch % cfg.checkpoint_every == 0
            stopping = stop_after is not None and self.next_epoch >= stop_after
            if self.checkpoint_dir is not None and (due or stopping):
                self.save_checkpoint(
                    self.checkpoint_dir / f"epoch{self.next_epoch:04d}.npz"
                )
                self.save_checkpoint(self.checkpoint_dir / "latest.npz")
            if stopping:
                return self.log
        self.stage = "finetune"
        return self.log

    def finetune(self) -> TrainLog:
        """Merge stage: global batches, full embedding, all parameters."""
        cfg = self.cfg
        if self.stage == "done":
            return self.log
        if self.stage != "finetune":
            raise ConfigError("finetune requires a completed divided stage")
        total_ft = cfg.effective_finetune_epochs
        if self.ft_done == 0 and total_ft > 0:
            self._start_finetune()
        all_indices = np.arange(self.ds.n)
        for ft_epoch in range(self.ft_done, total_ft):
            epoch = cfg.epochs + ft_epoch
            loss_sum = 0.0
            degenerate = 0
            iters = self._iterations_per_epoch()
            for _ in range(iters):
                batch = build_batch(all_indices, self.ds.labels, cfg.batch,
                                    self.rngs["batch"])
                res = self._train_step(batch.indices, batch.labels, None,
                                       "finetune")
                loss_sum += res.loss
                degenerate += int(res.degenerate)
            self.log.append(
                "epoch", epoch=epoch, stage="finetune",
                mean_loss=loss_sum / max(1, iters),
                cluster_losses=None, degenerate_batches=degenerate,
                shrunk_batches=0, iterations=iters,
            )
            self.ft_done = ft_epoch + 1
            if (self.checkpoint_dir is not None and cfg.checkpoint_every
                    and self.ft_done % cfg.checkpoint_every == 0):
                self.save_checkpoint(self.checkpoint_dir / "latest.npz")
        if total_ft > 0:
            self._evaluate(cfg.epochs + total_ft, "finetune")
        self.stage = "done"
        return self.log

    def _start_finetune(self) -> None:
        """Merged-stage auxiliaries: mean-of-learners beta, global proxies."""
        cfg = self.cfg
        if cfg.loss.kind == "margin":
            merged = self._new_beta()
            merged.values[...] = np.mean(
                [self.betas[f"slice{k}"].values
                 for k in range(self.model.n_slices)], axis=0,
            )
            self.betas["finetune"] = merged
        elif cfg.loss.kind == "proxy_nca":
            emb = self._full_embeddings()
            self.proxies["finetune"] = ProxyBank.from_centroids(emb, self.ds.labels)
            self.proxy_opt.reset("proxy/finetune")

    def run(self, stop_after: Optional[int] = None) -> TrainLog:
        self.train(stop_after=stop_after)
        if self.stage == "finetune":
            self.finetune()
            if self.checkpoint_dir is not None and self.cfg.checkpoint_every:
                self.save_checkpoint(self.checkpoint_dir / "latest.npz")
        return self.log

    # ---------------- checkpointing ----------------

    def save_checkpoint(self, path) -> None:
        path = Path(path)
        arrays = {}
        for name, arr in self.model.state_arrays().items():
            arrays[f"param/{name}"] = arr
        for gname, group in (("opt", self.opt), ("beta_opt", self.beta_opt),
                             ("proxy_opt", self.proxy_opt)):
            for key, st in group.states.items():
                arrays[f"adam/{gname}/{key}/m"] = st.m
                arrays[f"adam/{gname}/{key}/v"] = st.v
        for slot, beta in self.betas.items():
            arrays[f"beta/{slot}/values"] = beta.values
            if beta.classes is not None:
                arrays[f"beta/{slot}/classes"] = beta.classes
        for slot, bank in self.proxies.items():
            arrays[f"proxy/{slot}/classes"] = bank.classes
            arrays[f"proxy/{slot}/vectors"] = bank.vectors
        part_meta = None
        if self.partition is not None:
            arrays["partition/assignment"] = self.partition.assignment
            if self.partition.centroids is not None:
                arrays["partition/centroids"] = self.partition.centroids
            part_meta = {
                "n_clusters": self.partition.n_clusters,
                "epoch_created": self.partition.epoch_created,
                "objectives": list(self.partition.objectives),
            }
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_jsonable(),
            "model": {
                "in_dim": self.model.in_dim,
                "embed_dim": self.model.embed_dim,
                "n_slices": self.model.n_slices,
                "use_adapter": self.model.use_adapter,
                "hidden_dim": self.model.hidden_dim,
            },
            "stage": self.stage,
            "next_epoch": self.next_epoch,
            "ft_done": self.ft_done,
            "adam_t": {
                gname: {key: st.t for key, st in group.states.items()}
                for gname, group in (("opt", self.opt), ("beta_opt", self.beta_opt),
                                     ("proxy_opt", self.proxy_opt))
            },
            "beta_modes": {slot: b.mode for slot, b in self.betas.items()},
            "rng": {name: g.bit_generator.state for name, g in self.rngs.items()},
            "partition": part_meta,
            "log": self.log.records,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def resume(cls, path, ds: FeatureDataset, cfg: TrainConfig,
               eval_ds: Optional[FeatureDataset] = None) -> "Trainer":
        """Rebuild a trainer mid-run from a checkpoint file."""
        state = load_checkpoint(path)
        saved_cfg = state.meta["config"]
        current = cfg.to_jsonable()
        if saved_cfg != current:
            diffs = [
                f"{key}: checkpoint {saved_cfg.get(key)!r} vs current {current.get(key)!r}"
                for key in sorted(set(saved_cfg) | set(current))
                if saved_cfg.get(key) != current.get(key)
            ]
            raise CheckpointError(
                "checkpoint config does not match: " + "; ".join(diffs)
            )
        model = state.build_model()
        trainer = cls(ds, model, cfg, eval_ds=eval_ds)
        meta = state.meta
        trainer.stage = meta["stage"]
        trainer.next_epoch = meta["next_epoch"]
        trainer.ft_done = meta["ft_done"]
        trainer.log = TrainLog(meta["log"])
        for name, g in trainer.rngs.items():
            g.bit_generator.state = meta["rng"][name]
        groups = {"opt": trainer.opt, "beta_opt": trainer.beta_opt,
                  "proxy_opt": trainer.proxy_opt}
        for gname, ts in meta["adam_t"].items():
            for key, t in ts.items():
                st = groups[gname].state_for(key, state.arrays[f"adam/{gname}/{key}/m"])
                st.m = state.arrays[f"adam/{gname}/{key}/m"].copy()
                st.v = state.arrays[f"adam/{gname}/{key}/v"].copy()
                st.t = t
        trainer.betas = {}
        for slot, mode in meta["beta_modes"].items():
            values = state.arrays[f"beta/{slot}/values"]
            classes = state.arrays.get(f"beta/{slot}/classes")
            beta = BetaParam(float(values[0]), mode, classes)
            beta.values = values.copy()
            trainer.betas[slot] = beta
        trainer.proxies = {}
        for slot in _proxy_slots(state.arrays):
            vectors = state.arrays[f"proxy/{slot}/vectors"]
            bank = ProxyBank(state.arrays[f"proxy/{slot}/classes"], vectors)
            # the constructor renormalizes; restore the saved bits exactly
            bank.vectors[...] = vectors
            trainer.proxies[slot] = bank
        trainer.partition = state.partition()
        return trainer


def _proxy_slots(arrays: dict) -> list:
    return sorted({
        name.split("/")[1] for name in arrays
        if name.startswith("proxy/") and name.endswith("/classes")
    })


@dataclass(frozen=True)
class CheckpointState:
    """Raw contents of a checkpoint file."""

    meta: dict
    arrays: dict

    def build_model(self) -> EmbeddingModel:
        m = self.meta["model"]
        model = EmbeddingModel(
            m["in_dim"], m["embed_dim"], m["n_slices"],
            use_adapter=m["use_adapter"],
            adapter_dim=m["hidden_dim"] if m["use_adapter"] else None,
            rng=np.random.default_rng(0),
        )
        params = {
            name: self.arrays[f"param/{name}"]
            for name in model.state_arrays()
        }
        model.load_state_arrays(params)
        return model

    def partition(self) -> Optional[Partition]:
        pm = self.meta["partition"]
        if pm is None:
            return None
        return Partition(
            assignment=self.arrays["partition/assignment"].copy(),
            n_clusters=pm["n_clusters"],
            centroids=self.arrays.get("partition/centroids"),
            epoch_created=pm["epoch_created"],
            objectives=tuple(pm["objectives"]),
        )

    def config(self) -> dict:
        return self.meta["config"]


def load_checkpoint(path) -> CheckpointState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: data[name].copy() for name in data.files}
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"{path}: missing metadata entry")
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {meta.get('version')}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    return CheckpointState(meta=meta, arrays=arrays)


def train(ds: FeatureDataset, model: EmbeddingModel, cfg: TrainConfig,
          eval_ds: Optional[FeatureDataset] = None):
    """Divided-stage training; returns (model, TrainLog)."""
    trainer = Trainer(ds, model, cfg, eval_ds=eval_ds)
    trainer.train()
    return model, trainer.log


def finetune(ds: FeatureDataset, model: EmbeddingModel, cfg: TrainConfig,
             eval_ds: Optional[FeatureDataset] = None):
    """Standalone merge/fine-tune stage on an already trained model."""
    trainer = Trainer(ds, model, cfg, eval_ds=eval_ds)
    trainer.stage = "finetune"
    trainer.next_epoch = cfg.epochs
    trainer.finetune()
    return model, trainer.log


def train_nosplit_ablation(ds: FeatureDataset, model: EmbeddingModel,
                           cfg: TrainConfig,
                           eval_ds: Optional[FeatureDataset] = None):
    """Cluster-confined batches but full-embedding updates each step."""
    if cfg.split_embedding:
        raise ConfigError("no-split ablation requires split_embedding=False")
    return train(ds, model, cfg, eval_ds=eval_ds)
