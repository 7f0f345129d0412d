"""Flat dotted-key run configuration.

One declarative JSON file ({"train.epochs": 40, ...}) plus command-line
overrides (--set key=value). Every key is registered here with a type and
default, so unknown keys and bad values fail before any file is written.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .sampling import BatchSpec
from .trainer import TrainConfig


@dataclass(frozen=True)
class Field:
    kind: str  # int | float | bool | str | opt_int | opt_str | int_list
    default: object


FIELDS = {
    "train.n_learners": Field("int", 8),
    "train.recluster_period": Field("int", 2),
    "train.epochs": Field("int", 40),
    "train.finetune_epochs": Field("opt_int", None),
    "train.embedding_dim": Field("int", 128),
    "train.use_adapter": Field("bool", True),
    "train.learning_rate": Field("float", 0.01),
    "train.seed": Field("int", 0),
    "train.partition_mode": Field("str", "kmeans"),
    "train.split_embedding": Field("bool", True),
    "train.sampler": Field("opt_str", None),
    "train.lambda_cut": Field("float", 1.4),
    "train.kmeans_max_iters": Field("int", 100),
    "train.checkpoint_every": Field("int", 1),
    "loss.kind": Field("str", "margin"),
    "loss.alpha": Field("float", 0.2),
    "loss.beta_init": Field("float", 1.2),
    "loss.beta_lr": Field("float", 0.01),
    "loss.beta_mode": Field("str", "global"),
    "batch.size": Field("int", 32),
    "batch.per_class": Field("int", 4),
    "batch.strategy": Field("str", "balanced"),
    "eval.ks": Field("int_list", (1, 2, 4, 8)),
    "data.train": Field("opt_str", None),
    "data.eval": Field("opt_str", None),
    "data.format": Field("str", "binary"),
}


def default_config() -> dict:
    return {key: f.default for key, f in FIELDS.items()}


def coerce(key: str, value):
    """Check/convert one value for its registered field; strings from the
    command line are parsed, JSON-typed values are verified."""
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELDS[key].kind
    try:
        if kind in ("opt_int", "opt_str") and (
            value is None or (isinstance(value, str) and value.lower() in ("none", "null"))
        ):
            return None
        if kind in ("int", "opt_int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).lower()
            if text in ("true", "1", "yes"):
                return True
            if text in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if kind in ("str", "opt_str"):
            if not isinstance(value, str):
                raise ValueError(value)
            return value
        if kind == "int_list":
            if isinstance(value, str):
                value = [p for p in value.split(",") if p.strip()]
            return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"config key {key!r} expects {kind}, got {value!r}")


def load_config(path) -> dict:
    """Defaults overlaid with the JSON file at path (flat object only)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    cfg = default_config()
    for key, value in raw.items():
        cfg[key] = coerce(key, value)
    return cfg


def apply_overrides(cfg: dict, assignments) -> dict:
    """--set key=value pairs on top of cfg; returns a new dict."""
    out = dict(cfg)
    for text in assignments or ():
        key, sep, value = text.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {text!r} is not of the form key=value")
        out[key] = coerce(key, value)
    return out


def to_jsonable(cfg: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}


def build_train_config(cfg: dict) -> TrainConfig:
    """Assemble the typed TrainConfig; field errors become ConfigError."""
    try:
        loss = LossConfig(
            kind=cfg["loss.kind"], alpha=cfg["loss.alpha"],
            beta_init=cfg["loss.beta_init"], beta_lr=cfg["loss.beta_lr"],
            beta_mode=cfg["loss.beta_mode"],
        )
    except ValueError as exc:
        raise ConfigError(f"loss.*: {exc}") from exc
    batch = BatchSpec(
        batch_size=cfg["batch.size"], per_class=cfg["batch.per_class"],
        strategy=cfg["batch.strategy"],
    )
    return TrainConfig(
        n_learners=cfg["train.n_learners"],
        recluster_period=cfg["train.recluster_period"],
        epochs=cfg["train.epochs"],
        finetune_epochs=cfg["train.finetune_epochs"],
        embedding_dim=cfg["train.embedding_dim"],
        use_adapter=cfg["train.use_adapter"],
        loss=loss,
        batch=batch,
        learning_rate=cfg["train.learning_rate"],
        seed=cfg["train.seed"],
        partition_mode=cfg["train.partition_mode"],
        split_embedding=cfg["train.split_embedding"],
        sampler=cfg["train.sampler"],
        lambda_cut=cfg["train.lambda_cut"],
        kmeans_max_iters=cfg["train.kmeans_max_iters"],
        eval_ks=tuple(cfg["eval.ks"]),
        checkpoint_every=cfg["train.checkpoint_every"],
    )
