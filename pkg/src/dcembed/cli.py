"""Command-line interface.

Commands: synth, train, eval, ablate, report. Exit codes: 0 success,
2 configuration error, 3 data/checkpoint error, 4 unexpected runtime
error. Every command validates its inputs completely before writing
anything, so a failed invocation never leaves a partial run directory.
The environment variable DCE_THREADS caps embedding parallelism (default
1; any value yields identical results).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from .config import (
    apply_overrides,
    build_train_config,
    default_config,
    load_config,
    to_jsonable,
)
from .dataset import SynthSpec, generate_synthetic, load_dataset, save_dataset
from .embedding import embed_dataset
from .errors import CheckpointError, ConfigError, DataError
from .metrics import evaluate, negative_distance_histograms
from .partition import nearest_centroid_assignment
from .trainer import TrainLog, Trainer, build_model, load_checkpoint


def _parse_ks(text: str) -> tuple:
    try:
        ks = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"--ks expects comma-separated integers, got {text!r}")
    if not ks or min(ks) < 1:
        raise ConfigError(f"--ks values must be >= 1, got {text!r}")
    return ks


def _parse_seeds(text: str) -> list:
    try:
        seeds = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}")
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def _load_datasets(cfg: dict):
    """Training and evaluation datasets per the data.* keys."""
    if not cfg["data.train"]:
        raise ConfigError("data.train is required (path to a dataset file)")
    train_ds = load_dataset(cfg["data.train"], format=cfg["data.format"])
    if cfg["data.eval"]:
        eval_ds = load_dataset(cfg["data.eval"], format=cfg["data.format"])
        if eval_ds.m != train_ds.m:
            raise DataError(
                f"eval dataset has {eval_ds.m} features, train has {train_ds.m}"
            )
    else:
        eval_ds = train_ds
    return train_ds, eval_ds


def _compose_config(args) -> dict:
    cfg = load_config(args.config) if args.config else default_config()
    cfg = apply_overrides(cfg, args.set)
    if getattr(args, "data", None):
        cfg["data.train"] = args.data
    if getattr(args, "eval_data", None):
        cfg["data.eval"] = args.eval_data
    if getattr(args, "seed", None) is not None:
        cfg["train.seed"] = args.seed
    return cfg


# ---------------- synth ----------------

def cmd_synth(args) -> int:
    spec = SynthSpec(
        num_modes=args.modes, classes_per_mode=args.classes_per_mode,
        samples_per_class=args.samples_per_class, feature_dim=args.dim,
        mode_separation=args.separation, class_spread=args.spread,
        noise_sigma=args.sigma, seed=args.seed,
        subspace_dim=args.subspace_dim,
    )
    ds = generate_synthetic(spec)  # validates the spec before any file I/O
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    sidecar = out.with_suffix(".json")
    if sidecar == out:
        sidecar = Path(str(out) + ".meta.json")
    _write_json(sidecar, dataclasses.asdict(spec))
    print(f"wrote {ds.n} samples x {ds.m} features to {out}")
    return 0


# ---------------- train ----------------

def cmd_train(args) -> int:
    run_dir = Path(args.run_dir)
    if args.resume:
        snapshot = run_dir / "config.json"
        if not snapshot.exists():
            raise ConfigError(f"cannot resume: {snapshot} does not exist")
        cfg = load_config(snapshot)
        latest = run_dir / "checkpoints" / "latest.npz"
        train_cfg = build_train_config(cfg)
        train_ds, eval_ds = _load_datasets(cfg)
        trainer = Trainer.resume(latest, train_ds, train_cfg, eval_ds=eval_ds)
        if trainer.stage == "done":
            print(f"{run_dir}: run already complete")
            return 0
    else:
        cfg = _compose_config(args)
        train_cfg = build_train_config(cfg)
        train_ds, eval_ds = _load_datasets(cfg)
        model = build_model(train_ds.m, train_cfg)
        trainer = Trainer(train_ds, model, train_cfg, eval_ds=eval_ds)
        # all validation passed: the run directory may now be created,
        # snapshot first so the run is self-describing
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "config.json", to_jsonable(cfg))
    for sub in ("checkpoints", "logs", "reports"):
        (run_dir / sub).mkdir(exist_ok=True)
    trainer.checkpoint_dir = run_dir / "checkpoints"

    trainer.run(stop_after=args.stop_after)
    (run_dir / "logs" / "trainlog.jsonl").write_text(trainer.log.to_jsonl())

    if trainer.stage != "done":
        print(f"stopped after {trainer.next_epoch} epochs; resume with --resume")
        return 0
    report = evaluate(
        trainer.model, eval_ds.features, eval_ds.labels,
        ks=train_cfg.eval_ks, rng=trainer.rngs["eval"],
    )
    (run_dir / "reports" / "metrics.json").write_text(report.to_json())
    k0 = min(report.recall_at)
    print(f"done: recall@{k0}={report.recall_at[k0]:.4f} "
          f"nmi={report.nmi:.4f} ({run_dir})")
    return 0


# ---------------- eval ----------------

def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, format=args.format)
    model = state.build_model()
    if ds.m != model.in_dim:
        raise DataError(
            f"dataset has {ds.m} features but the checkpoint model "
            f"expects {model.in_dim}"
        )
    ks = _parse_ks(args.ks)
    rng = np.random.default_rng([args.seed, 3])

    emb = embed_dataset(model, ds.features)
    part = state.partition()
    if part is not None and part.centroids is not None:
        assignment = nearest_centroid_assignment(emb, part.centroids)
    else:
        assignment = np.zeros(ds.n, dtype=np.int64)
    report = evaluate(
        model, ds.features, ds.labels, ks=ks, rng=rng,
        diagnostics=args.diagnostics, partition=assignment if args.diagnostics else None,
    )
    hist = negative_distance_histograms(emb, ds.labels, assignment, rng=rng)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    _write_csv(out / "histograms.csv", hist.csv_rows())
    k0 = min(report.recall_at)
    print(f"recall@{k0}={report.recall_at[k0]:.4f} nmi={report.nmi:.4f} ({out})")
    return 0


# ---------------- ablate ----------------

ABLATION_VARIANTS = (
    ("baseline", {"train.n_learners": 1, "train.partition_mode": "none",
                  "train.split_embedding": False}),
    ("kmeans_nosplit", {"train.split_embedding": False}),
    ("random", {"train.partition_mode": "random"}),
    ("labels", {"train.partition_mode": "labels"}),
    ("full", {}),
)


def cmd_ablate(args) -> int:
    base = _compose_config(args)
    seeds = _parse_seeds(args.seeds)
    # validate every variant config before any training or file output
    variant_cfgs = {}
    for name, overrides in ABLATION_VARIANTS:
        cfg = dict(base)
        cfg.update(overrides)
        variant_cfgs[name] = cfg
        build_train_config(cfg)
    train_ds, eval_ds = _load_datasets(base)
    ks = tuple(k for k in base["eval.ks"] if k < eval_ds.n)
    if not ks:
        raise DataError(f"no eval.ks value below the eval set size {eval_ds.n}")

    results = {}
    for name, overrides in ABLATION_VARIANTS:
        per_seed = {}
        for seed in seeds:
            cfg = dict(variant_cfgs[name])
            cfg["train.seed"] = seed
            tc = build_train_config(cfg)
            trainer = Trainer(train_ds, build_model(train_ds.m, tc), tc)
            trainer.run()
            report = evaluate(trainer.model, eval_ds.features, eval_ds.labels,
                              ks=tc.eval_ks, rng=trainer.rngs["eval"])
            per_seed[str(seed)] = {str(k): float(v)
                                   for k, v in sorted(report.recall_at.items())}
            print(f"{name} seed={seed}: recall@{ks[0]}="
                  f"{per_seed[str(seed)][str(ks[0])]:.4f}")
        medians = {
            str(k): statistics.median(per_seed[str(s)][str(k)] for s in seeds)
            for k in ks
        }
        results[name] = {"overrides": overrides, "per_seed": per_seed,
                         "median_recall_at": medians}

    run_dir = Path(args.run_dir)
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", to_jsonable(base))
    _write_json(reports / "ablation.json",
                {"seeds": seeds, "ks": list(ks), "variants": results})
    rows = [["variant"] + [f"recall@{k}" for k in ks]]
    for name, _ in ABLATION_VARIANTS:
        rows.append([name] + [results[name]["median_recall_at"][str(k)] for k in ks])
    _write_csv(reports / "ablation.csv", rows)
    return 0


# ---------------- report ----------------

def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    log_path = run_dir / "logs" / "trainlog.jsonl"
    if not log_path.exists():
        raise DataError(f"no training log at {log_path}")
    log = TrainLog.from_jsonl(log_path.read_text())

    loss = [{"epoch": r["epoch"], "stage": r["stage"], "mean_loss": r["mean_loss"]}
            for r in log.of_kind("epoch")]
    recall = [
        {"epoch": r["epoch"], "stage": r["stage"], "k": int(k), "recall": v}
        for r in log.of_kind("eval")
        for k, v in sorted(r["recall_at"].items(), key=lambda kv: int(kv[0]))
    ]
    recluster = [{"epoch": r["epoch"], "total_iou": r["total_iou"],
                  "objective": r["objective"]}
                 for r in log.of_kind("recluster")]

    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    _write_json(reports / "curves.json",
                {"loss": loss, "recall": recall, "recluster": recluster})
    _write_csv(reports / "loss_curve.csv",
               [["epoch", "stage", "mean_loss"]]
               + [[r["epoch"], r["stage"], r["mean_loss"]] for r in loss])
    _write_csv(reports / "recall_curve.csv",
               [["epoch", "stage", "k", "recall"]]
               + [[r["epoch"], r["stage"], r["k"], r["recall"]] for r in recall])
    _write_csv(reports / "recluster_curve.csv",
               [["epoch", "total_iou", "objective"]]
               + [[r["epoch"], r["total_iou"], r["objective"]] for r in recluster])
    print(f"wrote curves for {len(loss)} epochs to {reports}")
    return 0


# ---------------- parser ----------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcembed",
        description="Divide-and-conquer metric embedding: train, evaluate, ablate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset file")
    synth.add_argument("--out", required=True, help="output dataset path")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--modes", type=int, default=SynthSpec.num_modes)
    synth.add_argument("--classes-per-mode", type=int,
                       default=SynthSpec.classes_per_mode)
    synth.add_argument("--samples-per-class", type=int,
                       default=SynthSpec.samples_per_class)
    synth.add_argument("--dim", type=int, default=SynthSpec.feature_dim)
    synth.add_argument("--separation", type=float,
                       default=SynthSpec.mode_separation)
    synth.add_argument("--spread", type=float, default=SynthSpec.class_spread)
    synth.add_argument("--sigma", type=float, default=SynthSpec.noise_sigma)
    synth.add_argument("--subspace-dim", type=int, default=None,
                       help="confine each mode's class offsets to a random "
                            "subspace of this width (default: isotropic)")
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser("train", help="run the training pipeline")
    train.add_argument("--run-dir", required=True)
    train.add_argument("--config", help="JSON config file with dotted keys")
    train.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key")
    train.add_argument("--data", help="training dataset path (data.train)")
    train.add_argument("--eval-data", help="evaluation dataset path (data.eval)")
    train.add_argument("--seed", type=int, help="override train.seed")
    train.add_argument("--resume", action="store_true",
                       help="continue from the run directory's latest checkpoint")
    train.add_argument("--stop-after", type=int,
                       help="pause after this many epochs (resumable)")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--format", default="binary", choices=("binary", "csv"))
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--ks", default="1,2,4,8")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--diagnostics", action="store_true",
                    help="include per-learner, prefix, and correlation metrics")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="compare grouping strategies")
    ab.add_argument("--run-dir", required=True)
    ab.add_argument("--config")
    ab.add_argument("--set", action="append", metavar="KEY=VALUE")
    ab.add_argument("--data")
    ab.add_argument("--eval-data")
    ab.add_argument("--seeds", default="0,1,2,3,4")
    ab.set_defaults(func=cmd_ablate)

    rep = sub.add_parser("report", help="emit plot-ready curves from a run")
    rep.add_argument("--run-dir", required=True)
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return 4


def entrypoint() -> None:
    sys.exit(main())
