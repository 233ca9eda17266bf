"""Operator commands: train, eval, benchmark, score, plot.

One JSON config document describes a run (dataset, architecture, held-out
class, training overrides); flags override file values. Every command copies
the resolved config into its output directory, and config plus seed fully
determine all outputs. Exit codes: 0 success, 2 config/user error, 3 numeric
divergence.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import pathlib
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as data_mod
from . import scoring as scoring_mod
from . import svg as svg_mod
from .autodiff import DimensionError
from .data import DataError, DatasetSplit, LabeledImageSet
from .model import Autoencoder, CheckpointError, build_arch, load_checkpoint
from .training import (BalancerConfig, ConfigurationError, TrainConfig,
                       TrainingDivergenceError, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

DATASET_KINDS = ("synthetic", "mnist", "cifar10", "manifest")
ARCH_KINDS = ("mnist_like", "cifar_like")
PROFILES = ("desk", "full")

DESK_MAX_TRAIN = 2000
DESK_EPOCHS = 10
DESK_WARMUP_LR = 2e-3
DESK_ADV_LR = 5e-5
DESK_BALANCER = {"slope": 20.0, "ema_decay": 0.9, "enabled": True}


class CliConfigError(Exception):
    """Bad config file or flags; the message names the offending field."""


@dataclass
class RunConfig:
    dataset: dict
    arch: str = "mnist_like"
    anomaly_class: int | str = 0           # class index, or "all" for benchmark
    seed: int = 0
    profile: str = "desk"
    out: str = "runs/out"
    threshold_policy: str = "youden_j"
    image_channels: int | None = None
    bins: int = 20
    train: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise CliConfigError(message)


def load_run_config(path, overrides: dict) -> RunConfig:
    try:
        raw = json.loads(pathlib.Path(path).read_text())
    except FileNotFoundError:
        raise CliConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise CliConfigError(f"config {path}: invalid JSON ({err})")
    _require(isinstance(raw, dict), f"config {path}: top level must be an object")
    known = set(RunConfig.__dataclass_fields__)
    for key in raw:
        _require(key in known, f"config field {key!r} is not recognized")
    _require("dataset" in raw, "config field 'dataset' is required")
    cfg = RunConfig(**raw)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    _require(isinstance(cfg.dataset, dict), "config field 'dataset' must be an object")
    kind = cfg.dataset.get("kind")
    _require(kind in DATASET_KINDS,
             f"config field 'dataset.kind' must be one of {DATASET_KINDS}, got {kind!r}")
    if kind == "synthetic":
        for key in ("n_normal", "n_anomalous"):
            _require(isinstance(cfg.dataset.get(key), int) and cfg.dataset[key] >= 1,
                     f"config field 'dataset.{key}' must be a positive integer")
    elif kind == "mnist":
        for key in ("images", "labels"):
            _require(isinstance(cfg.dataset.get(key), str),
                     f"config field 'dataset.{key}' must be a path string")
    elif kind == "cifar10":
        batches = cfg.dataset.get("batches")
        _require(isinstance(batches, list) and batches,
                 "config field 'dataset.batches' must be a non-empty list of paths")
    elif kind == "manifest":
        for key in ("train", "test"):
            _require(isinstance(cfg.dataset.get(key), str),
                     f"config field 'dataset.{key}' must be a manifest path")
    _require(cfg.arch in ARCH_KINDS,
             f"config field 'arch' must be one of {ARCH_KINDS}, got {cfg.arch!r}")
    _require(cfg.profile in PROFILES,
             f"config field 'profile' must be one of {PROFILES}, got {cfg.profile!r}")
    _require(cfg.anomaly_class == "all" or isinstance(cfg.anomaly_class, int),
             "config field 'anomaly_class' must be an integer or 'all'")
    _require(isinstance(cfg.seed, int), "config field 'seed' must be an integer")
    _require(isinstance(cfg.bins, int) and cfg.bins >= 2,
             "config field 'bins' must be an integer >= 2")
    _require(isinstance(cfg.train, dict), "config field 'train' must be an object")
    unknown = set(cfg.train) - {f for f in TrainConfig.__dataclass_fields__} - {"balancer"}
    _require(not unknown, f"config field 'train' has unknown keys: {sorted(unknown)}")


def resolve_train_config(cfg: RunConfig) -> tuple[TrainConfig, int | None]:
    """Profile defaults overlaid with explicit 'train' values.

    Returns the training config and the training-set cap (desk profile only).
    The desk profile swaps the full-scale rate schedule for one that can
    converge in a handful of epochs: a fast pure-reconstruction warmup and a
    short, gently-stepped adversarial tail with a stiff balancer.
    """
    t = dict(cfg.train)
    balancer_overrides = t.pop("balancer", {})
    if cfg.profile == "full":
        resolved = TrainConfig(seed=cfg.seed)
        max_train = None
        balancer = BalancerConfig()
    else:
        epochs = int(t.get("epochs", DESK_EPOCHS))
        adv_tail = max(2, epochs // 6)
        resolved = TrainConfig(
            base_lr=DESK_ADV_LR,
            warmup_lr=DESK_WARMUP_LR,
            epochs=epochs,
            seed=cfg.seed,
            adv_start_epoch=max(epochs - adv_tail, 0),
        )
        max_train = DESK_MAX_TRAIN
        balancer = BalancerConfig(**DESK_BALANCER)
    for key, value in t.items():
        setattr(resolved, key, value)
    for key, value in balancer_overrides.items():
        if key not in BalancerConfig.__dataclass_fields__:
            raise CliConfigError(f"config field 'train.balancer.{key}' is not recognized")
        setattr(balancer, key, value)
    resolved.balancer = balancer
    return resolved, max_train


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def _pad_digits_to_32(ds: LabeledImageSet) -> LabeledImageSet:
    n, c, h, w = ds.images.shape
    if (h, w) == (32, 32):
        return ds
    images = np.stack([
        np.stack([data_mod.to_32(img[ch]) for ch in range(c)])
        for img in ds.images
    ]).astype(np.float32)
    return LabeledImageSet(images, ds.class_labels, ds.source, ds.normalized, ds.ids)


def load_class_dataset(cfg: RunConfig) -> LabeledImageSet:
    """Load + normalize the class-labeled dataset named by the config."""
    kind = cfg.dataset["kind"]
    if kind == "synthetic":
        return data_mod.synthetic_shapes(cfg.dataset["n_normal"], cfg.dataset["n_anomalous"],
                                         seed=cfg.dataset.get("seed", cfg.seed))
    if kind == "mnist":
        raw = data_mod.load_idx(cfg.dataset["images"], cfg.dataset["labels"])
        return _pad_digits_to_32(data_mod.normalize_images(raw))
    if kind == "cifar10":
        raw = data_mod.load_cifar10(cfg.dataset["batches"])
        return data_mod.normalize_images(raw)
    raise CliConfigError(f"dataset kind {kind!r} does not provide class labels")


def build_split(cfg: RunConfig, anomaly_class: int | None = None) -> DatasetSplit:
    if cfg.dataset["kind"] == "manifest":
        train_set = data_mod.load_manifest(cfg.dataset["train"])
        if int((train_set.class_labels != 0).sum()):
            raise CliConfigError("training manifest must contain only normal slices")
        test_set = data_mod.load_manifest(cfg.dataset["test"])
        return DatasetSplit(train=train_set, test=test_set,
                            test_anomalous=(test_set.class_labels == 1),
                            anomaly_class=1, split_seed=cfg.seed)
    held_out = cfg.anomaly_class if anomaly_class is None else anomaly_class
    if held_out == "all":
        raise CliConfigError("anomaly_class 'all' is only valid for the benchmark command")
    _, max_train = resolve_train_config(cfg)
    return data_mod.leave_one_out_split(load_class_dataset(cfg), int(held_out),
                                        seed=cfg.seed, max_train=max_train)


def _arch_for(cfg: RunConfig):
    return build_arch(cfg.arch, image_channels=cfg.image_channels)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def write_config_copy(cfg: RunConfig, out_dir: pathlib.Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, out_dir: pathlib.Path) -> int:
    split = build_split(cfg)
    train_cfg, _ = resolve_train_config(cfg)
    arch = _arch_for(cfg)
    write_config_copy(cfg, out_dir)
    train(split, arch, train_cfg, out_dir=out_dir)
    return EXIT_OK


def _score_split(checkpoint, split: DatasetSplit) -> list[scoring_mod.ScoredSample]:
    test = split.test
    n, c, h, w = test.images.shape
    arch = checkpoint.arch
    if c != arch.image_channels or h != arch.image_size or w != arch.image_size:
        raise CliConfigError(
            f"checkpoint expects {arch.image_channels}x{arch.image_size}x"
            f"{arch.image_size} images but the dataset provides {c}x{h}x{w}")
    scores = scoring_mod.anomaly_scores(test.images, checkpoint.generator,
                                        checkpoint.discriminator)
    ids = test.ids if test.ids is not None else [str(i) for i in range(n)]
    return [
        scoring_mod.ScoredSample(
            id=ids[i], score=float(scores[i]),
            label=scoring_mod.ANOMALOUS if split.test_anomalous[i] else scoring_mod.NORMAL)
        for i in range(n)
    ]


def _write_eval_outputs(samples, cfg: RunConfig, out_dir: pathlib.Path,
                        write_scores: bool = True) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    if write_scores:
        scoring_mod.write_scores_csv(out_dir / "scores.csv", samples)
    curve = scoring_mod.roc_curve(samples)
    scoring_mod.write_roc_csv(out_dir / "roc.csv", curve)
    edges, n_counts, a_counts = scoring_mod.score_histogram(samples, cfg.bins)
    with open(out_dir / "hist.csv", "w") as fh:
        fh.write("bin_lo,bin_hi,normal_count,anomalous_count\n")
        for i in range(len(n_counts)):
            fh.write(f"{edges[i]!r},{edges[i + 1]!r},{n_counts[i]},{a_counts[i]}\n")
    summary = {
        "auroc": curve.auroc,
        "n_normal": sum(1 for s in samples if s.label == scoring_mod.NORMAL),
        "n_anomalous": sum(1 for s in samples if s.label == scoring_mod.ANOMALOUS),
        "phi_youden": scoring_mod.select_threshold(curve, "youden_j"),
    }
    if cfg.threshold_policy != "youden_j":
        summary["phi_selected"] = scoring_mod.select_threshold(curve, cfg.threshold_policy)
        summary["threshold_policy"] = cfg.threshold_policy
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_eval(cfg: RunConfig, out_dir: pathlib.Path, checkpoint_path,
             from_scores=None) -> int:
    write_config_copy(cfg, out_dir)
    if from_scores is not None:
        samples = scoring_mod.read_scores_csv(from_scores)
        _write_eval_outputs(samples, cfg, out_dir, write_scores=False)
        return EXIT_OK
    checkpoint = load_checkpoint(checkpoint_path)
    samples = _score_split(checkpoint, build_split(cfg))
    _write_eval_outputs(samples, cfg, out_dir)
    return EXIT_OK


def cmd_score(cfg: RunConfig, out_dir: pathlib.Path, checkpoint_path) -> int:
    write_config_copy(cfg, out_dir)
    checkpoint = load_checkpoint(checkpoint_path)
    samples = _score_split(checkpoint, build_split(cfg))
    scoring_mod.write_scores_csv(out_dir / "scores.csv", samples)
    return EXIT_OK


def _benchmark_one_class(payload: dict) -> dict:
    """Train + eval one held-out class; runs in a worker process."""
    cfg = RunConfig(**payload["config"])
    klass = payload["anomaly_class"]
    out_dir = pathlib.Path(payload["out_dir"])
    started = time.monotonic()
    try:
        cfg.anomaly_class = klass
        split = build_split(cfg, anomaly_class=klass)
        train_cfg, _ = resolve_train_config(cfg)
        write_config_copy(cfg, out_dir)
        generator, discriminator, _ = train(split, _arch_for(cfg), train_cfg,
                                            out_dir=out_dir)
        checkpoint = load_checkpoint(out_dir / "checkpoint.adae")
        samples = _score_split(checkpoint, split)
        summary = _write_eval_outputs(samples, cfg, out_dir)
        return {"anomaly_class": klass, "auroc": summary["auroc"],
                "runtime_seconds": time.monotonic() - started, "error": None}
    except TrainingDivergenceError as err:
        return {"anomaly_class": klass, "auroc": None,
                "runtime_seconds": time.monotonic() - started,
                "error": f"divergence: {err}"}
    except Exception as err:  # recorded per class; the sweep continues
        return {"anomaly_class": klass, "auroc": None,
                "runtime_seconds": time.monotonic() - started, "error": str(err)}


def _worker_cap() -> int:
    raw = os.environ.get("ADAE_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise CliConfigError(f"ADAE_THREADS must be an integer, got {raw!r}")
    return max(cap, 1)


def cmd_benchmark(cfg: RunConfig, out_dir: pathlib.Path) -> int:
    if cfg.dataset["kind"] == "manifest":
        raise CliConfigError("benchmark requires a class-labeled dataset")
    if cfg.anomaly_class == "all":
        classes = sorted(int(c) for c in np.unique(load_class_dataset(cfg).class_labels))
    else:
        classes = [int(cfg.anomaly_class)]
    write_config_copy(cfg, out_dir)
    jobs = [{"config": cfg.to_dict(), "anomaly_class": k,
             "out_dir": str(out_dir / f"class_{k}")} for k in classes]
    workers = min(_worker_cap(), len(jobs))
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_benchmark_one_class, jobs))
    else:
        results = [_benchmark_one_class(j) for j in jobs]

    results.sort(key=lambda r: r["anomaly_class"])
    ok = [r for r in results if r["error"] is None]
    aurocs = [r["auroc"] for r in ok]
    report = {
        "per_class": {str(r["anomaly_class"]): r["auroc"] for r in results},
        "average": float(np.mean(aurocs)) if aurocs else None,
        "runtime_seconds": {str(r["anomaly_class"]): r["runtime_seconds"] for r in results},
        "errors": {str(r["anomaly_class"]): r["error"] for r in results if r["error"]},
        "config_hash": config_hash(cfg),
    }
    (out_dir / "benchmark.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "benchmark.csv", "w") as fh:
        fh.write(",".join(str(k) for k in classes) + ",avg\n")
        cells = ["" if r["error"] else f"{r['auroc']:.4f}" for r in results]
        avg = "" if report["average"] is None else f"{report['average']:.4f}"
        fh.write(",".join(cells) + f",{avg}\n")

    failures = [r for r in results if r["error"] is not None]
    for r in failures:
        print(f"class {r['anomaly_class']} failed: {r['error']}", file=sys.stderr)
    if failures:
        return (EXIT_DIVERGENCE
                if all(f["error"].startswith("divergence") for f in failures)
                else EXIT_CONFIG)
    return EXIT_OK


def cmd_plot(in_dir: pathlib.Path, out_dir: pathlib.Path, bins: int) -> int:
    roc_path = in_dir / "roc.csv"
    scores_path = in_dir / "scores.csv"
    if not roc_path.exists():
        raise CliConfigError(f"{roc_path} not found (run eval first)")
    if not scores_path.exists():
        raise CliConfigError(f"{scores_path} not found (run eval first)")
    points = []
    try:
        with open(roc_path) as fh:
            header = fh.readline().strip()
            if header != "fpr,tpr,threshold":
                raise CliConfigError(f"{roc_path}: expected header fpr,tpr,threshold")
            for line in fh:
                fpr, tpr, _ = line.strip().split(",")
                points.append((float(fpr), float(tpr)))
    except ValueError as err:
        raise CliConfigError(f"{roc_path}: malformed row ({err})")
    if not points:
        raise CliConfigError(f"{roc_path}: no curve points")
    auroc = 0.0
    for (f0, t0), (f1, t1) in zip(points, points[1:]):
        auroc += (f1 - f0) * (t0 + t1) / 2.0
    samples = scoring_mod.read_scores_csv(scores_path)
    edges, n_counts, a_counts = scoring_mod.score_histogram(samples, bins)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "roc.svg").write_text(svg_mod.roc_svg(points, auroc))
    (out_dir / "histogram.svg").write_text(svg_mod.histogram_svg(edges, n_counts, a_counts))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--profile", choices=PROFILES, default=None)
    p.add_argument("--anomaly-class", default=None,
                   help="held-out class index, or 'all' (benchmark)")
    p.add_argument("--threshold-policy", default=None,
                   help="youden_j or fpr_at:<q>")


def _overrides(args) -> dict:
    anomaly = args.anomaly_class
    if anomaly is not None and anomaly != "all":
        try:
            anomaly = int(anomaly)
        except ValueError:
            raise CliConfigError(f"--anomaly-class must be an integer or 'all', got {anomaly!r}")
    return {
        "seed": args.seed,
        "out": args.out,
        "profile": args.profile,
        "anomaly_class": anomaly,
        "threshold_policy": args.threshold_policy,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adae",
        description="Dual-autoencoder anomaly detection: train, score, and evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the normal classes of a dataset")
    _add_common(p)

    p = sub.add_parser("eval", help="score a test split and compute ROC/AUROC")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="checkpoint file from train")
    p.add_argument("--from-scores", default=None,
                   help="skip scoring; evaluate an existing scores.csv")

    p = sub.add_parser("score", help="write anomaly scores only")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("benchmark", help="leave-one-class-out sweep")
    _add_common(p)

    p = sub.add_parser("plot", help="render SVG plots from eval outputs")
    p.add_argument("--in", dest="in_dir", required=True, help="eval output directory")
    p.add_argument("--out", default=None, help="plot output directory (default: --in)")
    p.add_argument("--bins", type=int, default=20)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "plot":
            in_dir = pathlib.Path(args.in_dir)
            out_dir = pathlib.Path(args.out) if args.out else in_dir
            return cmd_plot(in_dir, out_dir, args.bins)
        cfg = load_run_config(args.config, _overrides(args))
        out_dir = pathlib.Path(cfg.out)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "eval":
            if args.from_scores is None and args.checkpoint is None:
                raise CliConfigError("eval needs --checkpoint or --from-scores")
            return cmd_eval(cfg, out_dir, args.checkpoint, from_scores=args.from_scores)
        if args.command == "score":
            return cmd_score(cfg, out_dir, args.checkpoint)
        if args.command == "benchmark":
            return cmd_benchmark(cfg, out_dir)
        raise CliConfigError(f"unknown command {args.command!r}")
    except (CliConfigError, DataError, CheckpointError, ConfigurationError,
            DimensionError, scoring_mod.EvaluationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
