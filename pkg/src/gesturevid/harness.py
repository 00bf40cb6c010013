"""Training runs, evaluation, seed aggregation, and variant comparison.

A run is fully determined by (manifest, variant, seed): the split, the
parameter init, the shuffle order, and the dropout masks all derive from
the seed, so repeating a run reproduces every checkpoint byte for byte.
wall_seconds is the one metrics field that depends on the machine.
"""

import csv
import dataclasses
import json
import os
import shutil
import time

import numpy as np

from . import model as model_mod
from . import pipeline
from .errors import ConfigError, DataError
from .layers import softmax_cross_entropy
from .model import ModelSpec, build, count_params
from .ops import onehot
from .optim import Adam

TRAINER_STATE = "trainer.json"


@dataclasses.dataclass
class TrainConfig:
    variant: str
    manifest: str
    out_dir: str
    epochs: int = 30
    batch_size: int = 8
    eval_batch_size: int = 1
    lr: float = 1e-4
    dropout: float = 0.5
    seeds: tuple = (0, 1, 2)
    train_fraction: float = 0.8
    patience: int = 5
    min_improvement: float = 1e-4
    stage_filters: tuple = (8, 16, 32, 64)
    interleaved_relu: bool = False
    num_classes: int = 0  # 0 = derive from the labels
    keep_checkpoints: bool = False
    vote_2d: bool = False

    def __post_init__(self):
        self.variant = model_mod.canonical_variant(self.variant)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        self.stage_filters = tuple(int(v) for v in self.stage_filters)


@dataclasses.dataclass
class RunReport:
    """Per-seed results plus the mean +/- sample-std aggregate."""

    variant: str
    seeds: list
    accuracies: list
    mean_accuracy: float
    std_accuracy: float
    single_run: bool
    loss_curves: list
    confusions: list
    param_count: int
    wall_seconds: list

    def to_json(self):
        return dataclasses.asdict(self)


def stack_segments(segments):
    """Segments -> (X (N,1,T,H,W) float32, y (N,) int64)."""
    if not segments:
        raise DataError("no segments to stack")
    shapes = {seg.frames.shape for seg in segments}
    if len(shapes) != 1:
        raise DataError(f"inconsistent segment shapes: {sorted(shapes)}")
    x = np.stack([seg.frames for seg in segments]).astype(np.float32)[:, None]
    y = np.array([seg.label for seg in segments], dtype=np.int64)
    return x, y


def _class_count(y, configured):
    derived = int(y.max()) + 1 if y.size else 0
    if configured:
        if derived > configured:
            raise DataError(
                f"labels go up to {derived - 1} but num_classes={configured}")
        return configured
    return max(2, derived)


def evaluate(net, x, y, num_classes, vote=False, batch_size=1):
    """Accuracy and confusion matrix, per-sample argmax prediction.

    Predictions are argmax per sample with ties going to the lowest class
    index; batch_size only chunks the forward passes.  vote=True replays
    every frame of each sample through the center-frame path and takes the
    majority (lowest class on ties); only meaningful for the 2d variant.
    """
    if len(x) == 0:
        raise DataError("empty evaluation set")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    t_len = x.shape[2]
    if vote:
        for i in range(len(x)):
            sample = x[i:i + 1]
            votes = np.zeros(num_classes, dtype=np.int64)
            for t in range(t_len):
                shifted = np.roll(sample, t_len // 2 - t, axis=2)
                logits = net.forward(shifted, training=False)
                votes[int(np.argmax(logits[0]))] += 1
            confusion[int(y[i]), int(np.argmax(votes))] += 1
    else:
        for lo in range(0, len(x), batch_size):
            logits = net.forward(x[lo:lo + batch_size], training=False)
            for j in range(logits.shape[0]):
                confusion[int(y[lo + j]), int(np.argmax(logits[j]))] += 1
    accuracy = float(np.trace(confusion)) / float(confusion.sum())
    return accuracy, confusion


def aggregate(values):
    """(mean, sample std); a single value aggregates to std 0."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("nothing to aggregate")
    if len(values) == 1:
        return values[0], 0.0
    return float(np.mean(values)), float(np.std(values, ddof=1))


def _rng_state(rng):
    return rng.bit_generator.state


def _restore_rng(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_confusion_csv(path, confusion):
    confusion = np.asarray(confusion)
    k = confusion.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"pred{i}" for i in range(k)])
        for row in confusion:
            writer.writerow([int(v) for v in row])
    return path


def _checkpoint_dirs(run_dir):
    out = []
    for name in os.listdir(run_dir):
        if name.startswith("epoch_") and os.path.isdir(os.path.join(run_dir, name)):
            out.append(name)
    return sorted(out)


def train_run(config: TrainConfig, seed, run_dir=None, resume=None):
    """One seeded training run; returns (best network, metrics dict).

    Writes per-epoch checkpoints (model + optimizer + trainer state), keeps
    the best-by-train-loss epoch plus the latest unless keep_checkpoints is
    set, and finishes with metrics.json and confusion.csv in run_dir.
    """
    t_start = time.perf_counter()
    run_dir = run_dir or config.out_dir
    os.makedirs(run_dir, exist_ok=True)
    segments, window = pipeline.load_dataset(config.manifest)
    train_set, test_set = pipeline.split_dataset(
        segments, config.train_fraction, seed)
    x_train, y_train = stack_segments(train_set)
    x_test, y_test = stack_segments(test_set)
    num_classes = _class_count(np.concatenate([y_train, y_test]),
                               config.num_classes)
    spec = ModelSpec(variant=config.variant, num_classes=num_classes,
                     input_shape=x_train.shape[1:], seed=seed,
                     stage_filters=config.stage_filters,
                     dropout_rate=config.dropout,
                     interleaved_relu=config.interleaved_relu)

    if resume is not None:
        net = model_mod.load_checkpoint(resume)
        if net.spec.to_json() != spec.to_json():
            raise ConfigError(
                f"checkpoint at {resume} was trained with a different setup")
        adam = Adam.load(resume, net.param_items())
        with open(os.path.join(resume, TRAINER_STATE)) as fh:
            state = json.load(fh)
        start_epoch = state["epoch"] + 1
        losses = list(state["losses"])
        best_epoch = state["best_epoch"]
        best_loss = state["best_loss"]
        stall = state["stall"]
        shuffle_rng = _restore_rng(state["shuffle_rng"])
        net.dropout_layer.rng.bit_generator.state = state["dropout_rng"]
        prior_best = os.path.join(run_dir, f"epoch_{best_epoch:03d}")
        if best_epoch >= 0 and not os.path.isdir(prior_best):
            raise ConfigError(
                f"resume expects the run directory that holds the best "
                f"checkpoint so far ({prior_best} is missing)")
    else:
        net = build(spec)
        adam = Adam(net.param_items(), lr=config.lr)
        start_epoch = 0
        losses = []
        best_epoch = -1
        best_loss = float("inf")
        stall = 0
        shuffle_rng = np.random.default_rng((seed, 2))

    n_train = len(x_train)
    params = net.param_items()
    for epoch in range(start_epoch, config.epochs):
        order = shuffle_rng.permutation(n_train)
        total = 0.0
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            logits = net.forward(x_train[idx], training=True)
            loss, grad = softmax_cross_entropy(
                logits, onehot(y_train[idx], num_classes, dtype=logits.dtype))
            net.backward(grad)
            adam.step(params, net.grad_items())
            total += loss * len(idx)
        epoch_loss = total / n_train
        losses.append(epoch_loss)
        if best_loss - epoch_loss > config.min_improvement:
            best_loss = epoch_loss
            best_epoch = epoch
            stall = 0
        else:
            stall += 1
        ckpt = os.path.join(run_dir, f"epoch_{epoch:03d}")
        model_mod.save_checkpoint(net, ckpt)
        adam.save(ckpt)
        _write_json(os.path.join(ckpt, TRAINER_STATE), {
            "epoch": epoch, "losses": losses, "best_epoch": best_epoch,
            "best_loss": best_loss, "stall": stall,
            "shuffle_rng": _rng_state(shuffle_rng),
            "dropout_rng": _rng_state(net.dropout_layer.rng),
            "split": {"seed": seed, "train_fraction": config.train_fraction},
            "num_classes": num_classes})
        if not config.keep_checkpoints:
            keep = {f"epoch_{best_epoch:03d}", f"epoch_{epoch:03d}"}
            for name in _checkpoint_dirs(run_dir):
                if name not in keep:
                    shutil.rmtree(os.path.join(run_dir, name))
        if stall >= config.patience:
            break

    if best_epoch < 0:
        raise DataError("training produced no checkpoints")
    best_dir = os.path.join(run_dir, f"epoch_{best_epoch:03d}")
    best_net = model_mod.load_checkpoint(best_dir)
    vote = config.vote_2d and spec.variant == "2d"
    accuracy, confusion = evaluate(best_net, x_test, y_test, num_classes,
                                   vote=vote, batch_size=config.eval_batch_size)
    shutil.copytree(best_dir, os.path.join(run_dir, "best"), dirs_exist_ok=True)
    metrics = {"variant": spec.variant, "seed": int(seed),
               "accuracy": accuracy, "loss_curve": losses,
               "confusion": confusion.tolist(),
               "param_count": count_params(net),
               "wall_seconds": time.perf_counter() - t_start}
    _write_json(os.path.join(run_dir, "metrics.json"), metrics)
    write_confusion_csv(os.path.join(run_dir, "confusion.csv"), confusion)
    return best_net, metrics


def train(config: TrainConfig) -> RunReport:
    """Run every seed in the config and aggregate."""
    all_metrics = []
    for seed in config.seeds:
        run_dir = os.path.join(config.out_dir, f"seed{seed}")
        _, metrics = train_run(config, seed, run_dir=run_dir)
        all_metrics.append(metrics)
    accs = [m["accuracy"] for m in all_metrics]
    mean, std = aggregate(accs)
    return RunReport(
        variant=config.variant, seeds=list(config.seeds), accuracies=accs,
        mean_accuracy=mean, std_accuracy=std, single_run=len(accs) == 1,
        loss_curves=[m["loss_curve"] for m in all_metrics],
        confusions=[m["confusion"] for m in all_metrics],
        param_count=all_metrics[0]["param_count"],
        wall_seconds=[m["wall_seconds"] for m in all_metrics])


def compare(manifest, out_dir, variants=("2d", "3d", "2p1d", "proposed"),
            seeds=(0, 1, 2), **overrides):
    """Train every variant on one dataset with the same seeds.

    Returns the table rows and writes comparison.csv / comparison.json.
    """
    rows = []
    for variant in variants:
        config = TrainConfig(variant=variant, manifest=manifest,
                             out_dir=os.path.join(out_dir, variant),
                             seeds=seeds, **overrides)
        report = train(config)
        rows.append({"variant": report.variant,
                     "mean_accuracy": report.mean_accuracy,
                     "std_accuracy": report.std_accuracy,
                     "param_count": report.param_count,
                     "accuracies": report.accuracies})
    write_comparison(out_dir, rows, seeds)
    return rows


def write_comparison(out_dir, rows, seeds):
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "comparison.json"), rows)
    path = os.path.join(out_dir, "comparison.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "mean_accuracy", "std_accuracy",
                         "param_count"] + [f"acc_seed{s}" for s in seeds])
        for row in rows:
            writer.writerow([row["variant"], repr(row["mean_accuracy"]),
                             repr(row["std_accuracy"]), row["param_count"]]
                            + [repr(a) for a in row["accuracies"]])
    return path


def collect_metrics(runs_dir):
    """Every metrics.json found below runs_dir."""
    found = []
    for root, _dirs, files in os.walk(runs_dir):
        if "metrics.json" in files:
            with open(os.path.join(root, "metrics.json")) as fh:
                found.append(json.load(fh))
    if not found:
        raise DataError(f"no metrics.json under {runs_dir}")
    return sorted(found, key=lambda m: (m["variant"], m["seed"]))


def summarize_runs(runs_dir):
    """Group collected metrics by variant into comparison rows."""
    by_variant = {}
    for metrics in collect_metrics(runs_dir):
        by_variant.setdefault(metrics["variant"], []).append(metrics)
    rows = []
    for variant in sorted(by_variant):
        group = sorted(by_variant[variant], key=lambda m: m["seed"])
        accs = [m["accuracy"] for m in group]
        mean, std = aggregate(accs)
        rows.append({"variant": variant, "mean_accuracy": mean,
                     "std_accuracy": std,
                     "param_count": group[0]["param_count"],
                     "seeds": [m["seed"] for m in group],
                     "accuracies": accs})
    return rows
