"""Training-run behavior: metrics, determinism, resume, aggregation."""

import filecmp
import json
import os

import numpy as np
import pytest

from gesturevid import harness, pipeline
from gesturevid.errors import ConfigError, DataError
from gesturevid.harness import (RunReport, TrainConfig, aggregate,
                                collect_metrics, evaluate, stack_segments,
                                summarize_runs, train, train_run,
                                write_confusion_csv)

METRIC_KEYS = {"variant", "seed", "accuracy", "loss_curve", "confusion",
               "param_count", "wall_seconds"}


def tiny_config(manifest, out_dir, **over):
    kw = dict(variant="2d", manifest=str(manifest), out_dir=str(out_dir),
              epochs=3, batch_size=4, lr=1e-3, dropout=0.2, seeds=(0,),
              stage_filters=(2, 3), patience=5)
    kw.update(over)
    return TrainConfig(**kw)


class FixedNet:
    """Evaluation stub: logits [v, -v] from the center frame's first pixel."""

    def forward(self, x, training=False):
        assert not training
        v = x[:, 0, x.shape[2] // 2, 0, 0].astype(np.float64)
        return np.stack([v, -v], axis=1)


def test_aggregate():
    mean, std = aggregate([96.0, 97.0, 98.0])
    assert mean == 97.0 and std == 1.0
    assert aggregate([5.0]) == (5.0, 0.0)
    with pytest.raises(ValueError):
        aggregate([])


def test_stack_segments(tiny_segments):
    x, y = stack_segments(tiny_segments)
    assert x.shape == (12, 1, 4, 6, 6) and x.dtype == np.float32
    assert y.shape == (12,) and y.dtype == np.int64
    with pytest.raises(DataError):
        stack_segments([])
    odd = tiny_segments[:1] + [pipeline.GestureSegment(
        np.zeros((5, 6, 6)), 0, 0, 0, 0)]
    with pytest.raises(DataError):
        stack_segments(odd)


def test_evaluate_perfect_and_confused():
    net = FixedNet()
    x = np.zeros((4, 1, 3, 1, 1), dtype=np.float32)
    x[:2, 0, 1, 0, 0] = 1.0   # -> class 0
    x[2:, 0, 1, 0, 0] = -1.0  # -> class 1
    y = np.array([0, 0, 1, 1])
    acc, conf = evaluate(net, x, y, 2)
    assert acc == 1.0
    np.testing.assert_array_equal(conf, [[2, 0], [0, 2]])
    acc, conf = evaluate(net, x, np.array([0, 1, 1, 0]), 2)
    assert acc == 0.5
    assert conf.sum() == 4 and np.trace(conf) == 2


def test_evaluate_tie_breaks_low_and_chunks_agree():
    net = FixedNet()
    x = np.zeros((5, 1, 3, 1, 1), dtype=np.float32)  # all ties: logits (0, 0)
    y = np.ones(5, dtype=np.int64)
    acc, conf = evaluate(net, x, y, 2)
    assert acc == 0.0 and conf[1, 0] == 5  # lowest class wins ties
    for bs in (1, 2, 5, 7):
        acc_b, conf_b = evaluate(net, x, y, 2, batch_size=bs)
        np.testing.assert_array_equal(conf_b, conf)
    with pytest.raises(DataError):
        evaluate(net, x[:0], y[:0], 2)


def test_evaluate_vote_majority():
    net = FixedNet()
    x = np.zeros((1, 1, 4, 1, 1), dtype=np.float32)
    x[0, 0, :, 0, 0] = [1.0, 1.0, -1.0, 1.0]  # 3 frames say class 0
    acc, conf = evaluate(net, x, np.array([0]), 2, vote=True)
    assert acc == 1.0
    acc, _ = evaluate(net, x, np.array([1]), 2, vote=True)
    assert acc == 0.0


def test_train_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        tiny_config("m", tmp_path, epochs=0)
    with pytest.raises(ConfigError):
        tiny_config("m", tmp_path, batch_size=0)
    with pytest.raises(ConfigError):
        tiny_config("m", tmp_path, seeds=())
    with pytest.raises(ConfigError):
        tiny_config("m", tmp_path, patience=0)
    with pytest.raises(ConfigError):
        tiny_config("m", tmp_path, variant="vgg")


def test_train_run_outputs(tmp_path, tiny_dataset):
    config = tiny_config(tiny_dataset, tmp_path / "run")
    net, metrics = train_run(config, 0)
    assert set(metrics) == METRIC_KEYS
    assert metrics["variant"] == "2d" and metrics["seed"] == 0
    assert 0.0 <= metrics["accuracy"] <= 1.0
    assert len(metrics["loss_curve"]) == 3
    conf = np.array(metrics["confusion"])
    assert conf.shape == (3, 3)
    assert conf.sum() == 9  # one test sample per (subject, label) group
    assert np.trace(conf) / conf.sum() == metrics["accuracy"]
    on_disk = json.load(open(tmp_path / "run" / "metrics.json"))
    assert on_disk == metrics
    assert (tmp_path / "run" / "best" / "model.json").is_file()
    assert (tmp_path / "run" / "confusion.csv").is_file()
    # pruning leaves at most best + latest epoch directories
    epochs = [p for p in os.listdir(tmp_path / "run") if p.startswith("epoch_")]
    assert 1 <= len(epochs) <= 2
    assert net.spec.num_classes == 3


def test_train_run_is_deterministic(tmp_path, tiny_dataset):
    config_a = tiny_config(tiny_dataset, tmp_path / "a")
    config_b = tiny_config(tiny_dataset, tmp_path / "b")
    _, ma = train_run(config_a, 1)
    _, mb = train_run(config_b, 1)
    ma.pop("wall_seconds")
    mb.pop("wall_seconds")
    assert ma == mb
    for name in sorted(os.listdir(tmp_path / "a" / "best")):
        same = filecmp.cmp(tmp_path / "a" / "best" / name,
                           tmp_path / "b" / "best" / name, shallow=False)
        assert same, f"best/{name} differs between identical runs"


def test_train_run_seed_changes_results(tmp_path, tiny_dataset):
    config = tiny_config(tiny_dataset, tmp_path / "a")
    _, ma = train_run(config, 0)
    config2 = tiny_config(tiny_dataset, tmp_path / "b")
    _, mb = train_run(config2, 2)
    assert ma["loss_curve"] != mb["loss_curve"]


def test_resume_matches_uninterrupted(tmp_path, tiny_dataset):
    straight = tiny_config(tiny_dataset, tmp_path / "a", epochs=4,
                           keep_checkpoints=True)
    train_run(straight, 0)
    half = tiny_config(tiny_dataset, tmp_path / "b", epochs=2,
                       keep_checkpoints=True)
    train_run(half, 0)
    full = tiny_config(tiny_dataset, tmp_path / "b", epochs=4,
                       keep_checkpoints=True)
    _, mb = train_run(full, 0, resume=str(tmp_path / "b" / "epoch_001"))
    ma = json.load(open(tmp_path / "a" / "metrics.json"))
    assert ma["loss_curve"] == mb["loss_curve"]
    assert ma["accuracy"] == mb["accuracy"]
    for name in sorted(os.listdir(tmp_path / "a" / "epoch_003")):
        assert filecmp.cmp(tmp_path / "a" / "epoch_003" / name,
                           tmp_path / "b" / "epoch_003" / name,
                           shallow=False), name


def test_resume_rejects_config_drift(tmp_path, tiny_dataset):
    config = tiny_config(tiny_dataset, tmp_path / "a", epochs=2,
                         keep_checkpoints=True)
    train_run(config, 0)
    other = tiny_config(tiny_dataset, tmp_path / "a", epochs=4,
                        stage_filters=(2, 4))
    with pytest.raises(ConfigError):
        train_run(other, 0, resume=str(tmp_path / "a" / "epoch_001"))


def test_early_stop_on_plateau(tmp_path, tiny_dataset):
    config = tiny_config(tiny_dataset, tmp_path / "run", epochs=10,
                         patience=2, min_improvement=1.0)
    _, metrics = train_run(config, 0)
    # epoch 0 sets the best; nothing can beat it by 1.0, so two stalls stop it
    assert len(metrics["loss_curve"]) == 3


def test_num_classes_override(tmp_path, tiny_dataset):
    config = tiny_config(tiny_dataset, tmp_path / "run", num_classes=5)
    _, metrics = train_run(config, 0)
    assert np.array(metrics["confusion"]).shape == (5, 5)
    bad = tiny_config(tiny_dataset, tmp_path / "run2", num_classes=2)
    with pytest.raises(DataError):
        train_run(bad, 0)


def test_train_aggregates_seeds(tmp_path, tiny_dataset):
    config = tiny_config(tiny_dataset, tmp_path / "out", seeds=(0, 1),
                         epochs=2)
    report = train(config)
    assert isinstance(report, RunReport)
    assert report.seeds == [0, 1] and not report.single_run
    mean, std = aggregate(report.accuracies)
    assert report.mean_accuracy == mean and report.std_accuracy == std
    assert len(report.loss_curves) == 2
    assert (tmp_path / "out" / "seed0" / "metrics.json").is_file()
    assert (tmp_path / "out" / "seed1" / "metrics.json").is_file()

    found = collect_metrics(tmp_path / "out")
    assert [m["seed"] for m in found] == [0, 1]
    rows = summarize_runs(tmp_path / "out")
    assert len(rows) == 1 and rows[0]["variant"] == "2d"
    assert rows[0]["accuracies"] == report.accuracies
    with pytest.raises(DataError):
        collect_metrics(tmp_path / "empty")


def test_write_confusion_csv(tmp_path):
    path = write_confusion_csv(tmp_path / "c.csv",
                               np.array([[3, 1], [0, 2]]))
    lines = open(path).read().splitlines()
    assert lines[0] == "pred0,pred1"
    assert lines[1:] == ["3,1", "0,2"]
