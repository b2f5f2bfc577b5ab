"""Training loop: metrics helpers, dataset plumbing, determinism across
worker counts, and checkpoint selection."""

import json
from pathlib import Path

import numpy as np
import pytest

from psformer.config import DataSpec, TrainConfig
from psformer.data import AugmentParams
from psformer.errors import ConfigError
from psformer.model import ModelConfig
from psformer.train import (accuracy, instance_mean_iou, load_datasets,
                            per_class_iou, resolve_workers, run_training)


def tiny_train_config(**overrides):
    cfg = TrainConfig(
        model=ModelConfig(n_points=32, n_condensed=16, n_classes=8, embed_dim=16,
                          knn_k=4, n_ps_layers=1, topk=4),
        data=DataSpec(synth="classification", n_per_class=4),
        optimizer="adam", lr=1e-3, weight_decay=1e-4,
        epochs=2, batch_size=8, seed=0)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


class TestMetrics:
    def test_accuracy(self):
        assert accuracy([1, 2, 3, 0], [1, 2, 0, 0]) == 0.75

    def test_perfect_predictions_score_one(self):
        gts = np.array([[0, 0, 1, 1], [2, 2, 3, 3]])
        assert instance_mean_iou(gts, gts) == 1.0
        table = per_class_iou(gts, gts, 4)
        assert all(v == 1.0 for v in table.values())

    def test_constant_prediction_on_two_equal_parts(self):
        # Predicting part 0 everywhere on a half-0 half-1 shape:
        # IoU(part 0) = 0.5, IoU(part 1) = 0, instance mean = 0.25.
        gt = np.array([[0] * 8 + [1] * 8])
        pred = np.zeros((1, 16), dtype=np.int64)
        table = per_class_iou(pred, gt, 2)
        assert table[0] == 0.5
        assert table[1] == 0.0
        assert instance_mean_iou(pred, gt) == 0.25

    def test_random_predictor_near_chance(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 4, size=1000)
        labels = rng.integers(0, 4, size=1000)
        assert abs(accuracy(preds, labels) - 0.25) < 0.05

    def test_absent_class_reported_as_none(self):
        table = per_class_iou(np.zeros((1, 4), dtype=int), np.zeros((1, 4), dtype=int), 3)
        assert table[0] == 1.0 and table[1] is None and table[2] is None


class TestDatasets:
    def test_classification_split_sizes(self):
        cfg = tiny_train_config()
        train, test = load_datasets(cfg)
        assert len(train) == 32 and len(test) == 8

    def test_segmentation_split_disjoint(self):
        cfg = tiny_train_config()
        cfg.model = ModelConfig(n_points=32, n_condensed=32, n_classes=4,
                                embed_dim=16, knn_k=4, n_ps_layers=1, topk=4,
                                task="segment")
        cfg.data = DataSpec(synth="segmentation", n_samples=6, n_test_samples=3)
        cfg.augment_train = False
        train, test = load_datasets(cfg)
        assert len(train) == 6 and len(test) == 3
        assert not np.array_equal(train.points[0], test.points[0])

    def test_manifest_source_requires_paths(self):
        cfg = tiny_train_config()
        cfg.data = DataSpec(synth="manifest")
        with pytest.raises(ConfigError):
            load_datasets(cfg)


class TestRunTraining:
    def test_metrics_records_and_checkpoint(self, tmp_path):
        cfg = tiny_train_config()
        history, ckpt = run_training(cfg, tmp_path, n_workers=1)
        assert len(history) == 2
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert set(record) == {"epoch", "train_loss", "train_acc", "test_acc",
                               "lr", "wall_seconds"}
        assert Path(ckpt).exists()

    def test_rerun_is_identical(self, tmp_path):
        h1, ck1 = run_training(tiny_train_config(), tmp_path / "a", n_workers=1)
        h2, ck2 = run_training(tiny_train_config(), tmp_path / "b", n_workers=1)
        for a, b in zip(h1, h2):
            assert (a.train_loss, a.train_acc, a.test_acc) == \
                   (b.train_loss, b.train_acc, b.test_acc)
        assert Path(ck1).read_bytes() == Path(ck2).read_bytes()

    def test_worker_count_does_not_change_results(self, tmp_path):
        h1, ck1 = run_training(tiny_train_config(), tmp_path / "serial", n_workers=1)
        h2, ck2 = run_training(tiny_train_config(), tmp_path / "pool", n_workers=2)
        for a, b in zip(h1, h2):
            assert (a.train_loss, a.train_acc, a.test_acc) == \
                   (b.train_loss, b.train_acc, b.test_acc)
        assert Path(ck1).read_bytes() == Path(ck2).read_bytes()

    def test_cosine_schedule_applied(self, tmp_path):
        cfg = tiny_train_config(schedule="cosine", lr=0.1, lr_min=1e-3, epochs=3)
        cfg.optimizer = "sgd"
        history, _ = run_training(cfg, tmp_path, n_workers=1)
        assert history[0].lr == pytest.approx(0.1)
        assert history[-1].lr == pytest.approx(1e-3)

    def test_segment_training_records_miou(self, tmp_path):
        cfg = tiny_train_config()
        cfg.model = ModelConfig(n_points=32, n_condensed=32, n_classes=4,
                                embed_dim=16, knn_k=4, n_ps_layers=1, topk=4,
                                task="segment", structure_only=True)
        cfg.data = DataSpec(synth="segmentation", n_samples=6, n_test_samples=3)
        cfg.augment_train = False
        cfg.optimizer = "sgd"
        cfg.lr = 0.05
        history, _ = run_training(cfg, tmp_path, n_workers=1)
        assert 0.0 <= history[-1].test_acc <= 1.0

    def test_segmentation_rejects_augmentation(self, tmp_path):
        cfg = tiny_train_config()
        cfg.model = ModelConfig(n_points=32, n_condensed=32, n_classes=4,
                                embed_dim=16, knn_k=4, n_ps_layers=1, topk=4,
                                task="segment")
        cfg.data = DataSpec(synth="segmentation", n_samples=4, n_test_samples=2)
        with pytest.raises(ConfigError):
            run_training(cfg, tmp_path, n_workers=1)


def test_resolve_workers_env(monkeypatch):
    monkeypatch.setenv("PSF_THREADS", "3")
    assert resolve_workers() == 3
    monkeypatch.setenv("PSF_THREADS", "")
    assert resolve_workers() >= 1
    monkeypatch.setenv("PSF_THREADS", "junk")
    with pytest.raises(ConfigError):
        resolve_workers()
