"""Training and evaluation loops.

Per-cloud forward/backward passes within a batch can run on a fork-based
worker pool. Each pass writes its flat gradient into a fixed slot of a
shared buffer and slots are reduced in index order, so results are
bitwise identical for any worker count (``PSF_THREADS`` caps the pool).
Augmentation draws from a stream keyed by (seed, epoch, cloud index),
making it independent of scheduling as well.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import tensor as tc
from .data import (PointCloud, augment, load_manifest_dataset,
                   synth_classification, synth_segmentation)
from .errors import ConfigError, ContractError
from .model import (build, clear_gradients, collect_gradients,
                    cross_entropy_loss, flatten_parameters, forward_classify,
                    forward_segment, save_checkpoint)
from .optim import cosine_schedule, make_optimizer
from .tensor import ComputeGraph, Tensor


def resolve_workers():
    """Worker count: PSF_THREADS when set, else machine parallelism."""
    raw = os.environ.get("PSF_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"PSF_THREADS must be an integer, got {raw!r}") from None
    return max(1, os.cpu_count() or 1)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float
    wall_seconds: float


def accuracy(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    return float((preds == labels).mean())


def instance_mean_iou(preds, gts):
    """Mean over instances of the mean IoU over parts present in the
    instance's ground truth or prediction."""
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    scores = []
    for pred, gt in zip(preds, gts):
        parts = np.union1d(np.unique(gt), np.unique(pred))
        ious = []
        for c in parts:
            inter = np.count_nonzero((pred == c) & (gt == c))
            union = np.count_nonzero((pred == c) | (gt == c))
            ious.append(inter / union)
        scores.append(float(np.mean(ious)))
    return float(np.mean(scores))


def per_class_iou(preds, gts, n_classes):
    """Micro-aggregated IoU per part label; None for absent parts."""
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    table = {}
    for c in range(n_classes):
        inter = np.count_nonzero((preds == c) & (gts == c))
        union = np.count_nonzero((preds == c) | (gts == c))
        table[c] = None if union == 0 else inter / union
    return table


def load_datasets(cfg):
    """Materialize the train/test datasets named by a TrainConfig."""
    spec = cfg.data
    n_points = cfg.model.n_points
    if spec.synth == "classification":
        return synth_classification(spec.seed, spec.n_per_class, n_points)
    if spec.synth == "segmentation":
        full = synth_segmentation(spec.seed, spec.n_samples + spec.n_test_samples, n_points)
        train = _slice_dataset(full, 0, spec.n_samples)
        test = _slice_dataset(full, spec.n_samples, spec.n_samples + spec.n_test_samples)
        return train, test
    if not spec.train_manifest or not spec.test_manifest:
        raise ConfigError("manifest data source requires train_manifest and test_manifest")
    return (load_manifest_dataset(spec.train_manifest),
            load_manifest_dataset(spec.test_manifest))


def _slice_dataset(ds, lo, hi):
    from .data import Dataset
    return Dataset(points=ds.points[lo:hi], labels=ds.labels[lo:hi],
                   point_labels=None if ds.point_labels is None else ds.point_labels[lo:hi],
                   class_names=ds.class_names)


class Runner:
    """Executes per-cloud gradient and prediction passes.

    With ``n_workers > 1`` a pool of forked processes shares the flat
    parameter vector and per-slot gradient buffers; otherwise the same
    slot code runs in-process. Slot layout and reduction order never
    depend on the worker count.
    """

    def __init__(self, model, cfg, train_data, test_data, n_workers=1):
        self.model = model
        self.cfg = cfg
        self.train_data = train_data
        self.test_data = test_data
        self.task = cfg.model.task
        self.n_workers = max(1, n_workers)
        self._pool = []

        n_params = sum(p.data.size for _, p in _named(model))
        slots = cfg.batch_size
        n_test = len(test_data)
        pred_len = n_test if self.task == "classify" else n_test * cfg.model.n_points

        if self.n_workers > 1:
            ctx = mp.get_context("fork")
            self._params_raw = ctx.RawArray("d", n_params)
            self._grads_raw = ctx.RawArray("d", slots * n_params)
            self._loss_raw = ctx.RawArray("d", slots)
            self._correct_raw = ctx.RawArray("d", slots)
            self._preds_raw = ctx.RawArray("q", pred_len)
            self.params = np.frombuffer(self._params_raw, dtype=np.float64)
            self.grads = np.frombuffer(self._grads_raw, dtype=np.float64).reshape(slots, n_params)
            self.losses = np.frombuffer(self._loss_raw, dtype=np.float64)
            self.corrects = np.frombuffer(self._correct_raw, dtype=np.float64)
            self.preds = np.frombuffer(self._preds_raw, dtype=np.int64)
        else:
            self.params = np.empty(n_params, dtype=np.float64)
            self.grads = np.empty((slots, n_params), dtype=np.float64)
            self.losses = np.empty(slots, dtype=np.float64)
            self.corrects = np.empty(slots, dtype=np.float64)
            self.preds = np.empty(pred_len, dtype=np.int64)

        _, self.specs = flatten_parameters(model, self.params)
        self._grad_mean = np.empty(n_params, dtype=np.float64)

        if self.n_workers > 1:
            self._tasks = ctx.SimpleQueue()
            self._results = ctx.SimpleQueue()
            for _ in range(self.n_workers):
                proc = ctx.Process(target=_worker_main, args=(self,), daemon=True)
                proc.start()
                self._pool.append(proc)

    # ---- per-slot work (runs in workers when pooled) ----

    def _train_cloud(self, epoch, cloud_idx):
        pts = self.train_data.points[cloud_idx]
        if self.cfg.augment_train and self.task == "classify":
            rng = rngmod.stream(self.cfg.seed, rngmod.AUGMENT, epoch, cloud_idx)
            pts = augment(PointCloud(points=pts), 0, self.cfg.augment, _rng=rng).points
        return pts

    def _grad_slot(self, slot, cloud_idx, epoch):
        pts = self._train_cloud(epoch, cloud_idx)
        if self.task == "classify":
            label = int(self.train_data.labels[cloud_idx])
            with ComputeGraph() as graph:
                logits = forward_classify(self.model, Tensor(pts))
                loss = cross_entropy_loss(logits, label)
            graph.backward(loss)
            correct = 1.0 if int(np.argmax(logits.data)) == label else 0.0
        else:
            labels = self.train_data.point_labels[cloud_idx]
            with ComputeGraph() as graph:
                logits = forward_segment(self.model, Tensor(pts))
                loss = tc.cross_entropy_rows(logits, labels)
            graph.backward(loss)
            correct = float((np.argmax(logits.data, axis=1) == labels).mean())
        collect_gradients(self.specs, self.grads[slot])
        clear_gradients(self.specs)
        self.losses[slot] = float(loss.data)
        self.corrects[slot] = correct

    def _eval_slot(self, test_idx):
        pts = self.test_data.points[test_idx]
        if self.task == "classify":
            logits = forward_classify(self.model, Tensor(pts))
            self.preds[test_idx] = int(np.argmax(logits.data))
        else:
            logits = forward_segment(self.model, Tensor(pts))
            n = self.cfg.model.n_points
            self.preds[test_idx * n:(test_idx + 1) * n] = np.argmax(logits.data, axis=1)

    # ---- batch-level API ----

    def _dispatch(self, tasks):
        for task in tasks:
            self._tasks.put(task)
        for _ in tasks:
            status, payload = self._results.get()
            if status != "ok":
                self.close()
                raise ContractError(f"worker failed: {payload}")

    def run_batch(self, epoch, cloud_ids):
        """Returns (mean gradient, summed loss, summed train-correct)."""
        n = len(cloud_ids)
        if self.n_workers > 1:
            self._dispatch([("grad", slot, int(ci), epoch)
                            for slot, ci in enumerate(cloud_ids)])
        else:
            for slot, ci in enumerate(cloud_ids):
                self._grad_slot(slot, int(ci), epoch)
        np.sum(self.grads[:n], axis=0, out=self._grad_mean)
        self._grad_mean /= n
        return self._grad_mean, float(self.losses[:n].sum()), float(self.corrects[:n].sum())

    def run_eval(self):
        """Predictions for the whole test split, in test index order."""
        n_test = len(self.test_data)
        if self.n_workers > 1:
            self._dispatch([("eval", i) for i in range(n_test)])
        else:
            for i in range(n_test):
                self._eval_slot(i)
        if self.task == "classify":
            return self.preds[:n_test].copy()
        return self.preds.reshape(n_test, self.cfg.model.n_points).copy()

    def close(self):
        for _ in self._pool:
            self._tasks.put(None)
        for proc in self._pool:
            proc.join(timeout=30)
            if proc.is_alive():
                proc.terminate()
        self._pool = []

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def _worker_main(runner):
    while True:
        task = runner._tasks.get()
        if task is None:
            return
        try:
            if task[0] == "grad":
                runner._grad_slot(task[1], task[2], task[3])
                runner._results.put(("ok", task[1]))
            else:
                runner._eval_slot(task[1])
                runner._results.put(("ok", task[1]))
        except BaseException as exc:  # surface worker errors in the parent
            runner._results.put(("error", f"{type(exc).__name__}: {exc}"))


def _named(model):
    from .model import named_parameters
    return named_parameters(model)


def evaluate_predictions(task, preds, test_data):
    if task == "classify":
        return accuracy(preds, test_data.labels)
    return instance_mean_iou(preds, test_data.point_labels)


def run_training(cfg, out_dir, n_workers=None, log=None):
    """Full training loop: per-epoch metrics JSONL plus the checkpoint with
    the best test metric. Deterministic given (seed, config, data)."""
    cfg.validate()
    if cfg.model.task == "segment" and cfg.augment_train:
        raise ConfigError("augmentation is not supported for segmentation labels; "
                          "set augment_train = false")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.write_text("")
    ckpt_path = out_dir / "best.ckpt"

    train_data, test_data = load_datasets(cfg)
    model = build(cfg.model, seed=cfg.seed)
    optimizer = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)
    workers = resolve_workers() if n_workers is None else n_workers

    history = []
    best = -1.0
    with Runner(model, cfg, train_data, test_data, n_workers=workers) as runner:
        n_train = len(train_data)
        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            lr = (cosine_schedule(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
                  if cfg.schedule == "cosine" else cfg.lr)
            optimizer.lr = lr

            order = rngmod.stream(cfg.seed, rngmod.SHUFFLE, epoch).permutation(n_train)
            loss_total = 0.0
            correct_total = 0.0
            for lo in range(0, n_train, cfg.batch_size):
                batch = order[lo:lo + cfg.batch_size]
                grad, loss_sum, correct_sum = runner.run_batch(epoch, batch)
                optimizer.apply(runner.params, grad)
                loss_total += loss_sum
                correct_total += correct_sum

            preds = runner.run_eval()
            test_metric = evaluate_predictions(cfg.model.task, preds, test_data)
            record = EpochMetrics(
                epoch=epoch,
                train_loss=loss_total / n_train,
                train_acc=correct_total / n_train,
                test_acc=test_metric,
                lr=lr,
                wall_seconds=time.perf_counter() - started,
            )
            history.append(record)
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(asdict(record)) + "\n")
            if log is not None:
                log(f"epoch {epoch}: loss {record.train_loss:.4f} "
                    f"train {record.train_acc:.3f} test {record.test_acc:.3f} lr {lr:g}")
            if test_metric > best:
                best = test_metric
                save_checkpoint(ckpt_path, model)

    return history, ckpt_path
