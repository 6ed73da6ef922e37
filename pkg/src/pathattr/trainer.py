"""Regularised empirical-risk training, first-order episodic updates, metrics.

Parameters and gradients are handled as ``{name: ndarray}`` mappings (a
:class:`~pathattr.model.TinyCnnParams` is accepted wherever parameters are),
so the optimiser and the episodic updates also work on toy models.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Dataset
from .errors import NumericError
from .model import (
    LayerSpec,
    TinyCnnParams,
    batch_loss,
    init_params,
    loss_and_gradient,
    predict_logits,
    sample_dropout_masks,
)

log = logging.getLogger(__name__)

Tensors = Mapping[str, np.ndarray]


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    momentum: float = 0.939
    l2_coefficient: float = 3e-4
    train_fraction: float = 0.7
    test_fraction: float = 0.3
    optimizer: str = "SGDM"
    input_shape: tuple[int, int, int] = (1, 32, 32)
    keep_prob: float = 1.0
    class_weighting: bool = False
    seed: int = 0
    conv_channels: tuple[int, ...] = (8, 16)
    dense_widths: tuple[int, ...] = (64,)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.conv_channels = tuple(self.conv_channels)
        self.dense_widths = tuple(self.dense_widths)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        if not math.isclose(self.train_fraction + self.test_fraction, 1.0, abs_tol=1e-12):
            raise ValueError("train_fraction + test_fraction must equal 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.keep_prob <= 1:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.optimizer.upper() != "SGDM":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def layer_spec(self, num_classes: int) -> LayerSpec:
        return LayerSpec(
            input_shape=self.input_shape,
            conv_channels=self.conv_channels,
            dense_widths=self.dense_widths,
            num_classes=num_classes,
        )

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainingConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpisodicConfig:
    """Rates may be scalars or per-tensor mappings (a rate for each layer)."""

    inner_learning_rate: float | Mapping[str, float] = 1e-2
    outer_learning_rate: float | Mapping[str, float] = 1e-3
    inner_steps: int = 1
    tasks_per_meta_batch: int = 4
    task_size: int = 30
    task_train_fraction: float = 0.7
    meta_batches_per_epoch: int = 10

    def __post_init__(self):
        for rate in (self.inner_learning_rate, self.outer_learning_rate):
            values = rate.values() if isinstance(rate, Mapping) else [rate]
            if any(v < 0 for v in values):
                raise ValueError("learning rates must be non-negative")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be non-negative")
        if self.tasks_per_meta_batch < 1:
            raise ValueError("tasks_per_meta_batch must be at least 1")


@dataclass
class RunMetrics:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    macro_f1: float = 0.0
    accuracy: float = 0.0
    seed: int = 0
    test_indices: list[int] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d

    def to_json(self, path, include_timing: bool = False) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(include_timing), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "accuracy"])
            for i, (loss, acc) in enumerate(zip(self.epoch_loss, self.epoch_accuracy), start=1):
                writer.writerow([i, repr(loss), repr(acc)])


# ---------------------------------------------------------------------------
# tensor-dict helpers


def _tensors(params) -> dict[str, np.ndarray]:
    return params.tensors if isinstance(params, TinyCnnParams) else dict(params)


def _rebuild(template, tensors: dict[str, np.ndarray]):
    if isinstance(template, TinyCnnParams):
        return TinyCnnParams(template.spec, tensors, template.seed)
    return tensors


def _rate(rate, name: str) -> float:
    return float(rate[name]) if isinstance(rate, Mapping) else float(rate)


def _check_finite(tensors: Tensors, what: str) -> None:
    for name, t in tensors.items():
        if not np.all(np.isfinite(t)):
            raise NumericError(f"non-finite {what} for {name}")


# ---------------------------------------------------------------------------
# data handling


def split_counts(class_sizes: Sequence[int], train_fraction: float) -> list[int]:
    """Per-class train counts: nearest integer to ``fraction * n``, halves up.

    Each class keeps at least one sample on each side of the split.
    """
    counts = []
    for n in class_sizes:
        if n < 2:
            raise ValueError(f"class with {n} sample(s) cannot be stratified")
        k = math.floor(train_fraction * n + 0.5 + 1e-9)
        counts.append(min(max(k, 1), n - 1))
    return counts


def split_dataset(dataset: Dataset, train_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified, seeded split into disjoint, exhaustive train and test sets."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    train_idx, test_idx = split_indices(dataset.labels, train_fraction, seed)
    return dataset.subset(train_idx), dataset.subset(test_idx)


def split_indices(labels: np.ndarray, train_fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    counts = split_counts([len(m) for m in members], train_fraction)
    train, test = [], []
    for m, k in zip(members, counts):
        perm = rng.permutation(m)
        train.append(np.sort(perm[:k]))
        test.append(np.sort(perm[k:]))
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def class_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse class frequency scaled so the per-sample weights average to 1."""
    counts = np.bincount(labels, minlength=num_classes)
    n = len(labels)
    present = counts > 0
    k = int(present.sum())
    weights = np.zeros(num_classes)
    weights[present] = n / (k * counts[present])
    return weights


# ---------------------------------------------------------------------------
# optimiser


def sgdm_step(params, gradient: Tensors, velocity: Tensors, config: TrainingConfig):
    """``v <- mu v + (g + 2 lambda theta)``; ``theta <- theta - lr v``."""
    theta = _tensors(params)
    new_theta, new_v = {}, {}
    mu, lam, lr = config.momentum, config.l2_coefficient, config.learning_rate
    for name, t in theta.items():
        g = gradient[name]
        if lam:
            g = g + 2.0 * lam * t
        v = mu * velocity[name] + g if mu else g
        new_v[name] = v
        new_theta[name] = t - lr * v
    _check_finite(new_theta, "parameter update")
    return _rebuild(params, new_theta), new_v


def zeros_like(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in _tensors(params).items()}


# ---------------------------------------------------------------------------
# evaluation


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> dict:
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return {
        "confusion": cm.tolist(),
        "precision": precision.tolist(),
        "recall": recall.tolist(),
        "f1": f1.tolist(),
        "macro_f1": float(f1.mean()),
        "accuracy": float(tp.sum() / cm.sum()),
    }


def evaluate(params: TinyCnnParams, test_set: Dataset, num_classes: int | None = None) -> RunMetrics:
    if len(test_set) == 0:
        raise ValueError("empty test set")
    k = num_classes or params.spec.num_classes
    preds = np.argmax(predict_logits(params, test_set.images), axis=1)
    stats = metrics_from_confusion(confusion_matrix(test_set.labels, preds, k))
    return RunMetrics(**stats)


# ---------------------------------------------------------------------------
# supervised training


def train(dataset: Dataset, config: TrainingConfig = TrainingConfig(),
          episodic: EpisodicConfig | None = None, progress: Callable[[int, float, float], None] | None = None):
    """Split, fit with mini-batch SGDM (or episodic updates), evaluate on the held-out part.

    Returns ``(params, metrics)``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    started = time.perf_counter()
    num_classes = dataset.num_classes
    train_idx, test_idx = split_indices(dataset.labels, config.train_fraction, config.seed)
    train_set, test_set = dataset.subset(train_idx), dataset.subset(test_idx)

    params = init_params(config.layer_spec(num_classes), config.seed)
    rng = np.random.default_rng(config.seed + 1)
    weights = class_weights(train_set.labels, num_classes) if config.class_weighting else None

    metrics = RunMetrics(seed=config.seed, test_indices=test_idx.tolist())
    if episodic is not None:
        params = _train_episodic(params, train_set, config, episodic, rng, metrics, progress)
    else:
        params = _train_supervised(params, train_set, config, weights, rng, metrics, progress)

    final = evaluate(params, test_set, num_classes)
    for key in ("confusion", "precision", "recall", "f1", "macro_f1", "accuracy"):
        setattr(metrics, key, getattr(final, key))
    metrics.wall_clock = time.perf_counter() - started
    return params, metrics


def _train_supervised(params, train_set, config, weights, rng, metrics, progress):
    velocity = zeros_like(params)
    n = len(train_set)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = train_set.images[idx], train_set.labels[idx]
            sw = None if weights is None else weights[y]
            masks = None
            if config.keep_prob < 1.0:
                masks = sample_dropout_masks(params, len(idx), config.keep_prob, rng)
            loss, grads, logits = loss_and_gradient(params, x, y, sw, masks, config.keep_prob)
            params, velocity = sgdm_step(params, grads, velocity, config)
            total_loss += loss * len(idx)
            correct += int((np.argmax(logits, axis=1) == y).sum())
        metrics.epoch_loss.append(total_loss / n)
        metrics.epoch_accuracy.append(correct / n)
        log.info("epoch %d loss %.4f acc %.4f", epoch + 1, metrics.epoch_loss[-1], metrics.epoch_accuracy[-1])
        if progress:
            progress(epoch + 1, metrics.epoch_loss[-1], metrics.epoch_accuracy[-1])
    return params


# ---------------------------------------------------------------------------
# episodic (first-order) updates


GradFn = Callable[[object, object], Tensors]


def _cnn_grad(params, data) -> Tensors:
    images, labels = data
    _, grads, _ = loss_and_gradient(params, images, labels)
    return grads


def _size(data) -> int:
    if isinstance(data, tuple) and len(data) == 2:
        return len(data[1])
    return len(data)


def inner_adapt(params, task_train, config: EpisodicConfig, grad_fn: GradFn | None = None):
    """``inner_steps`` plain gradient steps on the task's mean training loss.

    ``grad_fn(params, data)`` must return the gradient of the *mean* loss over
    ``data``; it defaults to the CNN cross-entropy on an ``(images, labels)`` pair.
    """
    if _size(task_train) == 0:
        raise ValueError("empty task training split")
    grad_fn = grad_fn or _cnn_grad
    theta = params
    for _ in range(config.inner_steps):
        g = grad_fn(theta, task_train)
        tensors = {n: t - _rate(config.inner_learning_rate, n) * g[n] for n, t in _tensors(theta).items()}
        _check_finite(tensors, "inner update")
        theta = _rebuild(params, tensors)
    return theta


def meta_update(params, tasks: Sequence[tuple[object, object]], config: EpisodicConfig,
                grad_fn: GradFn | None = None):
    """First-order outer step over ``(train split, test split)`` task pairs.

    The outer gradient is the task-averaged test-split gradient evaluated at
    the adapted parameters and applied directly to ``params``.
    """
    if not tasks:
        raise ValueError("meta_update needs at least one task")
    grad_fn = grad_fn or _cnn_grad
    base = _tensors(params)
    total = {n: np.zeros_like(t) for n, t in base.items()}
    for task_train, task_test in tasks:
        adapted = inner_adapt(params, task_train, config, grad_fn)
        g = grad_fn(adapted, task_test)
        for n in total:
            total[n] += g[n]
    n_tasks = len(tasks)
    tensors = {n: t - _rate(config.outer_learning_rate, n) * (total[n] / n_tasks) for n, t in base.items()}
    _check_finite(tensors, "meta update")
    return _rebuild(params, tensors)


def sample_tasks(train_set: Dataset, config: EpisodicConfig, rng) -> list[tuple[tuple, tuple]]:
    """Class-balanced resamples of the training set, each split into support/query parts."""
    classes = np.unique(train_set.labels)
    per_class = max(2, config.task_size // len(classes))
    tasks = []
    for _ in range(config.tasks_per_meta_batch):
        picked = np.concatenate([
            rng.choice(np.flatnonzero(train_set.labels == c), size=per_class, replace=False)
            for c in classes
        ])
        sub_labels = train_set.labels[picked]
        tr, te = split_indices(sub_labels, config.task_train_fraction, int(rng.integers(2**31)))
        tasks.append((
            (train_set.images[picked[tr]], sub_labels[tr]),
            (train_set.images[picked[te]], sub_labels[te]),
        ))
    return tasks


def _train_episodic(params, train_set, config, episodic, rng, metrics, progress):
    for epoch in range(config.epochs):
        for _ in range(episodic.meta_batches_per_epoch):
            params = meta_update(params, sample_tasks(train_set, episodic, rng), episodic)
        logits = predict_logits(params, train_set.images)
        loss = batch_loss(params, train_set.images, train_set.labels)
        metrics.epoch_loss.append(loss)
        metrics.epoch_accuracy.append(float((np.argmax(logits, axis=1) == train_set.labels).mean()))
        if progress:
            progress(epoch + 1, metrics.epoch_loss[-1], metrics.epoch_accuracy[-1])
    return params
