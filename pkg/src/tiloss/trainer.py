"""Toy-scale trainer: an MLP with a 2-D, L2-normalised feature layer and a
cosine classification head, trained by hand-written backpropagation and
SGD with momentum.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .idx import IMAGES_MAGIC, read_idx
from .loss import (CosineBatch, LossConfig, alpha_schedule, am_softmax_loss,
                   softmax_cross_entropy, template_instance_loss)
from .numeric import prng

log = logging.getLogger(__name__)

LOSS_MODES = ("softmax", "am", "template_instance")
LEAK = 0.01
NORM_EPS = 1e-12


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, D) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    n_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        self.images = images.reshape(images.shape[0], int(np.prod(images.shape[1:])))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_uint8(cls, images, labels, n_classes=None):
        labels = np.asarray(labels, dtype=np.int64)
        n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
        return cls(np.asarray(images, dtype=np.float64) / 255.0, labels, n_classes)


def load_idx_dataset(images_path, labels_path, n_classes=None):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected a 3-D image array (magic 0x{IMAGES_MAGIC:08x})")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected a 1-D label array")
    return Dataset.from_uint8(images, labels, n_classes)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class ToyNetwork:
    """``input -> hidden... (leaky ReLU) -> feature (linear, L2-normalised) -> cosines``."""

    def __init__(self, input_dim, n_classes, hidden=(256, 64), feature_dim=2, seed=0):
        self.sizes = [input_dim, *hidden, feature_dim]
        self.n_classes = n_classes
        rng = prng(seed, 0)
        self.params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = np.sqrt(6.0 / fan_in)
            self.params[f"W{i}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            self.params[f"b{i}"] = np.zeros(fan_out)
        w = rng.normal(size=(n_classes, feature_dim))
        self.params["classes"] = w / np.linalg.norm(w, axis=1, keepdims=True)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def feature_dim(self):
        return self.sizes[-1]

    @property
    def class_weights(self):
        return self.params["classes"]

    def forward(self, x):
        acts = [x]
        pre = []
        a = x
        for i in range(self.n_layers):
            h = a @ self.params[f"W{i}"] + self.params[f"b{i}"]
            pre.append(h)
            a = np.where(h > 0, h, LEAK * h) if i < self.n_layers - 1 else h
            acts.append(a)
        features = acts[-1]
        norm = np.maximum(np.linalg.norm(features, axis=1, keepdims=True), NORM_EPS)
        unit = features / norm
        cos = unit @ self.class_weights.T
        return cos, {"acts": acts, "pre": pre, "norm": norm, "unit": unit}

    def features(self, x):
        """Pre-normalisation and unit features."""
        _, cache = self.forward(x)
        return cache["acts"][-1], cache["unit"]

    def backward(self, cache, dcos):
        grads = {}
        unit, norm = cache["unit"], cache["norm"]
        grads["classes"] = dcos.T @ unit
        dunit = dcos @ self.class_weights
        dh = (dunit - unit * np.sum(unit * dunit, axis=1, keepdims=True)) / norm
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                dh = da * np.where(cache["pre"][i] > 0, 1.0, LEAK)
            grads[f"W{i}"] = cache["acts"][i].T @ dh
            grads[f"b{i}"] = dh.sum(axis=0)
            if i:
                da = dh @ self.params[f"W{i}"].T
        return grads

    def renormalize(self):
        w = self.params["classes"]
        self.params["classes"] = w / np.maximum(np.linalg.norm(w, axis=1, keepdims=True), NORM_EPS)


# ---------------------------------------------------------------------------
# configuration and report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "softmax"
    loss: LossConfig = field(default_factory=LossConfig)
    alpha_mode: str = "schedule"  # or "fixed": alpha = alpha_max throughout
    batch_size: int = 128
    momentum: float = 0.9
    base_lr: float = 0.003
    lr_decay: float = 0.1
    lr_step_fraction: float = 0.5  # decay every half of max_iter
    warmup_fraction: float = 0.05  # linear ramp of the learning rate at the start
    max_iter: int = 3000
    seed: int = 0
    hidden: tuple = (256, 64)
    feature_dim: int = 2

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.alpha_mode not in ("schedule", "fixed"):
            raise ValueError("alpha_mode must be 'schedule' or 'fixed'")
        if self.batch_size <= 0 or self.base_lr <= 0 or self.max_iter <= 0:
            raise ValueError("batch_size, base_lr and max_iter must be positive")
        if not 0 <= self.warmup_fraction < 1 or not 0 < self.lr_step_fraction:
            raise ValueError("warmup_fraction must lie in [0, 1) and lr_step_fraction be positive")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainReport:
    config: dict
    init: str
    epochs: list
    train_accuracy: float
    test_accuracy: Optional[float]
    weight_vectors: list
    weight_pair_angles: list
    intra_class_std: list
    mean_intra_class_std: float
    min_inter_class_angle: float
    embedding_path: Optional[str] = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=False)


def lr_at(iteration, cfg: TrainConfig):
    """Step decay every ``lr_step_fraction * max_iter`` iterations after a linear warmup.

    The warmup keeps the first, very large gradients from inflating the raw
    feature norm, which would otherwise freeze the feature directions.
    """
    step = max(1, int(round(cfg.max_iter * cfg.lr_step_fraction)))
    lr = cfg.base_lr * cfg.lr_decay ** ((iteration - 1) // step)
    warmup = int(round(cfg.max_iter * cfg.warmup_fraction))
    if iteration <= warmup:
        lr *= iteration / warmup
    return lr


def _alpha(cfg, iteration):
    """Adaptive-margin bound in force at ``iteration`` (0 outside template_instance mode)."""
    if cfg.loss_mode != "template_instance":
        return 0.0
    if cfg.alpha_mode == "schedule":
        return alpha_schedule(iteration, cfg.max_iter, cfg.loss)
    return cfg.loss.alpha_max


def _loss(cfg, batch, margins, iteration):
    if cfg.loss_mode == "softmax":
        return softmax_cross_entropy(batch, cfg.loss), 0.0
    if cfg.loss_mode == "am":
        return am_softmax_loss(batch, cfg.loss), 0.0
    alpha = _alpha(cfg, iteration)
    return template_instance_loss(batch, cfg.loss, margins, alpha), alpha


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def pair_angles(vectors):
    """Pairwise angles between unit vectors, in [0, pi]."""
    return np.arccos(np.clip(vectors @ vectors.T, -1.0, 1.0))


def evaluate_features(unit, labels, weights):
    """Accuracy and angular statistics of unit features against class weights."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    n = weights.shape[0]
    pred = np.argmax(unit @ weights.T, axis=1)
    intra = []
    for c in range(n):
        f = unit[labels == c]
        if len(f) == 0:
            intra.append(None)
            continue
        mean = f.sum(axis=0)
        mean = mean / max(np.linalg.norm(mean), NORM_EPS)
        theta = np.arccos(np.clip(f @ mean, -1.0, 1.0))
        intra.append(float(np.sqrt(np.mean(theta ** 2))))
    angles = pair_angles(weights)
    off = angles[~np.eye(n, dtype=bool)]
    present = [v for v in intra if v is not None]
    return {
        "accuracy": float(np.mean(pred == labels)),
        "intra_class_std": intra,
        "mean_intra_class_std": float(np.mean(present)),
        "weight_pair_angles": angles,
        "min_inter_class_angle": float(off.min()),
    }


def evaluate(net: ToyNetwork, dataset: Dataset):
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    _, unit = net.features(dataset.images)
    return evaluate_features(unit, dataset.labels, net.class_weights)


def export_embeddings(net: ToyNetwork, dataset: Dataset, path):
    """CSV rows ``label,f1,f2`` of raw features, then class weights with label -1."""
    if net.feature_dim != 2:
        raise ValueError(f"embedding export needs a 2-D feature layer, got {net.feature_dim}")
    raw, _ = net.features(dataset.images)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "f1", "f2"])
        for label, f in zip(dataset.labels, raw):
            writer.writerow([int(label), format(f[0], ".17g"), format(f[1], ".17g")])
        for w in net.class_weights:
            writer.writerow([-1, format(w[0], ".17g"), format(w[1], ".17g")])
    return Path(path)


def read_embeddings(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    labels = np.array([int(r[0]) for r in rows])
    values = np.array([[float(r[1]), float(r[2])] for r in rows])
    return labels, values


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _check_inputs(train_set, test_set, margins):
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if test_set is not None and test_set.images.shape[1] != train_set.images.shape[1]:
        raise ValueError("train and test images differ in dimension")
    if margins is not None:
        table = np.asarray(getattr(margins, "matrix", margins))
        if table.shape != (train_set.n_classes, train_set.n_classes):
            raise ValueError(f"margin table {table.shape} does not match {train_set.n_classes} classes")


def train(train_set: Dataset, cfg: TrainConfig, margins=None, test_set: Optional[Dataset] = None,
          embedding_path=None, callback=None):
    """Train a fresh :class:`ToyNetwork`; returns ``(net, report)``.

    ``callback(iteration, mean_loss, alpha)`` is invoked after every step.
    """
    _check_inputs(train_set, test_set, margins)
    net = ToyNetwork(train_set.images.shape[1], train_set.n_classes, cfg.hidden,
                     cfg.feature_dim, cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    shuffle = prng(cfg.seed, 1)
    order, cursor = shuffle.permutation(len(train_set)), 0
    epochs = []
    correct = seen = 0
    loss_sum = 0.0
    table = None if margins is None else np.asarray(getattr(margins, "matrix", margins))

    def close_epoch(iteration):
        entry = {"epoch": len(epochs) + 1, "iteration": iteration,
                 "train_accuracy": correct / seen, "mean_loss": loss_sum / seen,
                 "test_accuracy": None}
        if test_set is not None and len(test_set):
            cos, _ = net.forward(test_set.images)
            entry["test_accuracy"] = float(np.mean(np.argmax(cos, axis=1) == test_set.labels))
        epochs.append(entry)

    for it in range(1, cfg.max_iter + 1):
        if cursor >= len(order):
            close_epoch(it - 1)
            correct = seen = 0
            loss_sum = 0.0
            order, cursor = shuffle.permutation(len(train_set)), 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        x, y = train_set.images[idx], train_set.labels[idx]

        with np.errstate(over="ignore", invalid="ignore"):
            cos, cache = net.forward(x)
        finite = bool(np.all(np.isfinite(cos)))
        if finite:
            ev, alpha = _loss(cfg, CosineBatch(np.clip(cos, -1.0, 1.0), y), table, it)
            finite = np.isfinite(ev.mean) and bool(np.all(np.isfinite(ev.grad)))
        else:
            alpha = _alpha(cfg, it)
        if not finite:
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it}: alpha={alpha:.6g}, "
                f"max|cos|={np.max(np.abs(cos)):.6g}")
        correct += int(np.sum(np.argmax(cos, axis=1) == y))
        seen += len(y)
        loss_sum += float(np.sum(ev.losses))

        grads = net.backward(cache, ev.grad)
        lr = lr_at(it, cfg)
        for k, g in grads.items():
            velocity[k] = cfg.momentum * velocity[k] + lr * g
            net.params[k] -= velocity[k]
        net.renormalize()
        if callback is not None:
            callback(it, ev.mean, alpha)
    if seen:
        close_epoch(cfg.max_iter)

    final = evaluate(net, train_set)
    test_acc = evaluate(net, test_set)["accuracy"] if test_set is not None and len(test_set) else None
    if embedding_path is not None:
        export_embeddings(net, train_set, embedding_path)
    report = TrainReport(
        config=cfg.to_dict(),
        init=f"uniform(+-sqrt(6/fan_in)) weights, zero biases, gaussian unit class rows; seed {cfg.seed}",
        epochs=epochs,
        train_accuracy=final["accuracy"],
        test_accuracy=test_acc,
        weight_vectors=net.class_weights.tolist(),
        weight_pair_angles=final["weight_pair_angles"].tolist(),
        intra_class_std=final["intra_class_std"],
        mean_intra_class_std=final["mean_intra_class_std"],
        min_inter_class_angle=final["min_inter_class_angle"],
        embedding_path=None if embedding_path is None else str(embedding_path),
    )
    log.info("trained %s seed=%d: train acc %.4f test acc %s", cfg.loss_mode, cfg.seed,
             report.train_accuracy, test_acc)
    return net, report
