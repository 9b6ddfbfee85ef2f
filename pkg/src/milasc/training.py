"""Losses, optimiser, LR schedule, the training loop and evaluation metrics."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import MILNetwork, Prediction, aggregate, classify

log = logging.getLogger(__name__)

CLAMP = 1e-12


class NumericalError(ArithmeticError):
    """NaN/Inf encountered during training."""


def _check_one_hot(labels: np.ndarray) -> None:
    if labels.ndim != 2 or not np.all((labels == 0) | (labels == 1)) \
            or not np.all(labels.sum(axis=1) == 1):
        raise ValueError("labels must be one-hot rows")


def one_hot(y, n_classes: int) -> np.ndarray:
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), np.asarray(y)] = 1.0
    return out


def weighted_bce(scores, labels, alpha: float | None = None) -> float:
    """Mean over the batch of the per-bag class-summed weighted BCE.

    ``alpha`` (weight of the positive term) defaults to ``C - 1``.
    """
    s, y = np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    _check_one_hot(y)
    alpha = s.shape[1] - 1 if alpha is None else alpha
    s = np.clip(s, CLAMP, 1.0 - CLAMP)
    per_bag = -(alpha * y * np.log(s) + (1.0 - y) * np.log(1.0 - s)).sum(axis=1)
    return float(per_bag.mean())


def weighted_bce_grad(scores, labels, alpha: float | None = None) -> np.ndarray:
    s, y = np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    alpha = s.shape[1] - 1 if alpha is None else alpha
    inside = (s > CLAMP) & (s < 1.0 - CLAMP)
    s = np.clip(s, CLAMP, 1.0 - CLAMP)
    g = -(alpha * y / s - (1.0 - y) / (1.0 - s)) / s.shape[0]
    return np.where(inside, g, 0.0)


def nll(scores, labels, alpha=None) -> float:
    """-log of the true-class bag score (alternative loss for the MD head)."""
    s, y = np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    _check_one_hot(y)
    return float(-(y * np.log(np.clip(s, CLAMP, 1.0))).sum(axis=1).mean())


def nll_grad(scores, labels, alpha=None) -> np.ndarray:
    s, y = np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    inside = s > CLAMP
    return np.where(inside, -y / np.clip(s, CLAMP, 1.0) / s.shape[0], 0.0)


LOSSES = {"wbce": (weighted_bce, weighted_bce_grad), "nll": (nll, nll_grad)}


class Adam:
    """Bias-corrected Adam over named parameter arrays (updated in place)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without a
    strictly better validation accuracy."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 3):
        self.optimizer, self.factor, self.patience = optimizer, factor, patience
        self.best = -np.inf
        self.bad_epochs = 0

    def step(self, accuracy: float) -> float:
        if accuracy > self.best:
            self.best = accuracy
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.optimizer.lr *= self.factor
                self.bad_epochs = 0
        return self.optimizer.lr


class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    def __init__(self, n_classes: int, class_names: list[str] | None = None):
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        self.class_names = list(class_names) if class_names else [str(i) for i in range(n_classes)]

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int, class_names=None) -> "ConfusionMatrix":
        cm = cls(n_classes, class_names)
        np.add.at(cm.counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cm

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    @property
    def recall(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)

    def to_csv(self) -> str:
        names = self.class_names
        lines = [",".join(["true\\pred"] + names + ["recall"])]
        for i, name in enumerate(names):
            row = [name] + [str(v) for v in self.counts[i]] + [f"{self.recall[i]:.6f}"]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    lr: float

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.train_loss!r}\t{self.val_accuracy!r}\t{self.lr!r}"


@dataclass
class TrainResult:
    log: list[EpochRecord] = field(default_factory=list)
    best_state: dict[str, np.ndarray] | None = None
    best_epoch: int = -1
    best_accuracy: float = -1.0

    def log_tsv(self) -> str:
        head = "epoch\ttrain_loss\tval_accuracy\tlr\n"
        return head + "".join(r.tsv() + "\n" for r in self.log)


def predict(network: MILNetwork, X, batch_size: int = 64) -> Prediction:
    """Eval-mode forward in batches (running BN statistics)."""
    network.eval()
    chunks = [network.forward(X[i:i + batch_size]).instance_scores
              for i in range(0, len(X), batch_size)]
    return aggregate(np.concatenate(chunks, axis=0))


def evaluate(network: MILNetwork, X, y, class_names=None, batch_size: int = 64):
    """Return (accuracy, ConfusionMatrix, Prediction)."""
    pred = predict(network, X, batch_size)
    cm = ConfusionMatrix.from_labels(y, classify(pred), network.config.n_classes, class_names)
    return cm.accuracy, cm, pred


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches covering all ``n`` items.

    A trailing batch of one is merged into its predecessor: train-mode batch
    norm has no variance for a single clip.
    """
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def train(network: MILNetwork, X, y, X_val, y_val, epochs: int = 50, batch_size: int = 256,
          lr: float = 1e-3, lr_decay: float = 0.5, lr_patience: int = 3,
          alpha: float | None = None, loss: str = "wbce", seed: int = 0,
          callback=None) -> TrainResult:
    """Mini-batch Adam training, keeping the state of the best-validation epoch.

    ``y``/``y_val`` are integer class indices. Shuffling draws from ``seed``
    only, so a fixed seed and initial network give a bit-identical run.
    """
    X = np.asarray(X, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y, y_val = np.asarray(y), np.asarray(y_val)
    n = len(X)
    if n == 0 or len(X_val) == 0:
        raise ValueError("empty training or validation set")
    if n < 2:
        raise ValueError("need at least 2 training clips for batch-norm statistics")
    if batch_size > n:
        warnings.warn(f"batch size {batch_size} exceeds dataset size {n}; clamped")
        batch_size = n
    loss_fn, loss_grad = LOSSES[loss]
    n_classes = network.config.n_classes
    Y = one_hot(y, n_classes)
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    sched = PlateauScheduler(opt, lr_decay, lr_patience)
    params = {name: p for name, p, _ in network.named_parameters()}
    grads = {name: g for name, _, g in network.named_parameters()}
    result = TrainResult()
    for epoch in range(1, epochs + 1):
        network.train()
        total, seen = 0.0, 0
        lr_used = opt.lr
        for idx in batches(n, batch_size, rng):
            network.zero_grad()
            pred = network.forward(X[idx])
            value = loss_fn(pred.bag_scores, Y[idx], alpha)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            network.backward(loss_grad(pred.bag_scores, Y[idx], alpha))
            opt.step(params, grads)
            total += value * len(idx)
            seen += len(idx)
        acc, _, _ = evaluate(network, X_val, y_val)
        record = EpochRecord(epoch, total / seen, acc, lr_used)
        result.log.append(record)
        if acc > result.best_accuracy:
            result.best_accuracy, result.best_epoch = acc, epoch
            result.best_state = network.state_dict()
        sched.step(acc)
        log.debug("epoch %d loss %.5f val_acc %.4f lr %g", epoch, record.train_loss, acc, lr_used)
        if callback is not None:
            callback(record)
    return result
