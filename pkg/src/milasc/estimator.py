"""scikit-learn compatible wrapper around the MIL network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import io
from .model import MILNetwork, ModelConfig, Prediction
from .training import TrainResult, evaluate, predict, train


def check_features(X, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate a stack of log-mel maps; returns float64 (n, bands, frames)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected features shaped (n_clips, bands, frames), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no clips given")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or Inf")
    if shape is not None and X.shape[1:] != tuple(shape):
        raise ValueError(f"features have shape {X.shape[1:]}, model expects {tuple(shape)}")
    return X


def _child_seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


class MILSceneClassifier(ClassifierMixin, BaseEstimator):
    """Acoustic scene classifier built on max-pooled instance detectors.

    Parameters
    ----------
    head : {"SD", "MD"}
        One sigmoid detector per class, or ``n_detectors`` affine detectors
        per class max-pooled and softmax-normalised across classes.
    mts : bool
        Insert the dilated multi-temporal-scale block after the CNN.
    n_detectors : int
        Detectors per class for the MD head.
    channels, instance_dim : CNN block widths and instance vector size.
    epochs, batch_size, learning_rate, lr_decay, lr_patience :
        Adam with a plateau schedule on validation accuracy.
    alpha : float or None
        Positive-term weight of the loss; ``None`` means ``n_classes - 1``.
    loss : {"wbce", "nll"}
    random_state : int
        Seeds both weight initialisation and shuffling.
    """

    def __init__(self, head="SD", mts=False, n_detectors=4, channels=(32, 64, 128),
                 instance_dim=256, epochs=50, batch_size=256, learning_rate=1e-3,
                 lr_decay=0.5, lr_patience=3, alpha=None, loss="wbce", random_state=0):
        self.head = head
        self.mts = mts
        self.n_detectors = n_detectors
        self.channels = channels
        self.instance_dim = instance_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_patience = lr_patience
        self.alpha = alpha
        self.loss = loss
        self.random_state = random_state

    def _config(self, n_classes: int, shape) -> ModelConfig:
        init_seed, _ = _child_seeds(self.random_state)
        return ModelConfig(head=self.head, mts=self.mts, k=self.n_detectors, n_classes=n_classes,
                           channels=tuple(self.channels), instance_dim=self.instance_dim,
                           input_shape=tuple(shape), seed=init_seed)

    def fit(self, X, y, eval_set=None, callback=None):
        """Train; ``eval_set=(X_val, y_val)`` drives LR decay and best-epoch
        selection (defaults to the training data)."""
        X = check_features(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} clips but {len(y)} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if eval_set is None:
            X_val, yv_idx = X, y_idx
        else:
            X_val = check_features(eval_set[0], X.shape[1:])
            yv_idx = self._encode(eval_set[1])
        self.network_ = MILNetwork(self._config(len(self.classes_), X.shape[1:]))
        _, shuffle_seed = _child_seeds(self.random_state)
        self.result_: TrainResult = train(
            self.network_, X, y_idx, X_val, yv_idx, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.learning_rate, lr_decay=self.lr_decay,
            lr_patience=self.lr_patience, alpha=self.alpha, loss=self.loss, seed=shuffle_seed,
            callback=callback)
        self.network_.load_state_dict(self.result_.best_state)
        self.network_.eval()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError(f"unknown labels: {sorted(set(y.tolist()) - set(self.classes_.tolist()))}")
        return idx

    @property
    def history_(self):
        return self.result_.log

    def predict_instances(self, X) -> Prediction:
        """Bag scores, per-instance scores and argmax instance per class."""
        check_is_fitted(self, "network_")
        return predict(self.network_, check_features(X, self.network_.config.input_shape))

    def decision_function(self, X) -> np.ndarray:
        """Per-class bag scores (not normalised across classes for SD)."""
        return self.predict_instances(X).bag_scores

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def confusion(self, X, y):
        """(accuracy, ConfusionMatrix) on labelled data."""
        check_is_fitted(self, "network_")
        X = check_features(X, self.network_.config.input_shape)
        acc, cm, _ = evaluate(self.network_, X, self._encode(y),
                              [str(c) for c in self.classes_])
        return acc, cm

    def run_config(self) -> io.RunConfig:
        cfg = self.network_.config
        return io.RunConfig(
            head=cfg.head, mts=cfg.mts, k=cfg.k, channels=cfg.channels,
            instance_dim=cfg.instance_dim, bands=cfg.input_shape[0],
            frames=cfg.input_shape[1], epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, lr_decay=self.lr_decay,
            lr_patience=self.lr_patience,
            alpha="auto" if self.alpha is None else str(self.alpha), loss=self.loss,
            seed=self.random_state, classes=tuple(str(c) for c in self.classes_))

    def save(self, path, config: io.RunConfig | None = None) -> None:
        check_is_fitted(self, "network_")
        io.save_checkpoint(path, self.network_.state_dict(), config or self.run_config())

    @classmethod
    def from_run_config(cls, rc: io.RunConfig) -> "MILSceneClassifier":
        return cls(head=rc.head, mts=rc.mts, n_detectors=rc.k, channels=tuple(rc.channels),
                   instance_dim=rc.instance_dim, epochs=rc.epochs, batch_size=rc.batch_size,
                   learning_rate=rc.learning_rate, lr_decay=rc.lr_decay,
                   lr_patience=rc.lr_patience,
                   alpha=None if rc.alpha == "auto" else float(rc.alpha), loss=rc.loss,
                   random_state=rc.seed)

    @classmethod
    def load(cls, path) -> "MILSceneClassifier":
        state, rc = io.load_checkpoint(path)
        if len(rc.classes) < 2:
            raise io.FormatError(f"{path}: checkpoint lists no classes")
        est = cls.from_run_config(rc)
        est.classes_ = np.asarray(rc.classes)
        est.network_ = MILNetwork(est._config(len(rc.classes), (rc.bands, rc.frames)))
        est.network_.load_state_dict(state)
        est.network_.eval()
        est.n_features_in_ = rc.bands * rc.frames
        return est
