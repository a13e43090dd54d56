"""scikit-learn style wrapper around the incremental trainer.

``fit`` trains the first step from scratch; each ``partial_fit`` call is
one incremental step that learns the classes it has not seen before.
Label maps use class ids (0 = background); the channel order inside the
network is an implementation detail exposed only as ``classes_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import ContractViolation
from .losses import LossWeights
from .metrics import confusion_matrix, iou_per_class
from .relabel import IGNORED
from .trainer import METHODS, TrainConfig, infer, train_incremental_step, train_step0


def check_images(X, in_channels: int = 3) -> np.ndarray:
    """Validate an image batch ``[N, C, H, W]`` of finite floats."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ContractViolation(f"images must be [N, C, H, W], got shape {X.shape}")
    if X.shape[1] != in_channels:
        raise ContractViolation(f"expected {in_channels} channels, got {X.shape[1]}")
    if X.shape[0] == 0:
        raise ContractViolation("empty image batch")
    if not np.issubdtype(X.dtype, np.number):
        raise ContractViolation(f"images must be numeric, got {X.dtype}")
    X = X.astype(np.float64, copy=False)
    if not np.isfinite(X).all():
        raise ContractViolation("images contain NaN or inf")
    return X


def check_label_maps(y, X: np.ndarray | None = None) -> np.ndarray:
    """Validate integer label maps ``[N, H, W]`` aligned with ``X``."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ContractViolation(f"label maps must be [N, H, W], got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not (np.issubdtype(y.dtype, np.floating) and np.all(y == np.round(y))):
            raise ContractViolation("label maps must hold integer class ids")
    y = y.astype(np.int64)
    if y.min(initial=0) < 0 or y.max(initial=0) > IGNORED:
        raise ContractViolation(f"class ids must lie in 0..{IGNORED}")
    if X is not None and (y.shape[0] != X.shape[0] or y.shape[1:] != X.shape[2:]):
        raise ContractViolation(f"labels {y.shape} do not match images {X.shape}")
    return y


class IncrementalSegmenter(BaseEstimator):
    """Pixel classifier that learns new classes step by step without old data."""

    def __init__(self, method="gsc", channels=(16, 16, 16), epochs_step0=None, epochs_per_step=30,
                 batch_size=8, lr_step0=1e-2, lr_incremental=1e-3, lr_decay=0.9, momentum=0.9,
                 softness=0.3, sharpness=0.1, pooled=0.01, stats_mode="ema", temperature=1.0,
                 seed=0, dtype="float32"):
        self.method = method
        self.channels = channels
        self.epochs_step0 = epochs_step0
        self.epochs_per_step = epochs_per_step
        self.batch_size = batch_size
        self.lr_step0 = lr_step0
        self.lr_incremental = lr_incremental
        self.lr_decay = lr_decay
        self.momentum = momentum
        self.softness = softness
        self.sharpness = sharpness
        self.pooled = pooled
        self.stats_mode = stats_mode
        self.temperature = temperature
        self.seed = seed
        self.dtype = dtype

    def _config(self) -> TrainConfig:
        if self.method not in METHODS:
            raise ContractViolation(f"method must be one of {sorted(METHODS)}")
        return TrainConfig(
            epochs_per_step=self.epochs_per_step, epochs_step0=self.epochs_step0,
            batch_size=self.batch_size, lr_step0=self.lr_step0, lr_incremental=self.lr_incremental,
            lr_decay=self.lr_decay, momentum=self.momentum,
            weights=LossWeights(self.softness, self.sharpness, self.pooled),
            seed=self.seed, dtype=self.dtype, channels=tuple(self.channels),
            stats_mode=self.stats_mode, temperature=self.temperature,
        )

    def _to_channels(self, y: np.ndarray) -> np.ndarray:
        lut = np.full(IGNORED + 1, -1, dtype=np.int64)
        lut[self.classes_] = np.arange(len(self.classes_))
        lut[IGNORED] = IGNORED
        out = lut[y]
        if (out < 0).any():
            raise ContractViolation(f"labels contain classes outside {self.classes_.tolist()}")
        return out

    def fit(self, X, y):
        """Train a fresh network on the first step's classes."""
        config = self._config()
        X = check_images(X)
        y = check_label_maps(y, X)
        new = np.setdiff1d(np.unique(y), [0, IGNORED])
        if new.size == 0:
            raise ContractViolation("the first step needs at least one foreground class")
        self.classes_ = np.concatenate([[0], new]).astype(np.int64)
        self.network_, log = train_step0(config, X, self._to_channels(y), len(new))
        self.step_classes_ = [new.tolist()]
        self.logs_ = [log]
        return self

    def partial_fit(self, X, y):
        """One incremental step; classes in ``y`` not seen before become new outputs.

        The first call on an unfitted estimator behaves like :meth:`fit`.
        """
        if not hasattr(self, "network_"):
            return self.fit(X, y)
        config = self._config()
        X = check_images(X)
        y = check_label_maps(y, X)
        new = np.setdiff1d(np.unique(y), np.concatenate([self.classes_, [IGNORED]]))
        if new.size == 0:
            raise ContractViolation("an incremental step needs at least one unseen class")
        self.classes_ = np.concatenate([self.classes_, new]).astype(np.int64)
        self.network_, log, _ = train_incremental_step(config, self.network_, X, self._to_channels(y),
                                                       len(new), self.method)
        self.step_classes_.append(new.tolist())
        self.logs_.append(log)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Softmax over ``classes_`` per pixel, shape ``[N, K, H, W]``."""
        check_is_fitted(self, "network_")
        X = check_images(X, self.network_.in_channels)
        z = infer(self.network_, X.astype(self.network_.dtype)).logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        """Class id per pixel, shape ``[N, H, W]``."""
        check_is_fitted(self, "network_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def score(self, X, y) -> float:
        """Mean IoU over classes present in ``y`` or the prediction."""
        check_is_fitted(self, "network_")
        X = check_images(X)
        y = check_label_maps(y, X)
        pred = np.argmax(self.predict_proba(X), axis=1)
        ious = iou_per_class(confusion_matrix(self._to_channels(y), pred, len(self.classes_)))
        return float(np.nanmean(ious))
