"""scikit-learn style wrappers around the trainer.

``MultiDomainMultiTaskClassifier`` takes already standardised volumes; chain
``VolumeStandardizer`` in front of it (once per domain) when the raw
intensities are on different scales.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import network as net
from .exceptions import ConfigError, NumericError
from .trainer import Strategy, TrainConfig, TrainingData, fit, predict_maps, predict_scores
from .validation import check_binary_labels, check_masks, check_volumes


class VolumeStandardizer(TransformerMixin, BaseEstimator):
    """Shift and scale volumes by the voxel mean and population std seen in ``fit``."""

    def fit(self, X, y=None):
        X = check_volumes(X)
        self.mean_ = float(X.mean())
        self.std_ = float(X.std())
        if not self.std_ > 0:
            raise NumericError("cannot standardise volumes with zero variance")
        self.volume_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "std_")
        X = check_volumes(X, self.volume_shape_)
        return (X - self.mean_) / self.std_

    def inverse_transform(self, X):
        check_is_fitted(self, "std_")
        return check_volumes(X, self.volume_shape_) * self.std_ + self.mean_


class MultiDomainMultiTaskClassifier(ClassifierMixin, BaseEstimator):
    """Scan classifier with a shared encoder and an auxiliary ROI decoder.

    ``fit`` takes labelled volumes ``X, y`` and, for strategies that use the
    second domain, unlabelled volumes ``X_roi`` (with ``roi_masks`` for the
    multi-task strategies).  Validation volumes, when given, select the
    epoch with the best validation AUC.
    """

    def __init__(self, strategy="semi_supervised_mdmt", epochs=40, learning_rate=1e-3,
                 batch_size=4, warmup_epochs=10, pseudo_weight=1.0, propagation_period=1,
                 zeta=0.8, base_channels=4, num_blocks=2, growth=4, downsample_factor=2,
                 fc_hidden=16, random_state=0):
        self.strategy = strategy
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.pseudo_weight = pseudo_weight
        self.propagation_period = propagation_period
        self.zeta = zeta
        self.base_channels = base_channels
        self.num_blocks = num_blocks
        self.growth = growth
        self.downsample_factor = downsample_factor
        self.fc_hidden = fc_hidden
        self.random_state = random_state

    def _train_config(self, shape) -> TrainConfig:
        arch = net.ArchConfig(input_shape=tuple(shape), base_channels=self.base_channels,
                              num_blocks=self.num_blocks, growth=self.growth,
                              downsample_factor=self.downsample_factor,
                              fc_hidden=self.fc_hidden, seed=self.random_state)
        return TrainConfig(strategy=self.strategy, arch=arch, epochs=self.epochs,
                           learning_rate=self.learning_rate, batch_size=self.batch_size,
                           warmup_epochs=self.warmup_epochs, pseudo_weight=self.pseudo_weight,
                           propagation_period=self.propagation_period, zeta=self.zeta,
                           seed=self.random_state)

    def fit(self, X, y, X_roi=None, roi_masks=None, X_val=None, y_val=None):
        X = check_volumes(X)
        y = check_binary_labels(y, len(X))
        cfg = self._train_config(X.shape[1:])
        data = TrainingData(x1=X, y1=y)
        if X_roi is not None:
            data.x2 = check_volumes(X_roi, X.shape[1:], "X_roi")
            if roi_masks is not None:
                data.s2 = check_masks(roi_masks, data.x2, "roi_masks")
        elif roi_masks is not None:
            raise ConfigError("roi_masks given without X_roi")
        if X_val is not None:
            data.x1_val = check_volumes(X_val, X.shape[1:], "X_val")
            data.y1_val = check_binary_labels(y_val, len(data.x1_val), "y_val")
        self.classes_ = np.array([0, 1])
        self.volume_shape_ = X.shape[1:]
        run = fit(cfg, data)
        self.params_ = run.best_params
        self.best_epoch_ = run.best_epoch
        self.history_ = run.history
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        p = predict_scores(self.params_, check_volumes(X, self.volume_shape_))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int64)

    def predict_roi(self, X, threshold: float | None = None):
        """ROI probability maps, or binary masks when ``threshold`` is given."""
        check_is_fitted(self, "params_")
        if not Strategy(self.strategy).multitask:
            raise ConfigError(f"strategy {self.strategy} does not train the ROI decoder")
        maps = predict_maps(self.params_, check_volumes(X, self.volume_shape_))
        return maps if threshold is None else net.threshold_mask(maps, threshold)
