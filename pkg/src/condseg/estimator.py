"""scikit-learn style wrapper around the conditioned U-Net."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .conditioning import ConditioningKind
from .evaluation import mean_f1
from .training import SegmentationArrays, TrainConfig, train
from .unet import UNetConfig, build_unet, forward, predict_proba
from . import autodiff as ad
from .validation import check_images, check_masks, check_meta


class ConditionedSegmenter(BaseEstimator):
    """Binary/multi-label segmenter whose U-Net may be conditioned on metadata.

    Parameters mirror :class:`~condseg.unet.UNetConfig` and
    :class:`~condseg.training.TrainConfig`. ``fit`` takes images ``X``,
    masks ``y`` and, for ME/SME/FiLM, a metadata matrix ``meta``. Without an
    explicit validation set a seeded ``validation_fraction`` of ``X`` is held
    out for checkpoint selection.

    Examples
    --------
    >>> est = ConditionedSegmenter(conditioning="sme", epochs=5)
    >>> est.fit(images, masks, meta=meta)          # doctest: +SKIP
    >>> est.predict(images, meta=meta).shape       # doctest: +SKIP
    (N, 1, H, W)
    """

    def __init__(self, conditioning="sme", depth=3, base_channels=8, epochs=20, batch_size=8,
                 lr_min=2e-4, lr_max=8e-4, cycles=8, metadata_mode="correct", class_weights=None,
                 threshold=0.5, validation_fraction=0.2, seed=0):
        self.conditioning = conditioning
        self.depth = depth
        self.base_channels = base_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_min = lr_min
        self.lr_max = lr_max
        self.cycles = cycles
        self.metadata_mode = metadata_mode
        self.class_weights = class_weights
        self.threshold = threshold
        self.validation_fraction = validation_fraction
        self.seed = seed

    @property
    def _uses_meta(self) -> bool:
        return ConditioningKind.parse(self.conditioning).uses_metadata

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           metadata_mode=self.metadata_mode, lr_min=self.lr_min, lr_max=self.lr_max,
                           cycles=self.cycles, class_weights=self.class_weights)

    def fit(self, X, y, meta=None, X_val=None, y_val=None, meta_val=None):
        X = check_images(X)
        y = check_masks(y, X)
        meta = check_meta(meta, len(X), self._uses_meta)
        if X_val is None:
            if not 0 < self.validation_fraction < 1:
                raise ValueError("validation_fraction must lie in (0, 1) when no validation set is given")
            order = np.random.default_rng(self.seed).permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            if n_val >= len(X):
                raise ValueError("not enough samples to hold out a validation set")
            va, tr = np.sort(order[:n_val]), np.sort(order[n_val:])
            X, X_val, y, y_val = X[tr], X[va], y[tr], y[va]
            if meta is not None:
                meta, meta_val = meta[tr], meta[va]
        else:
            X_val = check_images(X_val)
            y_val = check_masks(y_val, X_val)
            meta_val = check_meta(meta_val, len(X_val), self._uses_meta,
                                  None if meta is None else meta.shape[1])

        config = UNetConfig(depth=self.depth, base_channels=self.base_channels, in_channels=X.shape[1],
                            out_channels=y.shape[1], conditioning=self.conditioning,
                            meta_dim=0 if meta is None else meta.shape[1])
        model = build_unet(config, self.seed)
        result = train(model, SegmentationArrays(X, y, meta), SegmentationArrays(X_val, y_val, meta_val),
                       self._train_config())
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.history_ = result.history
        self.n_channels_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self

    def _inputs(self, X, meta):
        check_is_fitted(self, "model_")
        X = check_images(X)
        meta = check_meta(meta, len(X), self._uses_meta, self.model_.config.meta_dim or None)
        return X, meta

    def decision_function(self, X, meta=None) -> np.ndarray:
        """Raw logits, (N, K, H, W)."""
        X, meta = self._inputs(X, meta)
        with ad.no_grad():
            return forward(self.model_, X, meta).data

    def predict_proba(self, X, meta=None) -> np.ndarray:
        X, meta = self._inputs(X, meta)
        return predict_proba(self.model_, X, meta)

    def predict(self, X, meta=None) -> np.ndarray:
        return (self.predict_proba(X, meta) >= self.threshold).astype(np.uint8)

    def score(self, X, y, meta=None) -> float:
        """Mean per-image F1."""
        X = check_images(X)
        y = check_masks(y, X)
        return mean_f1(self.predict(X, meta), y)
