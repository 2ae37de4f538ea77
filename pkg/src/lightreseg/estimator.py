"""scikit-learn style wrapper around network construction and training."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig
from .data import LabeledSample, crop_back, pad_amounts, pad_image
from .metrics import confusion, metrics
from .model import build
from .nn import no_grad
from .training import AugmentConfig, TrainConfig, predict_masks, train_loop
from .validation import check_consistent, check_images, check_masks


class LightReSegSegmenter(BaseEstimator):
    """Semantic segmenter for ``(N, 3, H, W)`` images in [0, 1].

    ``fit`` builds a fresh network (classes inferred from ``y`` unless
    ``num_classes`` is given) and trains it; ``predict`` returns ``(N, H, W)``
    label maps at the input extents. ``score`` is the mIoU.

    Example::

        est = LightReSegSegmenter(channel_multiplier=0.25, epochs=5).fit(X, y)
        masks = est.predict(X)
    """

    def __init__(self, variant="base_maa_trans3", channel_multiplier=1.0, min_channels=16,
                 num_classes=None, epochs=120, batch_size=4, lr=1e-3, halve_every=40,
                 max_steps=None, augment=True, seed=0, dtype="float32"):
        self.variant = variant
        self.channel_multiplier = channel_multiplier
        self.min_channels = min_channels
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.halve_every = halve_every
        self.max_steps = max_steps
        self.augment = augment
        self.seed = seed
        self.dtype = dtype

    def _model_config(self, extent, k) -> ModelConfig:
        base = ModelConfig.for_variant(self.variant, channel_multiplier=self.channel_multiplier,
                                       min_channels=self.min_channels, num_classes=k)
        top, left, bottom, right = pad_amounts(*extent, base.input_pad_to)
        return replace(base, image_size=(extent[0] + top + bottom, extent[1] + left + right))

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr0=self.lr, halve_every=self.halve_every, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed, max_steps=self.max_steps,
                           augment=AugmentConfig(enabled=bool(self.augment)))

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_masks(y, self.num_classes)
        check_consistent(X, y)
        k = self.num_classes if self.num_classes is not None else max(2, int(y.max()) + 1)
        cfg = self._model_config(X.shape[2:], k)
        model = build(cfg, self.seed).astype(np.dtype(self.dtype))
        train = [LabeledSample(img, m, f"s{i}") for i, (img, m) in enumerate(zip(X, y))]
        val = None
        if X_val is not None:
            Xv, yv = check_images(X_val, "X_val"), check_masks(y_val, k, "y_val")
            check_consistent(Xv, yv)
            val = [LabeledSample(img, m, f"v{i}") for i, (img, m) in enumerate(zip(Xv, yv))]
        self.history_ = train_loop(model, train, self._train_config(), val)
        self.model_ = model
        self.n_classes_ = k
        self.classes_ = np.arange(k)
        return self

    def decision_function(self, X) -> np.ndarray:
        """Raw ``(N, K, H, W)`` logits, eval-mode batch norm."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        pad = pad_amounts(*X.shape[2:], self.model_.cfg.input_pad_to)
        dtype = self.model_.decoder.head.weight.data.dtype
        self.model_.eval()
        out = []
        with no_grad():
            for img in X:
                logits = self.model_(pad_image(img.astype(dtype), pad)[None])[0]
                out.append(crop_back(logits, pad))
        self.model_.train()
        return np.stack(out)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        samples = [LabeledSample(img, None) for img in X]
        return np.stack(predict_masks(self.model_, samples))

    def score(self, X, y) -> float:
        check_is_fitted(self, "model_")
        y = check_masks(y, self.n_classes_)
        pred = self.predict(X)
        return metrics(confusion(pred, y, self.n_classes_)).miou
