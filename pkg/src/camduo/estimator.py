"""Scikit-learn style estimator facade over the dual-network trainer.

`WeaklySupervisedSegmenter.fit` consumes images with image-level multi-hot
labels only; `predict` emits per-pixel class maps from multi-scale CAMs and
`score` reports mIoU against ground-truth masks.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_random_state

from .data import ImageSample
from .mam import MamConfig
from .metrics import infer_msinf_cams, miou, pseudo_labels
from .rcm import RcmConfig
from .train import TrainConfig, Trainer


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


class WeaklySupervisedSegmenter(BaseEstimator):
    """CAM-based segmenter trained from image-level labels alone.

    Parameters follow the training configuration defaults; `mode` selects the
    supervision recipe (full, baseline, rcm-only, mam-only, smm, mmm).
    `msinf_mode` fuses multi-scale CAMs at inference; `region_msinf_mode`
    fuses the teacher's CAMs when forming contrastive class regions during
    training.
    """

    def __init__(
        self,
        n_classes: int = 4,
        embed_dim: int = 256,
        width: int = 16,
        epochs: int = 20,
        batch_size: int = 16,
        crop: int = 48,
        base_lr: float = 0.01,
        poly_power: float = 0.9,
        lambda3_activation_epoch: int = 10,
        ema_momentum: float = 0.997,
        threshold: float = 0.20,
        temperature: float = 0.5,
        loss_form: str = "infonce_log",
        mode: str = "full",
        msinf_mode: str = "mean",
        region_msinf_mode: str = "max",
        inference_scales: Sequence[float] = (0.5, 1.0, 2.0),
        random_state: int = 0,
    ):
        self.n_classes = n_classes
        self.embed_dim = embed_dim
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.crop = crop
        self.base_lr = base_lr
        self.poly_power = poly_power
        self.lambda3_activation_epoch = lambda3_activation_epoch
        self.ema_momentum = ema_momentum
        self.threshold = threshold
        self.temperature = temperature
        self.loss_form = loss_form
        self.mode = mode
        self.msinf_mode = msinf_mode
        self.region_msinf_mode = region_msinf_mode
        self.inference_scales = inference_scales
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            poly_power=self.poly_power,
            epochs=self.epochs,
            batch_size=self.batch_size,
            crop=self.crop,
            lambda3_activation_epoch=min(self.lambda3_activation_epoch, self.epochs),
            ema_momentum=self.ema_momentum,
            n_classes=self.n_classes,
            embed_dim=self.embed_dim,
            width=self.width,
            msinf_mode=self.region_msinf_mode,
            mode=self.mode,
            seed=check_random_state(self.random_state).randint(2**31)
            if not isinstance(self.random_state, (int, np.integer))
            else int(self.random_state),
            rcm=RcmConfig(threshold=self.threshold, temperature=self.temperature,
                          loss_form=self.loss_form),
            mam=MamConfig(),
        )

    def fit(self, X, y, masks: Optional[Sequence[np.ndarray]] = None):
        """Train on images X (n, H, W, 3) with multi-hot labels y (n, N).

        `masks` are optional per-image ground-truth maps used only to keep
        augmentation crops label-preserving; they never enter a loss.
        """
        X = _check_images(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0], self.n_classes):
            raise ValueError(f"labels must have shape (n, {self.n_classes}), got {y.shape}")
        samples = [
            ImageSample(X[i], y[i].astype(np.int64),
                        None if masks is None else masks[i])
            for i in range(X.shape[0])
        ]
        cfg = self._train_config()
        steps = max(1, math.ceil(len(samples) / cfg.batch_size))
        trainer = Trainer(cfg, steps_per_epoch=steps)
        trainer.fit(samples)
        self.trainer_ = trainer
        self.network_ = trainer.pair.main
        return self

    def _require_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("call fit before predict/score")

    def predict_cams(self, X, y=None) -> list:
        """Normalized msinf CAM stacks, one (N, H, W) tensor per image."""
        self._require_fitted()
        X = _check_images(X)
        labels = self._labels_for(X, y)
        return [
            infer_msinf_cams(
                self.network_,
                ImageSample(X[i], labels[i]),
                scales=self.inference_scales,
                msinf_mode=self.msinf_mode,
            )
            for i in range(X.shape[0])
        ]

    def _labels_for(self, X, y) -> np.ndarray:
        if y is not None:
            return np.asarray(y, dtype=np.int64)
        # Without image-level labels, fall back to the classifier's own
        # predictions (top-1 forced on when nothing clears 0.5).
        labels = np.zeros((X.shape[0], self.n_classes), dtype=np.int64)
        with torch.no_grad():
            for i in range(X.shape[0]):
                img = torch.from_numpy(X[i]).permute(2, 0, 1)[None]
                _, _, scores = self.network_(img)
                s = scores[0].numpy()
                labels[i] = (s > 0.5).astype(np.int64)
                if labels[i].sum() == 0:
                    labels[i, int(s.argmax())] = 1
        return labels

    def predict(self, X, y=None) -> np.ndarray:
        """Per-pixel class maps (n, H, W) in {0..N}."""
        self._require_fitted()
        X = _check_images(X)
        labels = self._labels_for(X, y)
        cams = self.predict_cams(X, labels)
        return np.stack(
            [
                pseudo_labels(cams[i], torch.from_numpy(labels[i]), self.threshold).numpy()
                for i in range(X.shape[0])
            ]
        )

    def score(self, X, y_masks, y=None) -> float:
        """mIoU of predicted maps against ground-truth masks."""
        preds = self.predict(X, y)
        gts = [np.asarray(m) for m in y_masks]
        _, mean_iou = miou(list(preds), gts, self.n_classes)
        return mean_iou
