"""scikit-learn style wrapper around the detector."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .config import PRESETS, RunConfig, load_config
from .errors import InputError
from .metrics import auroc
from .model import PromptMoEModel
from .trainer import encode_all, train


def _check_images(X, image_size=None) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise InputError(f"expected images shaped (n, h, w, 3), got {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise InputError("image values must lie in [0, 1]")
    if image_size is not None and tuple(X.shape[1:3]) != tuple(image_size):
        raise InputError(f"model was fitted on {tuple(image_size)} images, got {tuple(X.shape[1:3])}")
    return X


class PromptMoEDetector(BaseEstimator):
    """Zero-shot anomaly detector trained on auxiliary classes.

    ``fit(X, y, masks)`` takes RGB images in ``[0, 1]`` with image labels and
    pixel masks; afterwards ``decision_function`` gives image scores and
    ``predict_maps`` per-pixel anomaly maps for images of any class.

    ``config`` is a preset name, a TOML path or a :class:`RunConfig`; the
    explicit keyword arguments override it when not ``None``.
    """

    def __init__(self, config="default", epochs=None, batch_size=None, lr=None, n_experts=None, top_k=None,
                 alpha=None, beta=None, static_prompt=None, threshold=0.5, random_state=0):
        self.config = config
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.n_experts = n_experts
        self.top_k = top_k
        self.alpha = alpha
        self.beta = beta
        self.static_prompt = static_prompt
        self.threshold = threshold
        self.random_state = random_state

    def _resolve_config(self, image_size) -> RunConfig:
        cfg = self.config if isinstance(self.config, RunConfig) else load_config(self.config)
        sets = [f"encoder.image_size=[{image_size[0]}, {image_size[1]}]", f"train.seed={int(self.random_state)}"]
        for key, name in (("train.epochs", "epochs"), ("train.batch_size", "batch_size"), ("train.lr", "lr"),
                          ("vgmop.n_experts", "n_experts"), ("vgmop.top_k", "top_k"), ("loss.alpha", "alpha"),
                          ("loss.beta", "beta")):
            value = getattr(self, name)
            if value is not None:
                sets.append(f"{key}={value!r}")
        if self.static_prompt is not None:
            sets.append(f"vgmop.static_prompt={'true' if self.static_prompt else 'false'}")
        return cfg.with_overrides(sets)

    def fit(self, X, y, masks, classes: Optional[Sequence[str]] = None):
        X = _check_images(X)
        y = check_array(np.asarray(y), ensure_2d=False, dtype=np.int64)
        masks = check_array(np.asarray(masks), allow_nd=True, ensure_2d=False, dtype=np.float64)
        if len(y) != len(X) or masks.shape != X.shape[:3]:
            raise InputError(f"need {len(X)} labels and masks shaped {X.shape[:3]}, got {y.shape} and {masks.shape}")
        cfg = self._resolve_config(X.shape[1:3])
        torch.manual_seed(cfg.train.seed)
        model = PromptMoEModel(cfg.model_config())
        result = train(model, X, masks, y, cfg, train_classes=sorted(set(classes)) if classes is not None else ())
        self.config_ = cfg
        self.model_ = model
        self.train_log_ = result.log
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.classes_ = np.array([0, 1])
        return self

    def _predict(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X, self.config_.encoder.image_size)
        return self.model_.predict(encode_all(self.model_, X))

    def decision_function(self, X) -> np.ndarray:
        """Image anomaly scores in ``[0, 1]``."""
        return self._predict(X)[1]

    score_samples = decision_function

    def predict_maps(self, X) -> np.ndarray:
        """Smoothed pixel anomaly maps ``(n, h, w)``."""
        return self._predict(X)[0]

    def predict(self, X) -> np.ndarray:
        """1 for anomalous, 0 for normal, thresholding the score."""
        return (self.decision_function(X) >= self.threshold).astype(np.int64)

    def score(self, X, y) -> float:
        """Image-level AUROC."""
        return auroc(self.decision_function(X), y)
