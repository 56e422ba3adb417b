"""End-to-end gradient check of the full training objective on a tiny model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .config import RunConfig, micro_config
from .data import default_class_specs, render_sample
from .model import PromptMoEModel
from .numerics import GradcheckResult, ParamGroup, finite_diff_gradcheck


@dataclass
class ModelGradcheck:
    result: GradcheckResult
    seconds: float
    n_params: int


def gradcheck_batch(cfg: RunConfig, n_images: int = 2, seed: int = 0):
    """Rendered images of the first class, alternating normal/anomalous."""
    spec = default_class_specs()[0]
    size = cfg.encoder.image_size
    rng = np.random.default_rng(seed)
    images, masks, labels = [], [], []
    for i in range(n_images):
        anomalous = i % 2 == 1
        img, mask = render_sample(spec, anomalous, size, rng)
        images.append(img / 255.0)
        masks.append(np.zeros(size) if mask is None else (mask > 127).astype(float))
        labels.append(float(anomalous))
    return np.stack(images), np.stack(masks), np.array(labels)


def gradcheck_model(cfg: Optional[RunConfig] = None, epsilon: float = 1e-5, max_entries: Optional[int] = None,
                    n_images: int = 2, grad_hook: Optional[Callable] = None) -> ModelGradcheck:
    """Compare autograd with central differences for every trainable tensor,
    through the total loss, in float64."""
    cfg = cfg or micro_config()
    model = PromptMoEModel(cfg.model_config()).double()
    model.eval()
    images, masks, labels = gradcheck_batch(cfg, n_images, seed=cfg.train.seed)
    features = model.encode(torch.as_tensor(images, dtype=torch.float64))
    masks_t = torch.as_tensor(masks, dtype=torch.float64)
    labels_t = torch.as_tensor(labels, dtype=torch.float64)

    def objective():
        return model.loss(model(features), masks_t, labels_t, cfg.loss).total

    groups = [ParamGroup(n, p) for n, p in model.trainable_named_parameters()]
    start = time.perf_counter()
    result = finite_diff_gradcheck(objective, groups, epsilon=epsilon, max_entries=max_entries, grad_hook=grad_hook)
    return ModelGradcheck(result, time.perf_counter() - start, sum(g.value.numel() for g in groups))
