"""Pixel anomaly maps and image scores from patch/text similarities."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InternalError, ParameterError


@dataclass
class ScoringConfig:
    tau: float = 0.07
    tau_prime: float = 0.01
    gaussian_sigma: float = 4.0
    normalize_layers: bool = True

    def __post_init__(self):
        if not (self.tau > 0 and self.tau_prime > 0):
            raise ParameterError("temperatures must be positive")
        if self.gaussian_sigma < 0:
            raise ParameterError("gaussian_sigma must be >= 0")


@dataclass
class AnomalyOutput:
    """Batch of maps ``(B, h, w)`` and scores ``(B,)``.

    ``layer_probs`` keeps the per-layer two-class probabilities on the patch
    grid, ``(B, |I|, H, W, 2)``, for inspection.
    """

    maps: torch.Tensor
    scores: torch.Tensor
    layer_probs: Optional[torch.Tensor] = None
    global_probs: Optional[torch.Tensor] = None


def upsample_bilinear(grid_map: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of the last two axes (half-pixel centers, edges clamped)."""
    h, w = size
    if h < 1 or w < 1:
        raise ParameterError(f"target size must be positive, got {size}")
    lead = grid_map.shape[:-2]
    x = grid_map.reshape(-1, 1, *grid_map.shape[-2:])
    y = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    return y.reshape(*lead, h, w)


def class_probabilities(patch_emb: torch.Tensor, text_emb: torch.Tensor, tau: float) -> torch.Tensor:
    """Two-class softmax of ``patch . [t_normal, t_abnormal]`` at temperature ``tau``.

    ``patch_emb``: ``(..., N, D)``; ``text_emb``: ``(..., 2, D)``; result ``(..., N, 2)``.
    """
    if not tau > 0:
        raise ParameterError("tau must be positive")
    logits = patch_emb @ text_emb.transpose(-2, -1)
    return torch.softmax(logits / tau, dim=-1)


def anomaly_map(patch_emb: torch.Tensor, text_emb: torch.Tensor, grid: Tuple[int, int],
                size: Tuple[int, int], cfg: ScoringConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """Average over layers of the upsampled abnormal-class probability.

    ``patch_emb``: ``(B, L, HW[+1], D)`` unit rows, the optional trailing global
    row is dropped; ``text_emb``: ``(B, L, 2, D)`` ordered (normal, abnormal).
    Returns ``(M, probs)`` with ``M`` of shape ``(B, h, w)`` and ``probs`` of
    shape ``(B, L, H, W, 2)``.
    """
    gh, gw = grid
    if text_emb.shape[1] != patch_emb.shape[1]:
        raise InternalError(f"{patch_emb.shape[1]} layers of patches but {text_emb.shape[1]} of prompts")
    patches = patch_emb[:, :, : gh * gw]
    probs = class_probabilities(patches, text_emb, cfg.tau)
    abnormal = probs[..., 1].reshape(*probs.shape[:2], gh, gw)
    up = upsample_bilinear(abnormal, size)
    m = up.sum(dim=1)
    if cfg.normalize_layers:
        m = m / up.shape[1]
    return m, probs.reshape(*probs.shape[:2], gh, gw, 2)


def image_score(global_emb: torch.Tensor, final_text: torch.Tensor, maps: torch.Tensor,
                cfg: ScoringConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """``s = (max(M) + p_abnormal(global)) / 2``; returns ``(s, p_abnormal)``.

    ``global_emb``: ``(B, D)``; ``final_text``: ``(B, 2, D)``; ``maps``: ``(B, h, w)``.
    """
    p = class_probabilities(global_emb[:, None], final_text, cfg.tau_prime)[:, 0, 1]
    peak = maps.flatten(1).amax(dim=1)
    return 0.5 * (peak + p), p


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(m, sigma: float):
    """Separable Gaussian blur over the last two axes, reflect padding,
    kernel radius ``ceil(3 sigma)``. ``sigma == 0`` returns the input unchanged."""
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    if sigma == 0:
        return m
    is_torch = isinstance(m, torch.Tensor)
    arr = m.detach().cpu().numpy() if is_torch else np.asarray(m)
    kernel = gaussian_kernel(sigma)
    r = len(kernel) // 2
    out = arr.astype(np.float64)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, kv in enumerate(kernel):
            acc += kv * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    if is_torch:
        return torch.from_numpy(out).to(m.dtype)
    return out.astype(arr.dtype) if np.issubdtype(arr.dtype, np.floating) else out
