"""Training objective: segmentation, classification and MoE auxiliary losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import torch

from .errors import EvaluationError, InputError, NormalizationError, ParameterError

PROB_CLAMP = 1e-6


@dataclass
class LossConfig:
    alpha: float = 0.01
    beta: float = 0.005
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("alpha and beta must be non-negative")


@dataclass
class LossBreakdown:
    bce: torch.Tensor
    dice: torch.Tensor
    focal: torch.Tensor
    balance: torch.Tensor
    decouple: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def balance_loss(probs: Sequence[torch.Tensor], alpha: float) -> torch.Tensor:
    """``alpha * sum_p E * sum_j mean_i(p[i, j])**2`` over the given ``(B, E)``
    probability tables (one per layer and state branch)."""
    total = None
    for p in probs:
        if p.shape[0] == 0:
            raise ParameterError("balance loss needs a non-empty batch")
        e = p.shape[-1]
        term = e * (p.mean(dim=0) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.tensor(0.0)
    return alpha * total


def normalized_expert_means(pool: torch.Tensor) -> torch.Tensor:
    means = pool.mean(dim=1)
    norms = means.norm(dim=-1)
    bad = torch.nonzero(norms == 0).flatten()
    if len(bad):
        raise NormalizationError(f"expert {int(bad[0])} has a zero mean embedding", int(bad[0]))
    return means / norms[:, None]


def decouple_loss(pools: Iterable[torch.Tensor], beta: float) -> torch.Tensor:
    """``beta * sum ||S S^T - I||_F^2`` with ``S`` the unit expert means of each pool."""
    total = None
    for pool in pools:
        s = normalized_expert_means(pool)
        gram = s @ s.T
        term = ((gram - torch.eye(s.shape[0], dtype=s.dtype)) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        raise ParameterError("decouple loss needs at least one pool")
    return beta * total


def _check_shapes(m, mask):
    if m.shape != mask.shape:
        raise InputError(f"map shape {tuple(m.shape)} != mask shape {tuple(mask.shape)}")


def dice_loss(m: torch.Tensor, mask: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice, computed per image over the last two axes and averaged."""
    _check_shapes(m, mask)
    mask = mask.to(m.dtype)
    inter = (m * mask).flatten(-2).sum(-1)
    denom = m.flatten(-2).sum(-1) + mask.flatten(-2).sum(-1)
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def focal_loss(m: torch.Tensor, mask: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    _check_shapes(m, mask)
    mask = mask.to(m.dtype)
    p = m.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    p_t = torch.where(mask > 0.5, p, 1 - p)
    alpha_t = torch.where(mask > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1 - alpha))
    return (-alpha_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def bce_score_loss(s: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    s = s.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    c = c.to(s.dtype)
    return (-c * torch.log(s) - (1 - c) * torch.log(1 - s)).mean()


def total_loss(bce, dice, focal, balance, decouple) -> LossBreakdown:
    parts = {"bce": bce, "dice": dice, "focal": focal, "balance": balance, "decouple": decouple}
    for name, v in parts.items():
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise EvaluationError(f"non-finite {name} loss: {float(torch.as_tensor(v).detach())}")
    total = bce + dice + focal + balance + decouple
    return LossBreakdown(total=total, **parts)
