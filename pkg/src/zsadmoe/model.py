"""Full detector: frozen encoders + learnable projection + VGMoP + scoring."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from .encoders import EncoderConfig, PatchProjection, ToyTextEncoder, ToyVisionEncoder, VisionFeatures
from .errors import ConfigurationError
from .objective import (LossBreakdown, LossConfig, balance_loss, bce_score_loss, decouple_loss, dice_loss,
                        focal_loss, total_loss)
from .scoring import AnomalyOutput, ScoringConfig, anomaly_map, image_score
from .vgmop import AssembledPrompts, RoutingDecision, VGMoP, VGMoPConfig

FROZEN_PREFIXES = ("vision.", "text.")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vgmop: VGMoPConfig = field(default_factory=VGMoPConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    seed: int = 0

    def __post_init__(self):
        n_n = self.vgmop.len_normal + 1 + self.vgmop.len_context
        n_a = n_n + self.vgmop.len_abnormal
        if n_a > self.encoder.max_context:
            raise ConfigurationError(f"abnormal prompt length {n_a} exceeds max_context={self.encoder.max_context}")


@dataclass
class ModelOutput:
    anomaly: AnomalyOutput
    decisions: List[RoutingDecision]
    prompts: AssembledPrompts
    text_emb: torch.Tensor  # (B, L, 2, D_joint)

    @property
    def maps(self):
        return self.anomaly.maps

    @property
    def scores(self):
        return self.anomaly.scores


class PromptMoEModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        self.vision = ToyVisionEncoder(enc)
        self.text = ToyTextEncoder(enc)
        gen = torch.Generator().manual_seed(cfg.seed + 7919)
        self.projection = PatchProjection(enc, gen)
        self.vgmop = VGMoP(cfg.vgmop, enc.layers, enc.dim_x, enc.dim, self.text.word_embedding("object"), seed=cfg.seed)

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(FROZEN_PREFIXES)]

    def frozen_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith(FROZEN_PREFIXES)]

    def train(self, mode: bool = True):
        super().train(mode)
        self.vision.eval()
        self.text.eval()
        return self

    def encode(self, images: torch.Tensor) -> VisionFeatures:
        return self.vision(images)

    def encode_prompts(self, prompts: AssembledPrompts) -> torch.Tensor:
        b, n_layers = prompts.normal.shape[:2]
        t_n = self.text(prompts.normal.flatten(0, 1)).reshape(b, n_layers, -1)
        t_a = self.text(prompts.abnormal.flatten(0, 1)).reshape(b, n_layers, -1)
        return torch.stack([t_n, t_a], dim=2)

    def forward(self, features: VisionFeatures) -> ModelOutput:
        dtype = self.projection.weights[f"layer{features.layers[0]}"].dtype
        if features.stacked.dtype != dtype:
            features = features.to(dtype)
        prompts, decisions = self.vgmop(features)
        text_emb = self.encode_prompts(prompts)
        patch_emb = self.projection(features)
        maps, probs = anomaly_map(patch_emb, text_emb, features.grid, self.cfg.encoder.image_size, self.cfg.scoring)
        scores, p_global = image_score(patch_emb[:, -1, -1], text_emb[:, -1], maps, self.cfg.scoring)
        return ModelOutput(AnomalyOutput(maps, scores, probs, p_global), decisions, prompts, text_emb)

    @torch.no_grad()
    def predict(self, features: VisionFeatures, chunk: int = 64):
        """Inference: smoothed maps ``(B, h, w)``, scores ``(B,)`` (numpy) and
        the routing decisions of every chunk.

        The image score uses the peak of the *smoothed* map.
        """
        from .scoring import gaussian_smooth

        was_training = self.training
        self.eval()
        maps, scores, decisions = [], [], []
        for i in range(0, len(features), chunk):
            out = self(features[i:i + chunk])
            m = gaussian_smooth(out.maps.double().numpy(), self.cfg.scoring.gaussian_sigma)
            p = out.anomaly.global_probs.double().numpy()
            maps.append(m)
            scores.append(0.5 * (m.reshape(len(m), -1).max(axis=1) + p))
            decisions.extend(out.decisions)
        self.train(was_training)
        return np.concatenate(maps), np.concatenate(scores), decisions

    def loss(self, out: ModelOutput, masks: torch.Tensor, labels: torch.Tensor, cfg: LossConfig) -> LossBreakdown:
        maps = out.maps
        masks = masks.to(maps.dtype)
        probs = [d.probs for d in out.decisions]
        zero = maps.new_zeros(())
        bal = balance_loss(probs, cfg.alpha) if probs else zero
        dec = decouple_loss([p for _, _, p in self.vgmop.distinct_pools()], cfg.beta)
        return total_loss(
            bce_score_loss(out.scores, labels),
            dice_loss(maps, masks, cfg.dice_eps),
            focal_loss(maps, masks, cfg.focal_gamma, cfg.focal_alpha),
            bal.to(maps.dtype),
            dec.to(maps.dtype),
        )
