"""Frozen toy vision/text encoders and the learnable patch-to-joint projection.

Both encoders are small pre-norm transformer stacks whose weights are drawn from
a seeded generator and never trained. The text encoder still lets gradients
reach its *input* token embeddings, which is how the prompt pools learn.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import torch
from torch import nn

from .errors import ConfigurationError, InputError, ParameterError


@dataclass
class EncoderConfig:
    image_size: Tuple[int, int] = (64, 64)
    patch_size: int = 8
    depth: int = 4
    dim_x: int = 48
    dim: int = 32
    dim_joint: int = 32
    layers: Tuple[int, ...] = (1, 2, 3, 4)
    vision_heads: int = 4
    text_depth: int = 2
    text_heads: int = 1
    max_context: int = 32
    token_standardize: bool = True
    token_anchor: float = 2.0
    style_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.layers = tuple(sorted(int(v) for v in self.layers))
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigurationError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if not self.layers:
            raise ConfigurationError("at least one encoder layer must be tapped")
        if len(set(self.layers)) != len(self.layers):
            raise ConfigurationError(f"duplicate layer taps {self.layers}")
        if self.layers[0] < 1 or self.layers[-1] > self.depth:
            raise ConfigurationError(f"layer taps {self.layers} outside 1..{self.depth}")
        if self.dim_x % self.vision_heads:
            raise ConfigurationError(f"dim_x={self.dim_x} not divisible by vision_heads={self.vision_heads}")
        if self.dim % self.text_heads:
            raise ConfigurationError(f"dim={self.dim} not divisible by text_heads={self.text_heads}")

    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class VisionFeatures:
    """Tapped features for a batch of images.

    ``stacked`` has shape ``(B, |I|, HW + 1, D_x)``; the last row of every layer
    is the global (class-token) feature of the final encoder layer.
    """

    stacked: torch.Tensor
    layers: Tuple[int, ...]
    grid: Tuple[int, int]

    @property
    def per_layer(self) -> Dict[int, torch.Tensor]:
        return {l: self.stacked[:, i] for i, l in enumerate(self.layers)}

    @property
    def global_cls(self) -> torch.Tensor:
        return self.stacked[:, -1, -1]

    def layer_index(self, layer: int) -> int:
        try:
            return self.layers.index(layer)
        except ValueError:
            raise ParameterError(f"layer {layer} is not tapped (taps: {self.layers})") from None

    def __len__(self):
        return self.stacked.shape[0]

    def __getitem__(self, idx) -> "VisionFeatures":
        if isinstance(idx, int):
            idx = slice(idx, idx + 1)
        return VisionFeatures(self.stacked[idx], self.layers, self.grid)

    def to(self, dtype) -> "VisionFeatures":
        return VisionFeatures(self.stacked.to(dtype), self.layers, self.grid)


class _Block(nn.Module):
    """Pre-norm self-attention + MLP block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // h), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(y)
        x = x + self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(x))))
        return x


def _freeze(module: nn.Module):
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()


def _seeded(seed: int, salt: str) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + zlib.crc32(salt.encode())) % (2**63))


def _init_block_weights(module: nn.Module, gen: torch.Generator):
    for name, p in module.named_parameters():
        if p.dim() >= 2:
            fan_in = p.shape[1]
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))
        elif name.endswith("bias"):
            with torch.no_grad():
                p.zero_()


class ToyVisionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        gen = _seeded(cfg.seed, "vision")
        self.patch_embed = nn.Linear(3 * p * p, cfg.dim_x)
        self.cls = nn.Parameter(torch.zeros(cfg.dim_x))
        self.pos = nn.Parameter(torch.zeros(cfg.n_patches + 1, cfg.dim_x))
        self.blocks = nn.ModuleList(_Block(cfg.dim_x, cfg.vision_heads) for _ in range(cfg.depth))
        self.ln_tap = nn.LayerNorm(cfg.dim_x)
        self.anchor = nn.Parameter(torch.zeros(cfg.dim_x))
        self.style = nn.Linear(2 * cfg.dim_x, cfg.dim_x)
        _init_block_weights(self, gen)
        with torch.no_grad():
            self.anchor.copy_(torch.randn(cfg.dim_x, generator=_seeded(cfg.seed, "anchor")))
        with torch.no_grad():
            self.cls.copy_(torch.randn(cfg.dim_x, generator=gen) * 0.5)
            self.pos.copy_(torch.randn(cfg.n_patches + 1, cfg.dim_x, generator=gen) * 0.1)
        _freeze(self)

    def _patchify(self, images):
        b, h, w, c = images.shape
        p = self.cfg.patch_size
        x = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> VisionFeatures:
        if images.dim() == 3:
            images = images[None]
        if images.dim() != 4 or tuple(images.shape[1:]) != (*self.cfg.image_size, 3):
            raise InputError(f"expected images of shape (B, {self.cfg.image_size[0]}, {self.cfg.image_size[1]}, 3), got {tuple(images.shape)}")
        if images.min() < 0 or images.max() > 1:
            raise InputError("image values must lie in [0, 1]")
        dtype = self.patch_embed.weight.dtype
        x = self.patch_embed(self._patchify((images.to(dtype) - 0.5) / 0.25))
        cls = self.cls.expand(x.shape[0], 1, -1)
        if self.cfg.token_standardize:
            # per-channel standardization across the image's patches; the removed
            # statistics describe the image's appearance and feed the class token
            mu, sd = x.mean(dim=1, keepdim=True), x.std(dim=1, keepdim=True) + 1e-3
            cls = cls + self.cfg.style_scale * self.style(torch.cat([mu, sd.log()], dim=-1))
            x = (x - mu) / sd
            # a fixed offset turns deviation magnitude into a direction LayerNorm keeps
            x = x + self.cfg.token_anchor * self.anchor
        x = torch.cat([x, cls], dim=1) + self.pos
        taps = []
        for depth, block in enumerate(self.blocks, start=1):
            x = block(x)
            if depth in self.cfg.layers:
                taps.append(self.ln_tap(x))
        stacked = torch.stack(taps, dim=1)
        # every tapped layer carries the final-layer global feature as its last row
        stacked[:, :, -1] = stacked[:, -1:, -1]
        return VisionFeatures(stacked, self.cfg.layers, self.cfg.grid)


class ToyTextEncoder(nn.Module):
    """Embedding-sequence encoder: positional add, transformer blocks, mean pool,
    linear map into the joint space, L2 normalization."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        gen = _seeded(cfg.seed, "text")
        self.pos = nn.Parameter(torch.zeros(cfg.max_context, cfg.dim))
        self.blocks = nn.ModuleList(_Block(cfg.dim, cfg.text_heads) for _ in range(cfg.text_depth))
        self.ln_final = nn.LayerNorm(cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim_joint, bias=False)
        _init_block_weights(self, gen)
        with torch.no_grad():
            self.pos.copy_(torch.randn(cfg.max_context, cfg.dim, generator=gen) * 0.02)
        _freeze(self)

    def word_embedding(self, word: str) -> torch.Tensor:
        """Deterministic pseudo-embedding of a vocabulary word."""
        gen = _seeded(self.cfg.seed, "word:" + word)
        return torch.randn(self.cfg.dim, generator=gen, dtype=torch.float64).to(self.pos.dtype) * 0.02

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens[None]
        n, length, d = tokens.shape
        if d != self.cfg.dim:
            raise InputError(f"token dimension {d} != encoder dimension {self.cfg.dim}")
        if length > self.cfg.max_context:
            raise InputError(f"prompt length {length} exceeds context limit {self.cfg.max_context}")
        x = tokens + self.pos[:length]
        for block in self.blocks:
            x = block(x)
        out = self.proj(self.ln_final(x).mean(dim=1))
        out = out / out.norm(dim=-1, keepdim=True)
        return out[0] if squeeze else out


class PatchProjection(nn.Module):
    """One learnable ``D_x -> D_joint`` map per tapped layer; rows L2-normalized."""

    def __init__(self, cfg: EncoderConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.layers = cfg.layers
        self.weights = nn.ParameterDict()
        for l in cfg.layers:
            if cfg.dim_x == cfg.dim_joint:
                w = torch.eye(cfg.dim_x)
            else:
                w = torch.randn(cfg.dim_x, cfg.dim_joint, generator=generator) / math.sqrt(cfg.dim_x)
            self.weights[f"layer{l}"] = nn.Parameter(w)

    def weight(self, layer: int) -> torch.Tensor:
        if layer not in self.layers:
            raise ParameterError(f"layer {layer} has no projection (taps: {self.layers})")
        return self.weights[f"layer{layer}"]

    def project(self, features: VisionFeatures, layer: int) -> torch.Tensor:
        x = features.stacked[:, features.layer_index(layer)]
        y = x @ self.weight(layer)
        return y / y.norm(dim=-1, keepdim=True)

    def forward(self, features: VisionFeatures) -> torch.Tensor:
        """All tapped layers at once: ``(B, |I|, HW + 1, D_joint)``."""
        w = torch.stack([self.weight(l) for l in features.layers])
        y = torch.einsum("blnd,ldj->blnj", features.stacked, w)
        return y / y.norm(dim=-1, keepdim=True)


def encode_image(images: torch.Tensor, encoder: ToyVisionEncoder) -> VisionFeatures:
    return encoder(images)


def encode_text(tokens: torch.Tensor, encoder: ToyTextEncoder) -> torch.Tensor:
    return encoder(tokens)


def project_patches(features: VisionFeatures, layer: int, projection: PatchProjection) -> torch.Tensor:
    return projection.project(features, layer)
