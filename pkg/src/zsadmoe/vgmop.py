"""Visually-guided mixture of prompts.

For every tapped layer and every state (normal / abnormal), learnable queries
cross-attend to the layer's visual tokens, the pooled result drives a sparse
router over a pool of learnable prompt segments, and the top-k segments are
blended with softmax gates. The blended segments are spliced into the two text
prompts ``[S_n][cls][Q_ctx]`` and ``[S_n][S_a][cls][Q_ctx]``.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .encoders import VisionFeatures
from .errors import ConfigurationError, EvaluationError, InternalError, ParameterError
from .numerics import topk_select

STATES = ("normal", "abnormal")


@dataclass
class VGMoPConfig:
    n_experts: int = 8
    top_k: int = 4
    n_queries: int = 8
    len_normal: int = 5
    len_abnormal: int = 6
    len_context: int = 8
    heads: int = 4
    router_hidden: int = 64
    shared_pool: bool = False
    shared_cross_attention: bool = False
    static_prompt: bool = False

    def __post_init__(self):
        if self.static_prompt:
            self.n_experts, self.top_k = 1, 1
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigurationError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        for name in ("n_queries", "len_normal", "len_abnormal", "heads", "router_hidden"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.len_context < 0:
            raise ConfigurationError("len_context must be non-negative")

    def segment_length(self, state: str) -> int:
        return self.len_normal if state == "normal" else self.len_abnormal


@dataclass
class RoutingDecision:
    """Router output for a batch at one (layer, state).

    Shapes: ``logits``/``probs`` ``(B, E)``; ``indices``/``gates`` ``(B, k)``.
    """

    logits: torch.Tensor
    probs: torch.Tensor
    indices: torch.Tensor
    gates: torch.Tensor
    layer: int
    state: str

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


@dataclass
class ExpertPool:
    experts: torch.Tensor  # (E, M, D)
    state: str

    @property
    def n_experts(self) -> int:
        return self.experts.shape[0]

    @property
    def length(self) -> int:
        return self.experts.shape[1]


class CrossAttention(nn.Module):
    """Learnable queries attending to visual tokens (multi-head)."""

    def __init__(self, n_queries, dim_x, dim, heads, generator=None):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"D={dim} is not divisible by heads={heads}")
        self.heads = heads
        self.queries = nn.Parameter(torch.randn(n_queries, dim, generator=generator))
        self.w_k = nn.Parameter(torch.randn(dim_x, dim, generator=generator) / math.sqrt(dim_x))
        self.w_v = nn.Parameter(torch.randn(dim_x, dim, generator=generator) / math.sqrt(dim_x))
        self.w_o = nn.Parameter(torch.eye(dim))

    def attention(self, tokens: torch.Tensor) -> torch.Tensor:
        """Attention weights ``(B, heads, N_q, N)``."""
        nq, d = self.queries.shape
        dh = d // self.heads
        k = (tokens @ self.w_k).reshape(tokens.shape[0], -1, self.heads, dh).transpose(1, 2)
        q = self.queries.reshape(nq, self.heads, dh).transpose(0, 1)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b = tokens.shape[0]
        nq, d = self.queries.shape
        v = (tokens @ self.w_v).reshape(b, -1, self.heads, d // self.heads).transpose(1, 2)
        out = (self.attention(tokens) @ v).transpose(1, 2).reshape(b, nq, d)
        return out @ self.w_o


class Router(nn.Module):
    """Linear-ReLU-Linear gate producing expert logits."""

    def __init__(self, dim, hidden, n_experts, generator=None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, n_experts)
        with torch.no_grad():
            self.fc1.weight.copy_(torch.randn(hidden, dim, generator=generator) / math.sqrt(dim))
            self.fc1.bias.zero_()
            self.fc2.weight.copy_(torch.randn(n_experts, hidden, generator=generator) / math.sqrt(hidden))
            self.fc2.bias.zero_()

    def forward(self, r):
        return self.fc2(torch.relu(self.fc1(r)))


def extract_state_context(tokens: torch.Tensor, attn: CrossAttention) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return ``(O, r)``: per-query context ``(B, N_q, D)`` and its mean ``(B, D)``."""
    out = attn(tokens)
    return out, out.mean(dim=1)


def route(r: torch.Tensor, router: Router, k: int, layer: int = 0, state: str = "normal") -> RoutingDecision:
    logits = router(r)
    if not torch.isfinite(logits).all():
        raise EvaluationError(f"non-finite router logits at layer {layer} ({state})")
    indices, gates = topk_select(logits, k)
    return RoutingDecision(logits, torch.softmax(logits, dim=-1), indices, gates, layer, state)


def aggregate_experts(decision: RoutingDecision, pool: ExpertPool, length: Optional[int] = None) -> torch.Tensor:
    """Gate-weighted sum of the selected experts: ``(B, M, D)``.

    ``length`` truncates experts to their first rows (used when one pool of
    longer segments serves both states).
    """
    if decision.state != pool.state and pool.state != "shared":
        raise InternalError(f"decision for {decision.state} applied to {pool.state} pool")
    idx = decision.indices
    if idx.numel() and (idx.min() < 0 or idx.max() >= pool.n_experts):
        raise InternalError("expert index outside pool")
    experts = pool.experts if length is None else pool.experts[:, :length]
    chosen = experts[idx]  # (B, k, M, D)
    return torch.einsum("bk,bkmd->bmd", decision.gates, chosen)


@dataclass
class AssembledPrompts:
    """Token sequences for every tapped layer.

    ``normal``: ``(B, |I|, M_n + 1 + M_q, D)``; ``abnormal``:
    ``(B, |I|, M_n + M_a + 1 + M_q, D)``.
    """

    normal: torch.Tensor
    abnormal: torch.Tensor
    agg_normal: torch.Tensor
    agg_abnormal: torch.Tensor
    context: torch.Tensor
    cls_token: torch.Tensor
    layers: Tuple[int, ...]


def assemble_prompts(agg_normal: Dict[int, torch.Tensor], agg_abnormal: Dict[int, torch.Tensor],
                     cls_token: torch.Tensor, context: torch.Tensor, layers: Sequence[int]) -> AssembledPrompts:
    missing = [l for l in layers if l not in agg_normal or l not in agg_abnormal]
    if missing:
        raise InternalError(f"missing aggregated prompts for layers {missing}")
    s_n = torch.stack([agg_normal[l] for l in layers], dim=1)  # (B, L, M_n, D)
    s_a = torch.stack([agg_abnormal[l] for l in layers], dim=1)
    b, n_layers = s_n.shape[:2]
    cls = cls_token.reshape(1, 1, 1, -1).expand(b, n_layers, 1, -1)
    ctx = context.reshape(1, 1, *context.shape).expand(b, n_layers, -1, -1)
    t_n = torch.cat([s_n, cls, ctx], dim=2)
    t_a = torch.cat([s_n, s_a, cls, ctx], dim=2)
    return AssembledPrompts(t_n, t_a, s_n, s_a, context, cls_token, tuple(layers))


class VGMoP(nn.Module):
    """Holds per-layer cross-attention, routers and expert pools for both states,
    plus the shared context tokens and the class token."""

    def __init__(self, cfg: VGMoPConfig, layers: Sequence[int], dim_x: int, dim: int,
                 cls_init: torch.Tensor, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.layers = tuple(layers)
        gen = torch.Generator().manual_seed(seed)
        self.cls_token = nn.Parameter(cls_init.detach().clone())
        self.context = nn.Parameter(torch.randn(cfg.len_context, dim, generator=gen) * 0.02)
        self.attn = nn.ModuleDict()
        self.routers = nn.ModuleDict()
        self.pools = nn.ParameterDict()
        for l in self.layers:
            if cfg.static_prompt:
                pass
            elif cfg.shared_cross_attention:
                self.attn[f"layer{l}"] = CrossAttention(cfg.n_queries, dim_x, dim, cfg.heads, gen)
            else:
                for s in STATES:
                    self.attn[f"layer{l}_{s}"] = CrossAttention(cfg.n_queries, dim_x, dim, cfg.heads, gen)
            if not cfg.static_prompt:
                for s in STATES:
                    self.routers[f"layer{l}_{s}"] = Router(dim, cfg.router_hidden, cfg.n_experts, gen)
            if cfg.shared_pool:
                length = max(cfg.len_normal, cfg.len_abnormal)
                self.pools[f"layer{l}"] = nn.Parameter(torch.randn(cfg.n_experts, length, dim, generator=gen) * 0.02)
            else:
                for s in STATES:
                    self.pools[f"layer{l}_{s}"] = nn.Parameter(
                        torch.randn(cfg.n_experts, cfg.segment_length(s), dim, generator=gen) * 0.02)

    def cross_attention(self, layer: int, state: str) -> CrossAttention:
        key = f"layer{layer}" if self.cfg.shared_cross_attention else f"layer{layer}_{state}"
        return self.attn[key]

    def pool(self, layer: int, state: str) -> ExpertPool:
        if self.cfg.shared_pool:
            return ExpertPool(self.pools[f"layer{layer}"], "shared")
        return ExpertPool(self.pools[f"layer{layer}_{state}"], state)

    def distinct_pools(self) -> List[Tuple[int, str, torch.Tensor]]:
        """Each underlying pool tensor once (shared pools are not double counted)."""
        if self.cfg.shared_pool:
            return [(l, "shared", self.pools[f"layer{l}"]) for l in self.layers]
        return [(l, s, self.pools[f"layer{l}_{s}"]) for l in self.layers for s in STATES]

    def forward(self, features: VisionFeatures) -> Tuple[AssembledPrompts, List[RoutingDecision]]:
        b = len(features)
        agg = {s: {} for s in STATES}
        decisions = []
        for i, l in enumerate(self.layers):
            tokens = features.stacked[:, i]
            contexts = {}
            for s in STATES:
                length = self.cfg.segment_length(s)
                pool = self.pool(l, s)
                if self.cfg.static_prompt:
                    agg[s][l] = pool.experts[0, :length].expand(b, -1, -1)
                    continue
                attn = self.cross_attention(l, s)
                if id(attn) not in contexts:
                    contexts[id(attn)] = extract_state_context(tokens, attn)[1]
                decision = route(contexts[id(attn)], self.routers[f"layer{l}_{s}"], self.cfg.top_k, l, s)
                decisions.append(decision)
                agg[s][l] = aggregate_experts(decision, pool, length)
        prompts = assemble_prompts(agg["normal"], agg["abnormal"], self.cls_token, self.context, self.layers)
        return prompts, decisions


def expert_activation_stats(decisions: Iterable[RoutingDecision], n_experts: Optional[int] = None) -> List[dict]:
    """Selection counts and mean gate per (layer, state, expert).

    Counts are accumulated over every instance of every decision batch. Returns
    rows sorted by layer, state, expert; an empty stream gives no rows.
    """
    counts = defaultdict(lambda: defaultdict(int))
    gate_sums = defaultdict(lambda: defaultdict(float))
    instances = defaultdict(int)
    width = {}
    for d in decisions:
        key = (d.layer, d.state)
        idx = d.indices.detach().cpu().numpy()
        gates = d.gates.detach().cpu().numpy()
        instances[key] += idx.shape[0]
        width[key] = max(width.get(key, 0), n_experts or d.logits.shape[-1])
        for row_i, row_g in zip(idx, gates):
            for j, g in zip(row_i, row_g):
                counts[key][int(j)] += 1
                gate_sums[key][int(j)] += float(g)
    rows = []
    for (layer, state) in sorted(instances, key=lambda t: (t[0], STATES.index(t[1]))):
        n = instances[(layer, state)]
        for j in range(width[(layer, state)]):
            c = counts[(layer, state)][j]
            rows.append({
                "layer": layer,
                "state": state,
                "expert": j,
                "count": c,
                "instances": n,
                "frequency": c / n,
                "mean_gate": gate_sums[(layer, state)][j] / c if c else 0.0,
            })
    return rows


ACTIVATION_COLUMNS = ["layer", "state", "expert", "count", "instances", "frequency", "mean_gate"]


def write_activation_csv(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ACTIVATION_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "frequency": repr(float(r["frequency"])), "mean_gate": repr(float(r["mean_gate"]))})


def expert_mean_embeddings(model: VGMoP) -> List[dict]:
    """Mean over segment rows of every expert, one row per (layer, state, expert)."""
    rows = []
    for l in model.layers:
        for s in STATES:
            experts = model.pool(l, s).experts.detach().double().cpu().numpy()
            means = experts.mean(axis=1)
            for j, m in enumerate(means):
                rows.append({"layer": l, "state": s, "expert": j, "values": m})
    return rows


def export_expert_embeddings(model: VGMoP, path) -> int:
    rows = expert_mean_embeddings(model)
    dim = len(rows[0]["values"]) if rows else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "state", "expert"] + [f"d{i}" for i in range(dim)])
        for r in rows:
            writer.writerow([r["layer"], r["state"], r["expert"]] + [repr(float(v)) for v in r["values"]])
    return len(rows)
