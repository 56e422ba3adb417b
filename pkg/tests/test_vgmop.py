import csv

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from zsadmoe.encoders import VisionFeatures
from zsadmoe.errors import ConfigurationError, EvaluationError, InternalError
from zsadmoe.vgmop import (STATES, CrossAttention, ExpertPool, Router, RoutingDecision, VGMoP, VGMoPConfig,
                           aggregate_experts, assemble_prompts, export_expert_embeddings, expert_activation_stats,
                           extract_state_context, route, write_activation_csv)

D, DX = 8, 12


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def decision(indices, gates, state="normal", n_experts=4, layer=1):
    idx = torch.tensor(indices)
    logits = torch.zeros(idx.shape[0], n_experts)
    return RoutingDecision(logits, torch.softmax(logits, -1), idx, torch.tensor(gates, dtype=torch.float64), layer, state)


def features(b=2, layers=(1, 2), grid=(2, 2), seed=0):
    x = torch.randn(b, len(layers), grid[0] * grid[1] + 1, DX, generator=gen(seed))
    return VisionFeatures(x, tuple(layers), grid)


class TestCrossAttention:
    def test_constant_tokens_give_uniform_attention(self):
        attn = CrossAttention(3, DX, D, 2, gen())
        tokens = torch.randn(1, 1, DX, generator=gen(1)).expand(2, 5, DX)
        w = attn.attention(tokens)
        assert torch.allclose(w, torch.full_like(w, 1 / 5))
        o, r = extract_state_context(tokens, attn)
        assert torch.allclose(o, o[:, :1].expand_as(o), atol=1e-6)
        assert torch.allclose(r, o[:, 0], atol=1e-6)

    def test_single_key_returns_value_row(self):
        attn = CrossAttention(1, DX, D, 1, gen())
        tokens = torch.randn(3, 1, DX, generator=gen(2))
        o, _ = extract_state_context(tokens, attn)
        assert torch.equal(o[:, 0], (tokens @ attn.w_v)[:, 0])

    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError):
            CrossAttention(2, DX, 6, 4)


class TestRoute:
    def test_zero_router_selects_first_k(self):
        router = Router(D, 16, 6)
        for p in router.parameters():
            torch.nn.init.zeros_(p)
        d = route(torch.randn(5, D), router, 3)
        assert d.indices.tolist() == [[0, 1, 2]] * 5
        assert torch.allclose(d.gates, torch.full((5, 3), 1 / 3))

    def test_same_vector_same_decision(self):
        router = Router(D, 16, 6, gen())
        r = torch.randn(1, D, generator=gen(3))
        a, b = route(r, router, 2), route(r.clone(), router, 2)
        assert torch.equal(a.indices, b.indices) and torch.equal(a.gates, b.gates)

    def test_non_finite_logits(self):
        router = Router(D, 16, 6, gen())
        with pytest.raises(EvaluationError):
            route(torch.full((1, D), float("nan")), router, 2)

    def test_router_seeded_not_global(self):
        torch.manual_seed(0)
        a = Router(D, 16, 6, gen(5))
        torch.manual_seed(1)
        b = Router(D, 16, 6, gen(5))
        assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


class TestAggregate:
    def pool(self, e=4, m=3, seed=0, state="normal"):
        return ExpertPool(torch.randn(e, m, D, dtype=torch.float64, generator=gen(seed)), state)

    def test_k1_returns_expert(self):
        pool = self.pool()
        out = aggregate_experts(decision([[2], [0]], [[1.0], [1.0]]), pool)
        assert torch.equal(out[0], pool.experts[2]) and torch.equal(out[1], pool.experts[0])

    def test_opposite_experts_cancel(self):
        a = torch.randn(3, D, dtype=torch.float64, generator=gen(1))
        pool = ExpertPool(torch.stack([a, -a]), "normal")
        out = aggregate_experts(decision([[0, 1]], [[0.5, 0.5]], n_experts=2), pool)
        assert torch.equal(out, torch.zeros_like(out))

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        pool = self.pool(e=6)
        for _ in range(20):
            idx = [list(rng.choice(6, 3, replace=False)) for _ in range(4)]
            g = rng.dirichlet(np.ones(3), size=4)
            out = aggregate_experts(decision(idx, g.tolist(), n_experts=6), pool).numpy()
            ex = pool.experts.numpy()
            for b in range(4):
                ref = sum(g[b, j] * ex[idx[b][j]] for j in range(3))
                assert np.max(np.abs(out[b] - ref)) < 1e-9

    def test_index_out_of_range(self):
        with pytest.raises(InternalError):
            aggregate_experts(decision([[5]], [[1.0]]), self.pool())

    def test_state_mismatch(self):
        with pytest.raises(InternalError):
            aggregate_experts(decision([[0]], [[1.0]], state="abnormal"), self.pool())

    def test_truncation_for_shared_pool(self):
        pool = ExpertPool(self.pool(m=6).experts, "shared")
        out = aggregate_experts(decision([[1]], [[1.0]]), pool, length=5)
        assert torch.equal(out[0], pool.experts[1, :5])


class TestAssemble:
    def test_full_scale_layout(self):
        cfg = VGMoPConfig(len_normal=5, len_abnormal=6, len_context=8)
        layers = (6, 12)
        s_n = {l: torch.randn(2, 5, D) for l in layers}
        s_a = {l: torch.randn(2, 6, D) for l in layers}
        cls, ctx = torch.randn(D), torch.randn(cfg.len_context, D)
        p = assemble_prompts(s_n, s_a, cls, ctx, layers)
        assert p.normal.shape == (2, 2, 14, D)
        assert p.abnormal.shape == (2, 2, 20, D)
        assert torch.equal(p.normal[:, :, -8:], p.abnormal[:, :, -8:])
        assert torch.equal(p.normal[:, :, :5], p.abnormal[:, :, :5])
        assert torch.equal(p.abnormal[:, :, 5:11], torch.stack([s_a[l] for l in layers], 1))
        assert torch.equal(p.normal[:, :, 5], cls.expand(2, 2, D))

    def test_missing_layer(self):
        with pytest.raises(InternalError):
            assemble_prompts({1: torch.zeros(1, 2, D)}, {}, torch.zeros(D), torch.zeros(2, D), (1,))


def small_vgmop(**kw):
    cfg = VGMoPConfig(n_experts=4, top_k=2, n_queries=3, len_normal=2, len_abnormal=3, len_context=2, heads=2,
                      router_hidden=8, **kw)
    return VGMoP(cfg, (1, 2), DX, D, torch.zeros(D), seed=0)


class TestVGMoP:
    def test_branch_isolation(self):
        m = small_vgmop()
        f = features()
        before, _ = m(f)
        with torch.no_grad():
            m.pools["layer1_abnormal"].add_(1.0)
        after, _ = m(f)
        assert torch.equal(before.normal, after.normal)
        assert not torch.equal(before.abnormal, after.abnormal)

    def test_instance_dependent(self):
        p, _ = small_vgmop()(features(b=2))
        assert not torch.equal(p.agg_normal[:, 0, :, :][0], p.agg_normal[:, 0, :, :][1])

    def test_static_prompt_is_instance_independent(self):
        p, decisions = small_vgmop(static_prompt=True)(features(b=3))
        assert decisions == []
        assert torch.equal(p.normal[0], p.normal[2])

    def test_shared_pool_counts_once(self):
        m = small_vgmop(shared_pool=True)
        assert len(m.distinct_pools()) == 2
        p, _ = m(features())
        assert p.agg_normal.shape[2] == 2 and p.agg_abnormal.shape[2] == 3

    def test_shared_cross_attention(self):
        m = small_vgmop(shared_cross_attention=True)
        assert m.cross_attention(1, "normal") is m.cross_attention(1, "abnormal")
        assert len(m.attn) == 2

    def test_decisions_per_layer_and_state(self):
        _, decisions = small_vgmop()(features())
        assert [(d.layer, d.state) for d in decisions] == [(l, s) for l in (1, 2) for s in STATES]


class TestActivationStats:
    def test_single_decision(self):
        d = decision([[0, 1, 2, 3]], [[0.25] * 4], n_experts=8)
        rows = expert_activation_stats([d])
        assert [r["frequency"] for r in rows] == [1, 1, 1, 1, 0, 0, 0, 0]

    def test_uniform_router_tie_break(self):
        router = Router(D, 8, 6)
        for p in router.parameters():
            torch.nn.init.zeros_(p)
        n, k = 10, 2
        rows = expert_activation_stats([route(torch.randn(n, D), router, k)])
        assert [r["count"] for r in rows] == [n, n, 0, 0, 0, 0]
        assert sum(r["count"] for r in rows) == n * k

    def test_empty_stream(self):
        assert expert_activation_stats([]) == []

    def test_csv(self, tmp_path):
        rows = expert_activation_stats([decision([[1, 0]], [[0.7, 0.3]])])
        write_activation_csv(rows, tmp_path / "a.csv")
        got = list(csv.DictReader(open(tmp_path / "a.csv")))
        assert len(got) == 4 and float(got[1]["mean_gate"]) == 0.7

    def test_embedding_export(self, tmp_path):
        m = small_vgmop()
        n = export_expert_embeddings(m, tmp_path / "e.csv")
        assert n == 2 * 4 * 2
        got = list(csv.reader(open(tmp_path / "e.csv")))
        assert len(got) == n + 1 and len(got[0]) == 3 + D
        row = got[1]
        expected = m.pool(int(row[0]), row[1]).experts[int(row[2])].detach().mean(0).double()
        assert np.allclose([float(v) for v in row[3:]], expected.numpy(), atol=1e-7)


@given(st.integers(0, 10_000), st.integers(2, 8), st.data())
def test_sparsity_property(seed, e, data):
    k = data.draw(st.integers(1, e))
    router = Router(D, 8, e, gen(seed))
    r = torch.randn(4, D, generator=gen(seed + 1), dtype=torch.float32)
    d = route(r, router, k)
    assert d.indices.shape == (4, k)
    assert all(len(set(row)) == k for row in d.indices.tolist())
    assert torch.allclose(d.gates.sum(-1), torch.ones(4), atol=1e-6)
    pool = ExpertPool(torch.randn(e, 2, D, generator=gen(seed + 2)), "normal")
    full = aggregate_experts(d, pool)
    mask = torch.zeros(e, 1, 1)
    for row in d.indices.tolist():
        mask[row] = 1
    # zeroing experts no instance selected leaves the aggregate bit-identical
    assert torch.equal(full, aggregate_experts(d, ExpertPool(pool.experts * mask, "normal")))
