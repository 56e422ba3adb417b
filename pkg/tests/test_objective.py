import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from oracles import central_diff
from zsadmoe.errors import EvaluationError, InputError, NormalizationError, ParameterError
from zsadmoe.numerics import ParamGroup, finite_diff_gradcheck
from zsadmoe.objective import (balance_loss, bce_score_loss, decouple_loss, dice_loss, focal_loss, total_loss)

ALPHA, BETA = 0.01, 0.005


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class TestBalance:
    @pytest.mark.parametrize("e", [2, 4, 8])
    def test_uniform_gives_alpha(self, e):
        assert abs(float(balance_loss([torch.full((16, e), 1 / e, dtype=torch.float64)], ALPHA)) - ALPHA) < 1e-12

    @pytest.mark.parametrize("e", [2, 4, 8])
    def test_one_hot_gives_alpha_e(self, e):
        p = torch.zeros(16, e, dtype=torch.float64)
        p[:, 1] = 1
        assert abs(float(balance_loss([p], ALPHA)) - ALPHA * e) < 1e-12

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            tables = [rng.dirichlet(np.ones(6), size=rng.integers(1, 9)) for _ in range(3)]
            ref = 0.0
            for p in tables:
                b, e = p.shape
                for j in range(e):
                    f = sum(p[i, j] for i in range(b)) / b
                    ref += e * f * f
            assert abs(float(balance_loss([t(p) for p in tables], ALPHA)) - ALPHA * ref) < 1e-12

    def test_empty_batch(self):
        with pytest.raises(ParameterError):
            balance_loss([torch.zeros(0, 4)], ALPHA)


class TestDecouple:
    def test_orthonormal_gives_zero(self):
        e, m, d = 4, 3, 6
        pool = torch.zeros(e, m, d, dtype=torch.float64)
        for j in range(e):
            pool[j, :, j] = 2.0
        assert abs(float(decouple_loss([pool], BETA))) < 1e-9

    @pytest.mark.parametrize("e", [2, 4, 8])
    def test_identical_experts(self, e):
        pool = torch.randn(1, 3, 5, dtype=torch.float64).expand(e, 3, 5)
        assert abs(float(decouple_loss([pool], BETA)) - BETA * e * (e - 1)) < 1e-9

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pools = [rng.normal(size=(5, 3, 7)) for _ in range(2)]
            ref = 0.0
            for pool in pools:
                means = [row.mean(axis=0) / np.linalg.norm(row.mean(axis=0)) for row in pool]
                for a in range(5):
                    for b in range(5):
                        g = float(np.dot(means[a], means[b]))
                        ref += (g - (a == b)) ** 2
            assert abs(float(decouple_loss([t(p) for p in pools], BETA)) - BETA * ref) < 1e-9

    def test_zero_mean_expert_reports_index(self):
        pool = torch.randn(4, 2, 3, dtype=torch.float64)
        pool[2, 1] = -pool[2, 0]
        with pytest.raises(NormalizationError) as info:
            decouple_loss([pool], BETA)
        assert info.value.index == 2


class TestDice:
    def half_mask(self):
        m = torch.zeros(64, 64, dtype=torch.float64)
        m[:, :32] = 1
        return m

    def test_perfect(self):
        m = self.half_mask()
        assert float(dice_loss(m, m)) <= 1e-3

    def test_inverse(self):
        m = self.half_mask()
        hw = 64 * 64
        assert abs(float(dice_loss(1 - m, m)) - (1 - 1 / (hw + 1))) < 1e-12

    def test_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            m, g = rng.random((3, 5, 5)), (rng.random((3, 5, 5)) > 0.6).astype(float)
            ref = np.mean([1 - (2 * (m[i] * g[i]).sum() + 1) / (m[i].sum() + g[i].sum() + 1) for i in range(3)])
            assert abs(float(dice_loss(t(m), t(g))) - ref) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            dice_loss(torch.zeros(4, 4), torch.zeros(4, 5))


class TestFocal:
    def test_reduces_to_half_bce(self):
        rng = np.random.default_rng(3)
        m, g = rng.uniform(0.05, 0.95, (4, 4)), (rng.random((4, 4)) > 0.5).astype(float)
        bce = -(g * np.log(m) + (1 - g) * np.log(1 - m)).mean()
        assert abs(float(focal_loss(t(m), t(g), gamma=0.0, alpha=0.5)) - 0.5 * bce) < 1e-12

    def test_confident(self):
        g = t((np.arange(16).reshape(4, 4) % 3 == 0).astype(float))
        assert float(focal_loss(g, g)) < 1e-4

    def test_gradient(self):
        rng = np.random.default_rng(4)
        m0, g = rng.uniform(0.1, 0.9, (4, 4)), (rng.random((4, 4)) > 0.5).astype(float)
        p = ParamGroup("m", t(m0).requires_grad_())
        res = finite_diff_gradcheck(lambda: focal_loss(p.value, t(g)), [p], epsilon=1e-6)
        assert res.max_rel_error < 1e-4


class TestBCE:
    @pytest.mark.parametrize("c", [0.0, 1.0])
    def test_half(self, c):
        assert abs(float(bce_score_loss(t([0.5]), t([c]))) - math.log(2)) < 1e-12

    def test_confident_correct(self):
        assert float(bce_score_loss(t([1.0]), t([1.0]))) < 1e-5

    def test_wrong(self):
        assert abs(float(bce_score_loss(t([0.9]), t([0.0]))) - 2.3026) < 1e-4


class TestTotal:
    def test_zero(self):
        z = torch.zeros(())
        assert float(total_loss(z, z, z, z, z).total) == 0.0

    def test_sum_and_breakdown(self):
        parts = [t(v) for v in (0.1, 0.2, 0.3, 0.4, 0.5)]
        out = total_loss(*parts)
        assert abs(float(out.total) - 1.5) < 1e-12
        assert out.as_dict()["focal"] == pytest.approx(0.3)

    def test_non_finite_names_part(self):
        z = torch.zeros(())
        with pytest.raises(EvaluationError, match="dice"):
            total_loss(z, torch.tensor(float("nan")), z, z, z)


@given(st.integers(0, 10_000))
def test_balance_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(5), size=6)
    perm_rows, perm_cols = rng.permutation(6), rng.permutation(5)
    a = float(balance_loss([t(p)], ALPHA))
    b = float(balance_loss([t(p[perm_rows][:, perm_cols])], ALPHA))
    assert abs(a - b) < 1e-15
    assert ALPHA - 1e-12 <= a <= ALPHA * 5 + 1e-12


@given(st.integers(0, 10_000))
def test_decouple_bounds_and_gradient(seed):
    rng = np.random.default_rng(seed)
    pool0 = rng.normal(size=(3, 2, 4))
    e = 3
    val = float(decouple_loss([t(pool0)], 1.0))
    assert -1e-12 <= val <= e * (e - 1) + 1e-9
    p = t(pool0).requires_grad_()
    decouple_loss([p], 1.0).backward()
    num = central_diff(lambda x: float(decouple_loss([t(x)], 1.0)), pool0.copy())
    assert np.allclose(p.grad.numpy(), num, rtol=1e-5, atol=1e-7)
