import itertools

import numpy as np
import pytest

from oracles import gsa_loop, tsa_loop
from transattunet.attention import (
    FusionParams,
    GsaParams,
    SelfAwareAttention,
    TsaParams,
    gsa_attention_map,
    gsa_forward,
    saa_forward,
    saa_fuse,
    tsa_attention_map,
    tsa_forward,
)
from transattunet.rng import Rng
from transattunet.tensor import ShapeError, Tensor

ORACLE_GRID = list(itertools.product([8, 16], [2, 3, 4], [1, 8]))


def t64(a, requires_grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


def tsa_case(c, s, heads, seed=0, out_proj=True, share=False):
    p = TsaParams(Rng(seed), c, s, s, heads, out_proj=out_proj, share_heads=share).astype(np.float64)
    f = np.random.default_rng(seed).standard_normal((2, c, s, s))
    return p, f


def run_tsa_oracle(p, f):
    ow = p.out_proj.weight.data if p.out_proj is not None else None
    ob = p.out_proj.bias.data if p.out_proj is not None else None
    return tsa_loop(f, p.pos_enc.data, p.w_q.data, p.w_k.data, p.w_v.data, p.heads, ow, ob)


class TestTsa:
    @pytest.mark.parametrize("c,s,heads", ORACLE_GRID)
    def test_matches_loop_oracle(self, c, s, heads):
        p, f = tsa_case(c, s, heads)
        ref, ref_maps = run_tsa_oracle(p, f)
        np.testing.assert_allclose(tsa_forward(t64(f), p).data, ref, atol=1e-5, rtol=0)
        np.testing.assert_allclose(tsa_attention_map(t64(f), p), ref_maps, atol=1e-5, rtol=0)

    def test_shared_heads_without_out_proj(self):
        p, f = tsa_case(16, 2, 8, seed=3, out_proj=False, share=True)
        assert p.w_q.shape == (1, 4, 4)
        np.testing.assert_allclose(tsa_forward(t64(f), p).data, run_tsa_oracle(p, f)[0], atol=1e-5)

    def test_uniform_attention_averages_values(self):
        # zero query weights give constant logits, so every token receives the mean value row
        p, f = tsa_case(8, 2, 1, out_proj=False)
        p.w_q.data[:] = 0
        out = tsa_forward(t64(f), p).data
        x = (f + p.pos_enc.data[None]).reshape(2, 8, 4)
        v = x @ p.w_v.data[0]
        np.testing.assert_allclose(out.reshape(2, 8, 4), np.broadcast_to(v.mean(axis=1, keepdims=True), (2, 8, 4)), atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        p, f = tsa_case(16, 3, 8)
        maps = tsa_attention_map(t64(f), p)
        assert maps.shape == (2, 8, 2, 2)
        np.testing.assert_allclose(maps.sum(-1), 1, atol=1e-12)

    def test_heads_must_divide(self):
        with pytest.raises(ShapeError):
            TsaParams(Rng(0), 12, 2, 2, heads=8)

    def test_pos_enc_init_scale(self):
        p = TsaParams(Rng(0), 64, 8, 8)
        assert abs(p.pos_enc.data.std() - 0.02) < 0.002


class TestGsa:
    @pytest.mark.parametrize("c,s", sorted({(c, s) for c, s, _ in ORACLE_GRID}))
    def test_matches_loop_oracle(self, c, s):
        p = GsaParams(Rng(c + s), c).astype(np.float64)
        f = np.random.default_rng(s).standard_normal((2, c, s, s))
        ref, ref_maps = gsa_loop(f, p.proj_reduce.weight.data, p.proj_reduce.bias.data, p.proj_full.weight.data, p.proj_full.bias.data)
        np.testing.assert_allclose(gsa_forward(t64(f), p).data, ref, atol=1e-5, rtol=0)
        np.testing.assert_allclose(gsa_attention_map(t64(f), p), ref_maps, atol=1e-5, rtol=0)

    def test_columns_sum_to_one(self):
        p = GsaParams(Rng(1), 16).astype(np.float64)
        b = gsa_attention_map(t64(np.random.default_rng(0).standard_normal((1, 16, 3, 3))), p)
        np.testing.assert_allclose(b.sum(axis=1), 1, atol=1e-12)

    def test_constant_input_gives_uniform_map(self):
        p = GsaParams(Rng(2), 8).astype(np.float64)
        f = np.full((1, 8, 3, 3), 0.4)
        np.testing.assert_allclose(gsa_attention_map(t64(f), p), 1 / 9, atol=1e-12)
        # uniform weights reproduce the per-channel mean of W, constant here
        w_full = p.proj_full(t64(f)).data
        np.testing.assert_allclose(gsa_forward(t64(f), p).data, w_full, atol=1e-12)

    def test_permutation_covariance(self):
        # permuting positions permutes the output the same way
        p = GsaParams(Rng(4), 8).astype(np.float64)
        f = np.random.default_rng(1).standard_normal((1, 8, 2, 3))
        perm = np.random.default_rng(2).permutation(6)
        fp = f.reshape(1, 8, 6)[:, :, perm].reshape(1, 8, 2, 3)
        out = gsa_forward(t64(f), p).data.reshape(1, 8, 6)
        out_p = gsa_forward(t64(fp), p).data.reshape(1, 8, 6)
        np.testing.assert_allclose(out_p, out[:, :, perm], atol=1e-12)

    def test_channel_count(self):
        with pytest.raises(ShapeError):
            GsaParams(Rng(0), 12)


class TestFusion:
    def test_fresh_is_identity(self):
        saa = SelfAwareAttention(Rng(0), 16, 4, 4, heads=8)
        f = Tensor(np.random.default_rng(0).standard_normal((2, 16, 4, 4)).astype(np.float32))
        assert saa_forward(f, saa).data.tobytes() == f.data.tobytes()

    def test_lambda_gradient_is_branch_sum(self):
        rng = np.random.default_rng(5)
        f_en, f_tsa, f_gsa = (t64(rng.standard_normal((1, 8, 2, 2))) for _ in range(3))
        p = FusionParams().astype(np.float64)
        saa_fuse(f_en, f_tsa, f_gsa, p).sum().backward()
        assert p.lambda1.grad == pytest.approx(f_tsa.data.sum(), abs=1e-12)
        assert p.lambda2.grad == pytest.approx(f_gsa.data.sum(), abs=1e-12)

    def test_weighted_combination(self):
        rng = np.random.default_rng(6)
        f_en, f_tsa, f_gsa = (rng.standard_normal((1, 8, 2, 2)) for _ in range(3))
        p = FusionParams().astype(np.float64)
        p.lambda1.data, p.lambda2.data = np.array(0.3), np.array(-2.0)
        out = saa_fuse(t64(f_en), t64(f_tsa), t64(f_gsa), p).data
        np.testing.assert_allclose(out, 0.3 * f_tsa - 2.0 * f_gsa + f_en, atol=1e-12)

    def test_disabled_branches_pass_through(self):
        saa = SelfAwareAttention(Rng(0), 8, 2, 2, heads=1, use_tsa=False, use_gsa=False)
        f = t64(np.ones((1, 8, 2, 2)))
        assert saa(f) is f

    def test_disabled_branch_has_no_weight(self):
        names = {n for n, _ in SelfAwareAttention(Rng(0), 8, 2, 2, heads=1, use_tsa=False).named_parameters()}
        assert "fusion.lambda2" in names and "fusion.lambda1" not in names
        with pytest.raises(ValueError):
            saa_fuse(t64(np.zeros((1, 8, 2, 2))), t64(np.zeros((1, 8, 2, 2))), None, FusionParams(use_tsa=False))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            saa_fuse(t64(np.zeros((1, 8, 2, 2))), t64(np.zeros((1, 8, 2, 3))), None, FusionParams())

    def test_every_parameter_gets_gradient_once_lambdas_move(self):
        saa = SelfAwareAttention(Rng(1), 16, 2, 2, heads=8).astype(np.float64)
        saa.fusion.lambda1.data, saa.fusion.lambda2.data = np.array(0.5), np.array(0.5)
        f = t64(np.random.default_rng(3).standard_normal((2, 16, 2, 2)))
        (saa(f) * t64(np.random.default_rng(4).standard_normal(f.shape))).sum().backward()
        for name, prm in saa.named_parameters():
            assert prm.grad is not None and np.abs(prm.grad).max() > 0, name
