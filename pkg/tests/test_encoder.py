"""Tests for the K-head instance encoder: forward structure, invariants,
and the hand-derived backward pass against finite differences."""

import numpy as np
import pytest

from polyemb import encoder
from polyemb import numerics as nm
from polyemb.errors import ConfigError, EmptyInstanceError, ShapeError


def make(fusion="residual", num_heads=3, feat_dim=8, embed_dim=4, attn_dim=4,
         seed=0):
    cfg = encoder.EncoderConfig(num_heads=num_heads, feat_dim=feat_dim,
                                embed_dim=embed_dim, attn_dim=attn_dim,
                                fusion=fusion)
    params = encoder.init_params(cfg, np.random.default_rng(seed))
    return cfg, params


def pack_params(params, names):
    return np.concatenate([getattr(params, n).ravel() for n in names])


def unpack_params(theta, template, names):
    out = encoder.EncoderParams.from_dict({})
    i = 0
    for n in names:
        ref = getattr(template, n)
        setattr(out, n, theta[i:i + ref.size].reshape(ref.shape).copy())
        i += ref.size
    return out


class TestConfig:
    def test_attn_dim_defaults_to_half_feat_dim(self):
        cfg = encoder.EncoderConfig(num_heads=2, feat_dim=9, embed_dim=4)
        assert cfg.attn_dim == 4

    def test_validation(self):
        with pytest.raises(ConfigError):
            encoder.EncoderConfig(num_heads=0, feat_dim=4, embed_dim=4)
        with pytest.raises(ConfigError):
            encoder.EncoderConfig(num_heads=1, feat_dim=4, embed_dim=4,
                                  fusion="bogus")


class TestGlobalEncode:
    def test_identical_rows_reduce_to_one_projection(self):
        cfg, params = make()
        row = np.arange(8.0)
        feats = np.tile(row, (5, 1))
        expected = nm.matmul(row[None, :], params.global_w)[0] + params.global_b
        assert np.array_equal(encoder.global_encode(feats, params, cfg), expected)

    def test_identity_projection(self):
        cfg, params = make(feat_dim=2, embed_dim=2, attn_dim=1)
        params.global_w = np.eye(2)
        params.global_b = np.zeros(2)
        feats = np.array([[1.0, 3.0], [3.0, 1.0]])
        assert np.allclose(encoder.global_encode(feats, params, cfg), [2.0, 2.0],
                           atol=1e-15)

    def test_row_permutation_bitwise_invariant(self):
        cfg, params = make()
        feats = np.random.default_rng(1).standard_normal((7, 8))
        base = encoder.global_encode(feats, params, cfg)
        for seed in range(4):
            perm = np.random.default_rng(seed).permutation(7)
            assert np.array_equal(
                encoder.global_encode(feats[perm], params, cfg), base)

    def test_empty_instance_rejected(self):
        cfg, params = make()
        with pytest.raises(EmptyInstanceError):
            encoder.global_encode(np.empty((0, 8)), params, cfg)


class TestAttention:
    def test_zero_hidden_weights_give_uniform_maps(self):
        cfg, params = make()
        params.attn_hidden_w = np.zeros_like(params.attn_hidden_w)
        feats = np.random.default_rng(2).standard_normal((6, 8))
        attn = encoder.attention_maps(feats, params, cfg)
        assert np.allclose(attn, 1.0 / 6.0, atol=1e-15)

    def test_zero_head_weights_give_uniform_maps(self):
        cfg, params = make()
        params.attn_head_w = np.zeros_like(params.attn_head_w)
        feats = np.random.default_rng(3).standard_normal((5, 8))
        attn = encoder.attention_maps(feats, params, cfg)
        assert np.allclose(attn, 1.0 / 5.0, atol=1e-15)

    def test_rows_sum_to_one(self):
        cfg, params = make()
        feats = np.random.default_rng(4).standard_normal((9, 8))
        attn = encoder.attention_maps(feats, params, cfg)
        assert attn.shape == (3, 9)
        assert np.max(np.abs(attn.sum(axis=1) - 1.0)) < 1e-12
        assert np.all(attn >= 0)


class TestGuidedFeatures:
    def test_zero_projection_gives_half(self):
        cfg, params = make()
        params.local_w = np.zeros_like(params.local_w)
        params.local_b = np.zeros_like(params.local_b)
        feats = np.random.default_rng(5).standard_normal((4, 8))
        attn = encoder.attention_maps(feats, params, cfg)
        guided = encoder.guided_features(attn, feats, params)
        assert np.allclose(guided, 0.5, atol=1e-15)

    def test_one_hot_attention_selects_rows(self):
        cfg, params = make()
        feats = np.random.default_rng(6).standard_normal((5, 8))
        attn = np.zeros((3, 5))
        attn[0, 2] = attn[1, 0] = attn[2, 4] = 1.0
        attended = nm.matmul(attn, feats)
        assert np.allclose(attended, feats[[2, 0, 4]], atol=1e-15)

    def test_matches_naive_recomputation(self):
        cfg, params = make()
        rng = np.random.default_rng(7)
        feats = rng.standard_normal((6, 8))
        attn = encoder.attention_maps(feats, params, cfg)
        guided = encoder.guided_features(attn, feats, params)
        for k in range(3):
            mix = np.zeros(8)
            for b in range(6):
                mix += attn[k, b] * feats[b]
            pre = mix @ params.local_w + params.local_b
            assert np.allclose(guided[k], 1.0 / (1.0 + np.exp(-pre)), atol=1e-12)


class TestFuse:
    def test_zero_guided_collapses_to_identical_rows(self):
        cfg, params = make()
        phi = np.random.default_rng(8).standard_normal(4)
        z = encoder.fuse(phi, np.zeros((3, 4)), params)
        assert np.array_equal(z[0], z[1])
        assert np.array_equal(z[0], z[2])

    def test_rows_zero_mean(self):
        cfg, params = make()
        rng = np.random.default_rng(9)
        z = encoder.fuse(rng.standard_normal(4),
                         rng.uniform(0, 1, (3, 4)), params)
        assert np.max(np.abs(z.mean(axis=1))) < 1e-9

    def test_constant_shift_of_global_feature_is_absorbed(self):
        cfg, params = make()
        rng = np.random.default_rng(10)
        phi = rng.standard_normal(4)
        guided = rng.uniform(0, 1, (3, 4))
        base = encoder.fuse(phi, guided, params)
        shifted = encoder.fuse(phi + 2.5, guided, params)
        assert np.max(np.abs(shifted - base)) < 1e-9


class TestForward:
    def test_single_head_uniform_attention(self):
        cfg, params = make(num_heads=1)
        params.attn_hidden_w = np.zeros_like(params.attn_hidden_w)
        feats = np.random.default_rng(11).standard_normal((4, 8))
        out = encoder.forward(feats, params, cfg)
        assert out.embeddings.shape == (1, 4)
        assert np.allclose(out.attention, 0.25, atol=1e-15)

    def test_output_shapes(self):
        cfg, params = make(num_heads=5, feat_dim=6, embed_dim=3, attn_dim=2)
        feats = np.random.default_rng(12).standard_normal((7, 6))
        out = encoder.forward(feats, params, cfg)
        assert out.embeddings.shape == (5, 3)
        assert out.attention.shape == (5, 7)
        assert out.guided.shape == (5, 3)
        assert out.global_feat.shape == (3,)

    def test_guided_strictly_inside_unit_interval(self):
        cfg, params = make()
        feats = np.random.default_rng(13).standard_normal((6, 8)) * 4
        out = encoder.forward(feats, params, cfg)
        assert np.all(out.guided > 0) and np.all(out.guided < 1)

    def test_permutation_invariance(self):
        cfg, params = make()
        feats = np.random.default_rng(14).standard_normal((9, 8))
        base = encoder.forward(feats, params, cfg)
        for seed in range(5):
            perm = np.random.default_rng(seed + 100).permutation(9)
            out = encoder.forward(feats[perm], params, cfg)
            assert np.max(np.abs(out.embeddings - base.embeddings)) < 1e-9

    def test_max_parts_enforced(self):
        cfg = encoder.EncoderConfig(num_heads=2, feat_dim=4, embed_dim=4,
                                    max_parts=3)
        params = encoder.init_params(cfg, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            encoder.forward(np.zeros((4, 4)), params, cfg)


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        cfg, params = make()
        feats = np.random.default_rng(15).standard_normal((5, 8))
        out = encoder.forward(feats, params, cfg)
        grads, dfeats = encoder.backward(out, None, None, params, cfg)
        for _, arr in grads.items():
            assert np.array_equal(arr, np.zeros_like(arr))
        assert np.array_equal(dfeats, np.zeros_like(feats))

    def test_guided_stream_never_touches_global_projection(self):
        cfg, params = make()
        feats = np.random.default_rng(16).standard_normal((5, 8))
        out = encoder.forward(feats, params, cfg)
        d_guided = np.random.default_rng(17).standard_normal((3, 4))
        grads, _ = encoder.backward(out, None, d_guided, params, cfg)
        assert np.array_equal(grads.global_w, np.zeros_like(grads.global_w))
        assert np.array_equal(grads.global_b, np.zeros_like(grads.global_b))
        assert np.array_equal(grads.ln_gain, np.zeros_like(grads.ln_gain))
        assert not np.array_equal(grads.local_w, np.zeros_like(grads.local_w))

    @pytest.mark.parametrize("fusion", ["residual", "concat"])
    def test_full_gradient_against_finite_differences(self, fusion):
        cfg, params = make(fusion=fusion, num_heads=3, feat_dim=8,
                           embed_dim=4, attn_dim=4, seed=42)
        rng = np.random.default_rng(43)
        feats = rng.standard_normal((5, 8))
        wz = rng.standard_normal((3, 4))
        wu = rng.standard_normal((3, 4))
        out = encoder.forward(feats, params, cfg)
        grads, dfeats = encoder.backward(out, wz, wu, params, cfg)
        names = [n for n, _ in params.items()]

        def f(theta):
            o = encoder.forward(feats, unpack_params(theta, params, names), cfg)
            return float(np.sum(o.embeddings * wz) + np.sum(o.guided * wu))

        err = nm.finite_diff_check(f, pack_params(params, names),
                                   pack_params(grads, names))
        assert err < 1e-4

        def f_feats(theta):
            o = encoder.forward(theta.reshape(5, 8), params, cfg)
            return float(np.sum(o.embeddings * wz) + np.sum(o.guided * wu))

        assert nm.finite_diff_check(f_feats, feats.ravel(), dfeats.ravel()) < 1e-4

    def test_backward_requires_cache(self):
        cfg, params = make()
        bogus = encoder.EncoderOutput(
            embeddings=np.zeros((3, 4)), guided=np.zeros((3, 4)),
            attention=np.zeros((3, 5)), global_feat=np.zeros(4))
        with pytest.raises(ShapeError):
            encoder.backward(bogus, None, None, params, cfg)


class TestStructuralInvariants:
    """Randomized structural checks over many seeds."""

    def test_over_100_seeds(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            k = int(rng.integers(1, 5))
            b = int(rng.integers(1, 8))
            cfg = encoder.EncoderConfig(num_heads=k, feat_dim=6, embed_dim=5,
                                        attn_dim=3)
            params = encoder.init_params(cfg, rng)
            feats = rng.standard_normal((b, 6)) * 2
            out = encoder.forward(feats, params, cfg)
            # attention rows are probability vectors
            assert np.max(np.abs(out.attention.sum(axis=1) - 1.0)) < 1e-12
            assert np.all(out.attention >= 0)
            # guided features strictly inside (0, 1)
            assert np.all(out.guided > 0) and np.all(out.guided < 1)
            # embeddings are zero-mean per row before the affine (gain=1, bias=0)
            assert np.max(np.abs(out.embeddings.mean(axis=1))) < 1e-9
            # unit variance up to the eps perturbation: the normalizer is
            # sqrt(var + eps), so the output variance is var/(var + eps)
            raw_var = (out.global_feat[None, :] + out.guided).var(axis=1)
            expected = raw_var / (raw_var + nm.EPS_LAYER_NORM)
            z_var = out.embeddings.var(axis=1)
            assert np.max(np.abs(z_var - expected)) < 1e-9
            adequate = raw_var >= 0.1
            if adequate.any():
                assert np.max(np.abs(z_var[adequate] - 1.0)) < 1.1e-4
