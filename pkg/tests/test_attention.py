import math
import tracemalloc

import numpy as np
import pytest

from coat import attention as A
from coat import reference as R
from coat import tensor as T
from coat.errors import ConfigError, DimensionError
from coat.tensor import Tensor

from conftest import randn


def t64(x):
    return Tensor(np.asarray(x, dtype=float), "f64")


class TestTokenSeq:
    def test_counts(self, gen):
        s = A.TokenSeq(randn(gen, 4), randn(gen, 2, 3, 4))
        assert (s.H, s.W, s.C, s.N) == (2, 3, 4, 7)
        assert s.tokens().shape == (7, 4)

    def test_round_trip(self, gen):
        s = A.TokenSeq(randn(gen, 4), randn(gen, 2, 3, 4))
        back = A.TokenSeq.from_tokens(s.tokens(), 2, 3)
        assert np.array_equal(back.cls.data, s.cls.data) and np.array_equal(back.img.data, s.img.data)

    def test_cls_mismatch(self, gen):
        with pytest.raises(DimensionError):
            A.TokenSeq(randn(gen, 3), randn(gen, 2, 2, 4))

    def test_token_count_mismatch(self, gen):
        with pytest.raises(DimensionError):
            A.TokenSeq.from_tokens(randn(gen, 6, 4), 2, 3)


class TestConfig:
    def test_default_windows(self):
        assert A.default_crpe_windows(8) == {3: 2, 5: 3, 7: 3}

    def test_accepts_full_assignment(self):
        assert A.ConvAttConfig(64, 8, {3: 2, 5: 3, 7: 3}).head_dim == 8

    def test_rejects_short_assignment(self):
        with pytest.raises(ConfigError):
            A.ConvAttConfig(64, 8, {3: 2, 5: 2, 7: 3})

    def test_rejects_even_window(self):
        with pytest.raises(ConfigError):
            A.ConvAttConfig(8, 2, {4: 2})

    def test_rejects_indivisible_channels(self):
        with pytest.raises(ConfigError):
            A.ConvAttConfig(10, 4)

    def test_window_slices_contiguous(self):
        sl = A.ConvAttConfig(64, 8).window_slices()
        assert [(m, s.start, s.stop) for m, s in sl] == [(3, 0, 16), (5, 16, 40), (7, 40, 64)]


class TestSDPA:
    def test_single_token(self, gen):
        v = randn(gen, 1, 3)
        out = A.scaled_dot_product_attention(randn(gen, 1, 3), randn(gen, 1, 3), v)
        np.testing.assert_allclose(out.data, v.data)

    def test_equal_keys_give_mean(self, gen):
        k = t64(np.tile(gen.standard_normal(3), (5, 1)))
        v = randn(gen, 5, 3)
        out = A.scaled_dot_product_attention(randn(gen, 5, 3), k, v).data
        np.testing.assert_allclose(out, np.tile(v.data.mean(0), (5, 1)), atol=1e-14)

    def test_loop_oracle(self, gen):
        q, k, v = (gen.standard_normal((4, 3)) for _ in range(3))
        out = A.scaled_dot_product_attention(t64(q), t64(k), t64(v)).data
        np.testing.assert_allclose(out, R.scaled_dot_product_attention(q, k, v), atol=1e-12)

    def test_shape_mismatch(self, gen):
        with pytest.raises(DimensionError):
            A.scaled_dot_product_attention(randn(gen, 3, 2), randn(gen, 3, 3), randn(gen, 3, 3))


class TestFactorized:
    def test_single_token_closed_form(self, gen):
        q, k, v = gen.standard_normal((1, 5)), gen.standard_normal((1, 5)), gen.standard_normal((1, 5))
        out = A.factorized_attention(t64(q), t64(k), t64(v)).data
        np.testing.assert_allclose(out, q.sum() * v / math.sqrt(5), atol=1e-14)
        np.testing.assert_allclose(out, R.factorized_attention(q, k, v), atol=1e-14)

    def test_zero_query(self, gen):
        out = A.factorized_attention(t64(np.zeros((4, 3))), randn(gen, 4, 3), randn(gen, 4, 3))
        assert not out.data.any()

    def test_identical_query_rows(self, gen):
        q = gen.standard_normal((6, 4))
        q[4] = q[1]
        out = A.factorized_attention(t64(q), randn(gen, 6, 4), randn(gen, 6, 4)).data
        assert np.array_equal(out[1], out[4])

    def test_loop_oracle(self, gen):
        q, k, v = (gen.standard_normal((17, 6)) for _ in range(3))
        out = A.factorized_attention(t64(q), t64(k), t64(v)).data
        np.testing.assert_allclose(out, R.factorized_attention(q, k, v), atol=1e-12)

    @pytest.mark.parametrize("chunk", [1, 3, 7, 256])
    def test_chunking_invariant(self, gen, chunk):
        q, k, v = (gen.standard_normal((20, 4)) for _ in range(3))
        a = A.factorized_attention(t64(q), t64(k), t64(v), chunk=chunk).data
        np.testing.assert_allclose(a, R.factorized_attention(q, k, v), atol=1e-12)

    def test_different_query_and_key_lengths(self, gen):
        q, k, v = gen.standard_normal((3, 4)), gen.standard_normal((9, 4)), gen.standard_normal((9, 4))
        out = A.factorized_attention(t64(q), t64(k), t64(v)).data
        np.testing.assert_allclose(out, R.factorized_attention(q, k, v), atol=1e-12)

    def test_batched_heads(self, gen):
        q, k, v = (gen.standard_normal((2, 7, 3)) for _ in range(3))
        out = A.factorized_attention(t64(q), t64(k), t64(v)).data
        for h in range(2):
            np.testing.assert_allclose(out[h], R.factorized_attention(q[h], k[h], v[h]), atol=1e-12)

    def test_kernel_matches_op_f32(self, gen):
        q, k, v = (gen.uniform(-1, 1, (300, 16)).astype(np.float32) for _ in range(3))
        np.testing.assert_allclose(A.factorized_attention_kernel(q, k, v), R.factorized_attention(q, k, v),
                                   atol=1e-4)

    def test_sdpa_kernel_matches_reference(self, gen):
        q, k, v = (gen.uniform(-1, 1, (12, 4)) for _ in range(3))
        np.testing.assert_allclose(A.sdpa_kernel(q, k, v), R.scaled_dot_product_attention(q, k, v), atol=1e-12)

    def test_transient_memory_independent_of_n_squared(self):
        # tracemalloc is an allocator-level cross-check of the audit hook
        c = 16
        peaks = []
        for n in (2048, 8192):
            gen = np.random.default_rng(0)
            q, k, v = (gen.standard_normal((n, c)) for _ in range(3))
            out = np.empty((n, c))
            tracemalloc.start()
            A.factorized_attention_kernel(q, k, v, out=out)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            peaks.append(peak)
        assert peaks[1] < 1.3 * peaks[0]
        assert peaks[1] < 8192 * 8192 * 8 / 100


class TestRelativeOracle:
    def test_zero_p_reduces_to_factorized(self, gen):
        q, k, v = (gen.standard_normal((6, 3)) for _ in range(3))
        out = A.rel_factor_att_oracle(q, k, v, np.zeros((3, 3))).data
        assert np.array_equal(out, A.factorized_attention(t64(q), t64(k), t64(v)).data)

    def test_window_one_is_diagonal(self, gen):
        q, v, p = gen.standard_normal((5, 2)), gen.standard_normal((5, 2)), gen.standard_normal((1, 2))
        np.testing.assert_allclose(A.relative_term_oracle(q, v, p), q * p[0] * v, atol=1e-15)

    def test_tridiagonal_mask(self):
        # with q = p = 1, E V sums v over |j - i| <= 1
        v = np.arange(3, dtype=float)[:, None]
        out = A.relative_term_oracle(np.ones((3, 1)), v, np.ones((3, 1)))
        np.testing.assert_array_equal(out[:, 0], [0 + 1, 0 + 1 + 2, 1 + 2])

    def test_matches_loop_reference(self, gen):
        q, v, p = gen.standard_normal((9, 3)), gen.standard_normal((9, 3)), gen.standard_normal((5, 3))
        np.testing.assert_allclose(A.relative_term_oracle(q, v, p), R.relative_term(q, v, p), atol=1e-13)

    def test_saturated_window(self, gen):
        q, v, p = gen.standard_normal((2, 1)), gen.standard_normal((2, 1)), gen.standard_normal((7, 1))
        np.testing.assert_allclose(A.relative_term_oracle(q, v, p), R.relative_term(q, v, p), atol=1e-14)

    def test_even_window_rejected(self, gen):
        with pytest.raises(ConfigError):
            A.rel_factor_att_oracle(*(gen.standard_normal((3, 2)) for _ in range(3)), np.zeros((2, 2)))


class TestCRPE:
    def _setup(self, gen, h=3, w=4, c=8, heads=2, windows=None):
        cfg = A.ConvAttConfig(c, heads, windows or {3: 1, 5: 1})
        q, v = randn(gen, h * w + 1, c), randn(gen, h * w + 1, c)
        return cfg, q, v

    def test_cls_row_zero(self, gen):
        cfg, q, v = self._setup(gen)
        kernels = {m: randn(gen, m, m, 4) for m in (3, 5)}
        assert not A.crpe(q, v, kernels, cfg, 3, 4).data[0].any()

    def test_identity_kernels(self, gen):
        cfg, q, v = self._setup(gen)
        kernels = {}
        for m in (3, 5):
            k = np.zeros((m, m, 4))
            k[m // 2, m // 2] = 1
            kernels[m] = t64(k)
        out = A.crpe(q, v, kernels, cfg, 3, 4).data
        np.testing.assert_allclose(out[1:], q.data[1:] * v.data[1:], atol=1e-15)

    @pytest.mark.parametrize("m", [3, 5, 7])
    def test_strip_matches_explicit_e(self, gen, m):
        n, c = 11, 3
        q, v = gen.standard_normal((n + 1, c)), gen.standard_normal((n + 1, c))
        k = gen.standard_normal((m, m, c))
        out = A.crpe(t64(q), t64(v), {m: t64(k)}, A.ConvAttConfig(c, 1, {m: 1}), 1, n).data
        np.testing.assert_allclose(out[1:], A.relative_term_oracle(q[1:], v[1:], k[m // 2]), atol=1e-12)

    def test_head_groups_use_own_window(self, gen):
        # zeroing the 5-window kernel only silences the second head group
        cfg, q, v = self._setup(gen)
        kernels = {3: randn(gen, 3, 3, 4), 5: t64(np.zeros((5, 5, 4)))}
        out = A.crpe(q, v, kernels, cfg, 3, 4).data
        assert out[1:, :4].any() and not out[:, 4:].any()

    def test_wrong_token_count(self, gen):
        cfg, q, v = self._setup(gen)
        with pytest.raises(DimensionError):
            A.crpe(q, v, {}, cfg, 4, 4)

    def test_kernel_matches_op(self, gen):
        q, v, k = gen.standard_normal((5, 6, 4)), gen.standard_normal((5, 6, 4)), gen.standard_normal((3, 3, 4))
        ref = q * R.depthwise_conv2d(v, k)
        np.testing.assert_allclose(A.crpe_kernel(q, v, k), ref, atol=1e-12)


class TestCPE:
    def test_zero_kernel_identity(self, gen):
        x = A.TokenSeq(randn(gen, 3), randn(gen, 3, 3, 3))
        y = A.cpe(x, t64(np.zeros((3, 3, 3))))
        assert np.array_equal(y.tokens().data, x.tokens().data)

    def test_cls_passes_through(self, gen):
        x = A.TokenSeq(randn(gen, 3), randn(gen, 3, 3, 3))
        y = A.cpe(x, randn(gen, 3, 3, 3))
        assert y.cls is x.cls

    def test_constant_tokens_averaging_kernel(self):
        img = np.full((5, 5, 1), 2.0)
        k = np.full((3, 3, 1), 1 / 9)
        y = A.cpe(A.TokenSeq(None, t64(img)), t64(k)).img.data
        assert y[2, 2, 0] == pytest.approx(4.0)
        np.testing.assert_allclose(y, img + R.depthwise_conv2d(img, k), atol=1e-14)


class TestModule:
    def test_zero_weights_identity(self, gen):
        cfg = A.ConvAttConfig(8, 2, {3: 1, 5: 1})
        mod = A.ConvAttention(cfg, dtype="f64")  # no generator: all-zero weights
        x = A.TokenSeq(randn(gen, 8), randn(gen, 3, 3, 8))
        np.testing.assert_array_equal(mod(x).tokens().data, x.tokens().data)

    def test_single_head_compositional_oracle(self, gen):
        cfg = A.ConvAttConfig(4, 1, {3: 1})
        mod = A.ConvAttention(cfg, gen=T.rng(1), dtype="f64")
        for p in mod.pos.crpe_kernels.values():
            p.data[...] = 0.0
        x = A.TokenSeq(randn(gen, 4), randn(gen, 3, 2, 4))
        base = A.cpe(x, mod.pos.cpe_kernel).tokens()
        h = T.layer_norm(base, mod.norm_w, mod.norm_b).data
        q = h @ mod.wq.data + mod.bq.data
        k = h @ mod.wk.data + mod.bk.data
        v = h @ mod.wv.data + mod.bv.data
        expect = base.data + R.factorized_attention(q, k, v) @ mod.wo.data + mod.bo.data
        np.testing.assert_allclose(mod(x).tokens().data, expect, atol=1e-12)

    def test_per_head_scaling_uses_head_dim(self, gen):
        cfg = A.ConvAttConfig(8, 2, {3: 2})
        mod = A.ConvAttention(cfg, gen=T.rng(2), dtype="f64")
        mod.use_crpe = False
        q, k, v = (gen.standard_normal((5, 8)) for _ in range(3))
        out = mod.mix(t64(q), t64(k), t64(v), 2, 2).data
        for hd in range(2):
            sl = slice(4 * hd, 4 * hd + 4)
            np.testing.assert_allclose(out[:, sl], R.factorized_attention(q[:, sl], k[:, sl], v[:, sl]),
                                       atol=1e-12)

    def test_shared_position_encodings(self):
        cfg = A.ConvAttConfig(8, 2, {3: 1, 5: 1})
        pos = A.PositionEncodings(cfg, T.rng(0))
        a, b = A.ConvAttention(cfg, pos, T.rng(1)), A.ConvAttention(cfg, pos, T.rng(2))
        a.pos.cpe_kernel.data[0, 0, 0] = 5.0
        assert b.pos.cpe_kernel.data[0, 0, 0] == 5.0

    def test_pe_config_mismatch(self):
        pos = A.PositionEncodings(A.ConvAttConfig(8, 2, {3: 2}))
        with pytest.raises(ConfigError):
            A.ConvAttention(A.ConvAttConfig(8, 2, {3: 1, 5: 1}), pos)

    def test_channel_mismatch(self, gen):
        mod = A.ConvAttention(A.ConvAttConfig(8, 2, {3: 2}))
        with pytest.raises(DimensionError):
            mod(A.TokenSeq(randn(gen, 4, dtype="f32"), randn(gen, 2, 2, 4, dtype="f32")))

    def test_permutation_equivariance(self, gen):
        q, k, v = (gen.standard_normal((16, 4)) for _ in range(3))
        perm = gen.permutation(16)
        a = A.factorized_attention(t64(q), t64(k), t64(v)).data[perm]
        b = A.factorized_attention(t64(q[perm]), t64(k[perm]), t64(v[perm])).data
        np.testing.assert_allclose(a, b, atol=1e-12)
