import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epinet import layers as L
from epinet.errors import ConfigError, ContractError, DimensionError
from oracles import epitomic_oracle, maxpool_oracle, normalized_oracle


def ep_params(ep, w, s_in=1, s_ep=1, **kw):
    return L.EpitomicLayerParams(ep, None, w, s_in, s_ep, **kw)


class TestParams:
    def test_table2_layer1_geometry(self):
        p = ep_params(np.zeros((1, 1, 12, 12), np.float32), 8)
        assert p.displacement == 5 and p.epitome_size == 12

    def test_epitome_stride_two_candidates(self):
        p = ep_params(np.zeros((1, 1, 12, 12), np.float32), 8, s_ep=2)
        assert p.offsets == [0, 2, 4]

    def test_filter_larger_than_epitome(self):
        with pytest.raises(ConfigError):
            ep_params(np.zeros((1, 1, 3, 3)), 4)

    def test_normalized_needs_positive_lambda(self):
        with pytest.raises(ConfigError):
            ep_params(np.zeros((1, 1, 3, 3)), 2, normalized=True, lam=0.0)

    def test_maxpool_nonfinite_filters(self):
        with pytest.raises(ConfigError):
            L.MaxPoolConvParams(np.full((1, 1, 2, 2), np.nan))


class TestMaxPoolConv:
    def test_delta_filter_constant_input(self):
        f = np.zeros((1, 1, 3, 3), np.float32)
        f[0, 0, 1, 1] = 1
        x = np.full((1, 1, 8, 8), 2.0, np.float32)
        y, rec = L.maxpool_conv_forward(x, L.MaxPoolConvParams(f, pool_size=2))
        assert np.all(y == 2.0) and np.all(rec.index == 0)

    def test_d1_is_plain_correlation(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 2, 6, 7))
        f = rng.standard_normal((3, 2, 3, 3))
        y, _ = L.maxpool_conv_forward(x, L.MaxPoolConvParams(f, pool_size=1))
        assert np.array_equal(y, L.conv_forward(x, f, None))

    def test_exhaustive_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 1, 8, 8))
        f = rng.standard_normal((2, 1, 3, 3))
        y, _ = L.maxpool_conv_forward(x, L.MaxPoolConvParams(f, pool_size=2))
        assert np.allclose(y, maxpool_oracle(x, f, 2), rtol=0, atol=1e-12)

    def test_empty_grid(self):
        with pytest.raises(DimensionError):
            L.maxpool_conv_forward(np.zeros((1, 1, 3, 3)),
                                   L.MaxPoolConvParams(np.zeros((1, 1, 3, 3)), pool_size=2))

    def test_zero_grad(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 8, 8))
        p = L.MaxPoolConvParams(rng.standard_normal((2, 2, 3, 3)), pool_size=2)
        y, rec = L.maxpool_conv_forward(x, p)
        dx, df = L.maxpool_conv_backward(np.zeros_like(y), rec, x, p)
        assert not dx.any() and not df.any()

    def test_d1_backward_is_conv_backward(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 1, 6, 6))
        f = rng.standard_normal((1, 1, 3, 3))
        p = L.MaxPoolConvParams(f, pool_size=1)
        y, rec = L.maxpool_conv_forward(x, p)
        g = rng.standard_normal(y.shape)
        dx, df = L.maxpool_conv_backward(g, rec, x, p)
        rx, rf, _ = L.conv_backward(g, x, f)
        assert np.allclose(dx, rx) and np.allclose(df, rf)

    def test_stale_record(self):
        rng = np.random.default_rng(4)
        p = L.MaxPoolConvParams(rng.standard_normal((1, 1, 3, 3)), pool_size=2)
        x = rng.standard_normal((1, 1, 8, 8))
        y, rec = L.maxpool_conv_forward(x, p)
        with pytest.raises(ContractError):
            L.maxpool_conv_backward(y, rec, rng.standard_normal((1, 1, 10, 10)), p)


class TestEpitomicConv:
    def test_zero_epitomes(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 7, 7)).astype(np.float32)
        y, rec = L.epitomic_conv_forward(x, ep_params(np.zeros((2, 1, 5, 5), np.float32), 3))
        assert not y.any() and np.all(rec.index == 0)

    def test_spec_example_against_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 1, 7, 7)).astype(np.float32)
        ep = rng.standard_normal((2, 1, 5, 5)).astype(np.float32)
        y, rec = L.epitomic_conv_forward(x, ep_params(ep, 3, s_in=2))
        ry, rarg = epitomic_oracle(x, ep, 3, 2)
        assert len(rec.candidates) == 9
        assert np.array_equal(y, ry) and np.array_equal(rec.index, rarg)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10**6), w=st.integers(1, 3), extra=st.integers(0, 2),
           s_in=st.integers(1, 3), s_ep=st.integers(1, 2), dil=st.integers(1, 2))
    def test_oracle_property(self, seed, w, extra, s_in, s_ep, dil):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
        ep = rng.standard_normal((2, 2, w + extra, w + extra)).astype(np.float32)
        y, rec = L.epitomic_conv_forward(x, ep_params(ep, w, s_in, s_ep, dilation=dil))
        ry, rarg = epitomic_oracle(x, ep, w, s_in, s_ep, dil)
        assert np.array_equal(y, ry) and np.array_equal(rec.index, rarg)

    def test_single_displacement_is_strided_conv(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 2, 9, 9))
        ep = rng.standard_normal((3, 2, 3, 3))
        p = ep_params(ep, 3, s_in=2)
        y, rec = L.epitomic_conv_forward(x, p)
        assert np.array_equal(y, L.conv_forward(x, ep, None, stride=2))
        g = rng.standard_normal(y.shape)
        dx, de = L.epitomic_conv_backward(g, rec, x, p)
        rx, rw, _ = L.conv_backward(g, x, ep, stride=2)
        assert np.allclose(dx, rx) and np.allclose(de, rw)

    def test_zero_grad(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 1, 7, 7))
        p = ep_params(rng.standard_normal((2, 1, 5, 5)), 3)
        y, rec = L.epitomic_conv_forward(x, p)
        dx, de = L.epitomic_conv_backward(np.zeros_like(y), rec, x, p)
        assert not dx.any() and not de.any()

    def test_overlapping_winners_accumulate(self):
        # two patches whose winning crops (0, 0) and (0, 1) share epitome column 1
        rng = np.random.default_rng(6)
        ep = rng.standard_normal((1, 1, 3, 3))
        x = rng.standard_normal((1, 1, 2, 4))
        p = ep_params(ep, 2, s_in=2)
        y, rec = L.epitomic_conv_forward(x, p)
        rec.index[...] = np.array([[[[0, 1]]]])
        _, de = L.epitomic_conv_backward(np.ones_like(y), rec, x, p)
        expected = np.zeros_like(ep)
        expected[0, :, 0:2, 0:2] += x[0, :, :, 0:2]
        expected[0, :, 0:2, 1:3] += x[0, :, :, 2:4]
        assert np.array_equal(de, expected)
        assert de[0, 0, 0, 1] == x[0, 0, 0, 1] + x[0, 0, 0, 2]

    def test_duplicate_candidate_tie_break(self):
        rng = np.random.default_rng(4)
        f = rng.standard_normal((1, 2, 3, 3))
        x = rng.standard_normal((1, 2, 5, 5))
        once = np.zeros((1, 2, 6, 6))
        once[:, :, :3, :3] = f
        twice = once.copy()
        twice[:, :, :3, 3:] = f
        y1, _ = L.epitomic_conv_forward(x, ep_params(once, 3, s_ep=3))
        y2, rec = L.epitomic_conv_forward(x, ep_params(twice, 3, s_ep=3))
        assert np.array_equal(y1, y2)
        assert np.all(rec.index[y2 > 0] == 0)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            L.epitomic_conv_forward(np.zeros((1, 2, 5, 5)), ep_params(np.zeros((1, 1, 3, 3)), 2))

    def test_empty_patch_grid(self):
        with pytest.raises(DimensionError):
            L.epitomic_conv_forward(np.zeros((1, 1, 2, 2)), ep_params(np.zeros((1, 1, 4, 4)), 3))

    def test_record_offsets_in_candidate_set(self):
        rng = np.random.default_rng(5)
        p = ep_params(rng.standard_normal((2, 1, 7, 7)), 3, s_ep=2)
        _, rec = L.epitomic_conv_forward(rng.standard_normal((1, 1, 9, 9)), p)
        cands = set(p.candidates)
        assert {tuple(o) for o in rec.offsets().reshape(-1, 2)} <= cands


class TestNormalized:
    def test_constant_crop_gives_zero(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
        y, _ = L.normalized_epitomic_forward(x, ep_params(np.full((1, 1, 3, 3), 2.0), 3,
                                                          normalized=True))
        assert np.allclose(y, 0)

    def test_lambda_limit(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((1, 2, 3, 3))
        f -= f.mean()
        f /= np.linalg.norm(f)
        x = rng.standard_normal((1, 2, 7, 7))
        lam = 1e-8
        yn, _ = L.normalized_epitomic_forward(x, ep_params(f, 3, normalized=True, lam=lam))
        yu, _ = L.epitomic_conv_forward(x, ep_params(f, 3))
        bound = np.abs(yu) * (1 - 1 / np.sqrt(1 + lam)) + 1e-12
        assert np.all(np.abs(yn - yu) <= bound)

    def test_direct_formula(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 2, 9, 9))
        ep = rng.standard_normal((3, 2, 5, 5))
        y, _ = L.normalized_epitomic_forward(x, ep_params(ep, 3, s_in=2, normalized=True))
        assert np.allclose(y, normalized_oracle(x, ep, 3, 2, 0.01), rtol=1e-12, atol=1e-12)

    def test_orthogonal_centered_gradient(self):
        rng = np.random.default_rng(3)
        f = rng.standard_normal((1, 1, 3, 3))
        f -= f.mean()
        xp = rng.standard_normal((1, 1, 3, 3))
        xp -= xp.mean()
        fv, xv = f.ravel(), xp.ravel()
        xv -= fv * (xv @ fv) / (fv @ fv)
        xp = xv.reshape(1, 1, 3, 3)
        p = ep_params(f, 3, normalized=True)
        y, rec = L.normalized_epitomic_forward(xp, p)
        _, de = L.normalized_epitomic_backward(np.ones_like(y), rec, xp, p)
        n = np.sqrt(fv @ fv + 0.01)
        assert np.allclose(de.ravel(), (xv - xv.mean()) / n, atol=1e-12)

    def test_zero_grad(self):
        rng = np.random.default_rng(4)
        p = ep_params(rng.standard_normal((1, 1, 4, 4)), 3, normalized=True)
        x = rng.standard_normal((1, 1, 6, 6))
        y, rec = L.normalized_epitomic_forward(x, p)
        dx, de = L.normalized_epitomic_backward(np.zeros_like(y), rec, x, p)
        assert not dx.any() and not np.abs(de).max() > 0

    def test_scale_invariance_as_lambda_vanishes(self):
        rng = np.random.default_rng(5)
        ep = rng.standard_normal((2, 1, 4, 4))
        x = rng.standard_normal((1, 1, 7, 7))
        a, _ = L.normalized_epitomic_forward(x, ep_params(ep, 3, normalized=True, lam=1e-300))
        b, _ = L.normalized_epitomic_forward(x, ep_params(ep * 7.5, 3, normalized=True,
                                                           lam=1e-300))
        assert np.allclose(a, b, rtol=1e-13)

    def test_nonpositive_lambda(self):
        p = ep_params(np.ones((1, 1, 3, 3)), 3)
        p.lam = 0.0
        with pytest.raises(ConfigError):
            L.normalized_epitomic_forward(np.zeros((1, 1, 3, 3)), p)


class TestEmbed:
    def test_geometry(self):
        p = L.MaxPoolConvParams(np.ones((1, 1, 3, 3)), pool_size=2)
        e = L.embed_as_epitome(p)
        assert e.epitome_size == 5 and e.filter_size == 4
        assert e.displacement == 2 and e.input_stride == 2 and e.epitome_stride == 1

    def test_d1_unchanged(self):
        f = np.random.default_rng(0).standard_normal((2, 1, 3, 3))
        e = L.embed_as_epitome(L.MaxPoolConvParams(f, pool_size=1))
        assert np.array_equal(e.epitomes, f)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6), w=st.integers(1, 4), d=st.integers(1, 3),
           c=st.integers(1, 2), h=st.integers(6, 12), s=st.integers(1, 2))
    def test_forward_equivalence(self, seed, w, d, c, h, s):
        rng = np.random.default_rng(seed)
        p = L.MaxPoolConvParams(rng.standard_normal((2, c, w, w)).astype(np.float32),
                                pool_size=d, input_stride=s)
        x = rng.standard_normal((1, c, h, h)).astype(np.float32)
        try:
            ym, _ = L.maxpool_conv_forward(x, p)
        except DimensionError:
            return
        ye, _ = L.epitomic_conv_forward(x, L.embed_as_epitome(p))
        ye = ye[:, :, :ym.shape[2], :ym.shape[3]]
        assert ye.shape == ym.shape
        assert np.allclose(ym, ye, rtol=0, atol=1e-6)

    def test_double_precision(self):
        rng = np.random.default_rng(1)
        p = L.MaxPoolConvParams(rng.standard_normal((2, 2, 3, 3)), pool_size=2)
        x = rng.standard_normal((1, 2, 10, 10))
        ym, _ = L.maxpool_conv_forward(x, p)
        ye, _ = L.epitomic_conv_forward(x, L.embed_as_epitome(p))
        assert np.allclose(ym, ye[:, :, :ym.shape[2], :ym.shape[3]], rtol=0, atol=1e-12)

    def test_pool_stride_must_match(self):
        with pytest.raises(ConfigError):
            L.embed_as_epitome(L.MaxPoolConvParams(np.ones((1, 1, 2, 2)), pool_size=2,
                                                   pool_stride=1))


class TestCostParity:
    @pytest.mark.parametrize("w,d", [(3, 2), (5, 3), (8, 5)])
    def test_inner_products_per_output(self, w, d):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 3, 40, 40)).astype(np.float32)
        mp = L.MaxPoolConvParams(rng.standard_normal((4, 3, w, w)).astype(np.float32),
                                 pool_size=d)
        epi = ep_params(rng.standard_normal((4, 3, w + d - 1, w + d - 1)).astype(np.float32),
                        w, s_in=d)
        a, b = L.OpCounter(), L.OpCounter()
        L.maxpool_conv_forward(x, mp, a)
        L.epitomic_conv_forward(x, epi, b)
        assert a.per_output() == b.per_output() == d * d
        assert a.multiplies / a.inner_products == b.multiplies / b.inner_products


class TestPointwise:
    def test_relu_at_minus_beta(self):
        beta = np.array([0.5, -1.0])
        x = -beta.reshape(1, 2, 1, 1) * np.ones((1, 2, 2, 2))
        assert not L.relu_bias(x, beta).any()

    def test_relu_identity(self):
        x = np.abs(np.random.default_rng(0).standard_normal((2, 3, 2, 2)))
        assert np.array_equal(L.relu_bias(x, np.zeros(3)), x)

    def test_relu_scalar_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 2, 2))
        beta = rng.standard_normal(3)
        y = L.relu_bias(x, beta)
        for idx in np.ndindex(x.shape):
            assert y[idx] == max(x[idx] + beta[idx[1]], 0.0)

    def test_relu_zero_passes_nothing(self):
        y = np.array([[0.0, 1.0]])
        g, gb = L.relu_bias_backward(np.ones_like(y), y)
        assert g.tolist() == [[0.0, 1.0]] and gb.tolist() == [0.0, 1.0]

    def test_relu_bias_length(self):
        with pytest.raises(DimensionError):
            L.relu_bias(np.zeros((1, 3, 2, 2)), np.zeros(2))

    def test_lrn_zero(self):
        assert not L.lrn_forward(np.zeros((1, 4, 2, 2)))[0].any()

    def test_lrn_single_channel(self):
        y, _ = L.lrn_forward(np.ones((1, 1, 1, 1)))
        assert np.isclose(y.item(), 1 / (2 + 1e-4) ** 0.75, rtol=1e-15)

    def test_lrn_window_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 7, 2, 2)) * 10
        y, _ = L.lrn_forward(x)
        for k in range(7):
            lo, hi = max(0, k - 2), min(7, k + 3)
            ref = x[0, k] / (2 + 1e-4 * np.sum(x[0, lo:hi] ** 2, axis=0)) ** 0.75
            assert np.allclose(y[0, k], ref, rtol=1e-14)

    def test_dropout_rate_zero(self):
        x = np.ones((3, 4))
        assert np.array_equal(L.dropout(x, 0.0, mode="train")[0], x)
        assert np.array_equal(L.dropout(x, 0.0, mode="eval")[0], x)

    def test_dropout_eval_identity(self):
        x = np.ones((3, 4))
        assert L.dropout(x, 0.9, mode="eval")[0] is x

    def test_dropout_statistics(self):
        x = np.ones(100_000, np.float32)
        y, mask = L.dropout(x, 0.5, rng_seed=3, layer_id=1, step=7)
        assert abs(mask.mean() - 0.5) < 0.01
        assert abs(y.mean() - 1.0) < 0.02

    def test_dropout_mask_pure(self):
        a = L.dropout_mask((50,), 0.5, 1, 2, 3)
        assert np.array_equal(a, L.dropout_mask((50,), 0.5, 1, 2, 3))
        assert not np.array_equal(a, L.dropout_mask((50,), 0.5, 1, 2, 4))

    def test_dropout_bad_rate(self):
        with pytest.raises(ConfigError):
            L.dropout(np.ones(3), 1.0)

    def test_xent_uniform(self):
        loss, _ = L.softmax_xent(np.zeros(10), 3)
        assert np.isclose(loss, np.log(10))

    def test_xent_dominant(self):
        s = np.zeros(5)
        s[2] = 1e4
        loss, grad = L.softmax_xent(s, 2)
        assert loss == 0.0 and np.allclose(grad, 0)

    def test_xent_gradient_closed_form(self):
        s = np.array([[1.0, 2.0, 0.5]])
        _, g = L.softmax_xent(s, [1])
        p = np.exp(s) / np.exp(s).sum()
        p[0, 1] -= 1
        assert np.allclose(g, p)

    def test_xent_label_range(self):
        with pytest.raises(DimensionError):
            L.softmax_xent(np.zeros(3), 3)

    def test_fc_affine(self):
        x = np.array([[1.0, 2.0]])
        w = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, -1.0]])
        assert L.fully_connected(x, w, np.array([0.0, 1.0, 2.0])).tolist() == [[1.0, 4.0, 0.0]]


class TestLayerObjects:
    @pytest.mark.parametrize("layer,shape", [
        (L.EpitomicConv(2, 3, 3, 5, input_stride=2), (1, 2, 9, 9)),
        (L.MaxPoolConv(2, 3, 3, 2), (1, 2, 9, 9)),
        (L.Conv(2, 3, (2, 3), stride=2), (1, 2, 9, 9)),
        (L.FullyConnected((2, 3, 3), 4), (1, 2, 3, 3)),
    ])
    def test_output_shape_matches_forward(self, layer, shape):
        x = np.zeros(shape, np.float32)
        assert layer.forward(x).shape[1:] == layer.output_shape(shape[1:])

    def test_layer_from_config_round_trip(self):
        layer = L.EpitomicConv(2, 3, 3, 5, 2, 1, True, 0.02)
        again = L.layer_from_config(layer.kind, layer.config())
        assert again.config() == layer.config()

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            L.layer_from_config("maxout", {})
