import math

import numpy as np
import pytest

from lagattn.attention import (
    CabParams,
    HeadSpec,
    MixtureWeights,
    correlated_attention,
    correlated_attention_bwd,
    correlated_attention_fwd,
    destationary_attention,
    destationary_attention_fwd,
    mixture_of_head,
    self_attention,
    self_attention_fwd,
)
from lagattn.numerics import (
    DegenerateSeriesError,
    Param,
    ParameterError,
    ShapeError,
    check_gradient,
    l2_normalize_cols,
    softmax_cols,
    zero_grads,
)


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def reference_self_attention(q, k, v):
    """Direct two-loop softmax-then-average reference."""
    t, dk = q.shape
    out = np.zeros((t, v.shape[1]))
    for i in range(t):
        scores = np.array([q[i] @ k[j] / math.sqrt(dk) for j in range(t)])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        for j in range(t):
            out[i] += w[j] * v[j]
    return out


class TestSelfAttention:
    def test_t1_returns_v(self):
        v = rand((1, 3), 1)
        assert np.array_equal(self_attention(rand((1, 2), 0), rand((1, 2), 2), v), v)

    def test_orthogonal_q_gives_uniform_average(self):
        k = rand((4, 3), 3)
        q = np.zeros((4, 3))
        v = rand((4, 2), 4)
        out = self_attention(q, k, v)
        assert np.allclose(out, np.tile(v.mean(axis=0), (4, 1)), atol=1e-12)

    def test_matches_reference(self):
        q, k, v = rand((5, 3), 5), rand((5, 3), 6), rand((5, 3), 7)
        assert np.allclose(self_attention(q, k, v),
                           reference_self_attention(q, k, v), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            self_attention(rand((5, 3)), rand((4, 3)), rand((5, 3)))


class TestDestationaryAttention:
    def test_degenerates_to_self_attention(self):
        q, k, v = rand((6, 3), 8), rand((6, 3), 9), rand((6, 3), 10)
        out = destationary_attention(q, k, v, 1.0, np.zeros(6))
        assert np.allclose(out, self_attention(q, k, v), atol=1e-14)

    def test_constant_delta_shift_invariance(self):
        q, k, v = rand((5, 2), 11), rand((5, 2), 12), rand((5, 2), 13)
        base = destationary_attention(q, k, v, 2.0, np.zeros(5))
        shifted = destationary_attention(q, k, v, 2.0, 3.7 * np.ones(5))
        assert np.allclose(base, shifted, atol=1e-12)

    def test_matches_direct_formula(self):
        q, k, v = rand((4, 3), 14), rand((4, 3), 15), rand((4, 3), 16)
        delta = rand((4,), 17)
        xi = 2.0
        scores = (xi * q @ k.T + delta[None, :]) / math.sqrt(3)
        attn = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn /= attn.sum(axis=1, keepdims=True)
        assert np.allclose(destationary_attention(q, k, v, xi, delta),
                           attn @ v, atol=1e-12)

    def test_nonpositive_xi(self):
        with pytest.raises(ParameterError):
            destationary_attention(rand((3, 2)), rand((3, 2)), rand((3, 2)),
                                   0.0, np.zeros(3))


class TestCorrelatedAttention:
    def test_beta_zero_instantaneous_only(self):
        q, k, v = rand((10, 4), 18), rand((10, 4), 19), rand((10, 4), 20)
        cab = CabParams(beta_raw=0.0, filtering_enabled=False)
        out = correlated_attention(q, k, v, cab)
        qh, kh = l2_normalize_cols(q), l2_normalize_cols(k)
        expect = v @ softmax_cols(kh.T @ qh, cab.tau)
        assert np.array_equal(out, expect)

    def test_dk1_beta0_returns_v(self):
        q, k, v = rand((7, 1), 21), rand((7, 1), 22), rand((7, 1), 23)
        cab = CabParams(filtering_enabled=False)
        assert np.allclose(correlated_attention(q, k, v, cab), v, atol=1e-15)

    def test_fft_and_naive_paths_identical(self):
        q, k, v = rand((16, 4), 24), rand((16, 4), 25), rand((16, 4), 26)
        out_f = correlated_attention(q, k, v, CabParams(use_fft=True))
        out_n = correlated_attention(q, k, v, CabParams(use_fft=False))
        assert np.abs(out_f - out_n).max() < 1e-9

    def test_output_in_value_range_single_lag(self):
        # with one selected lag the aggregation is a convex combination over
        # rolled-V columns, so the output stays inside V's entry range
        q, k = rand((2, 3), 27), rand((2, 3), 28)
        v = np.random.default_rng(29).uniform(-2.0, 5.0, size=(2, 3))
        out = correlated_attention(q, k, v, CabParams(beta_raw=1.3))
        assert out.min() >= -2.0 - 1e-12 and out.max() <= 5.0 + 1e-12

    def test_output_range_scales_with_lag_count(self):
        # the lagged part sums k column-stochastic mixes, so the bound is
        # (1 - beta) + beta * k times V's range
        q, k = rand((12, 3), 27), rand((12, 3), 28)
        v = np.random.default_rng(29).uniform(-2.0, 5.0, size=(12, 3))
        cab = CabParams(beta_raw=1.3)
        out, cache = correlated_attention_fwd(q, k, v, cab)
        kk = len(cache[12])
        bound = (1.0 - cab.beta) + cab.beta * kk
        assert out.min() >= -2.0 * bound - 1e-12
        assert out.max() <= 5.0 * bound + 1e-12
        # and each individual term is itself inside the range
        for (_, _, _, term) in cache[12]:
            assert term.min() >= -2.0 - 1e-12 and term.max() <= 5.0 + 1e-12

    def test_beta_endpoint_interpolation(self):
        q, k, v = rand((9, 3), 30), rand((9, 3), 31), rand((9, 3), 32)
        big = 50.0  # sigmoid(+-50) is 1.0 / 0.0 in float64
        inst = correlated_attention(q, k, v, CabParams(beta_raw=-big))
        qh, kh = l2_normalize_cols(q), l2_normalize_cols(k)
        assert np.allclose(inst, v @ softmax_cols(kh.T @ qh, 1.0), atol=1e-15)
        lagged = correlated_attention(q, k, v, CabParams(beta_raw=big))
        out_mid, cache = correlated_attention_fwd(q, k, v, CabParams(beta_raw=0.0))
        lag_terms = cache[12]
        assert np.allclose(lagged, sum(term for (_, _, _, term) in lag_terms),
                           atol=1e-12)

    def test_temperature_sharpens_argmax(self):
        a = rand((5, 5), 33)
        hot = softmax_cols(a, 1.0)
        cold = softmax_cols(a, 0.25)
        idx = a.argmax(axis=0)
        for j in range(5):
            assert cold[idx[j], j] > hot[idx[j], j]

    def test_selection_scale_invariance(self):
        q, k, v = rand((20, 4), 34), rand((20, 4), 35), rand((20, 4), 36)
        out1, cache1 = correlated_attention_fwd(q, k, v, CabParams())
        out2, cache2 = correlated_attention_fwd(7.5 * q, 7.5 * k, v, CabParams())
        assert cache1[17].lags == cache2[17].lags
        assert np.allclose(out1, out2, atol=1e-12)

    def test_degenerate_length(self):
        with pytest.raises(DegenerateSeriesError):
            correlated_attention(rand((1, 2)), rand((1, 2)), rand((1, 2)),
                                 CabParams())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            correlated_attention(rand((8, 2)), rand((8, 2)), rand((8, 3)),
                                 CabParams())


class TestCorrelatedAttentionGradients:
    def _check(self, cab_kwargs, names=("q", "k", "v", "beta_raw", "tau_raw")):
        rng = np.random.default_rng(37)
        params = {n: Param(n, rng.normal(size=(8, 4))) for n in ("q", "k", "v")}
        params["beta_raw"] = Param("beta_raw", 0.4)
        params["tau_raw"] = Param("tau_raw", 0.55)
        params["lambda_raw"] = Param("lambda_raw", 0.2)
        w = rng.normal(size=(4, 2))
        checked = {n: params[n] for n in names}

        def f(ps):
            zero_grads(ps)
            cab = CabParams(beta_raw=float(params["beta_raw"].value),
                            tau_raw=float(params["tau_raw"].value),
                            lambda_raw=float(params["lambda_raw"].value),
                            **cab_kwargs)
            out, cache = correlated_attention_fwd(
                params["q"].value, params["k"].value, params["v"].value, cab)
            loss = float(((out @ w) ** 2).sum())
            g = 2.0 * (out @ w) @ w.T
            dq, dk, dv, db, dt, dl = correlated_attention_bwd(cache, g)
            for n, d in zip(("q", "k", "v", "beta_raw", "tau_raw", "lambda_raw"),
                            (dq, dk, dv, db, dt, dl)):
                params[n].grad += d
            return loss

        report = check_gradient(f, checked, step=1e-5, tolerance=1e-4)
        assert report.passed, [(e.name, e.max_rel_err) for e in report.failures()]

    def test_default_mode(self):
        self._check({"c": 1})

    def test_filtering_disabled(self):
        self._check({"filtering_enabled": False}, names=("q", "k", "v", "tau_raw"))

    def test_lambda_soft_score_mode(self):
        # scores are frozen w.r.t. q/k, so only the scalars are checked here
        self._check({"c": 2, "lambda_mode": "learnable"},
                    names=("beta_raw", "tau_raw", "lambda_raw"))


class TestMixtureOfHead:
    def _heads(self, n, d_model, d_k, kind="self", seed=40, cab=None):
        rng = np.random.default_rng(seed)
        return [HeadSpec(kind=kind,
                         w_q=rng.normal(size=(d_model, d_k)),
                         w_k=rng.normal(size=(d_model, d_k)),
                         w_v=rng.normal(size=(d_model, d_k)),
                         cab=cab)
                for _ in range(n)]

    def test_m_equals_h_is_multihead_attention(self):
        x = rand((10, 6), 41)
        heads = self._heads(3, 6, 2)
        w_o = rand((6, 6), 42)
        mix = MixtureWeights(heads=heads, w_o=w_o)
        out = mixture_of_head(x, mix)
        ref = np.concatenate(
            [self_attention(x @ h.w_q, x @ h.w_k, x @ h.w_v) for h in heads],
            axis=1) @ w_o
        assert np.array_equal(out, ref)

    def test_even_temporal_correlated_split(self):
        x = rand((8, 4), 43)
        heads = (self._heads(8, 4, 2, "self", 44)
                 + self._heads(8, 4, 2, "correlated", 45, cab=CabParams()))
        mix = MixtureWeights(heads=heads, w_o=rand((32, 4), 46))
        out = mixture_of_head(x, mix)
        assert out.shape == (8, 4)

    @pytest.mark.parametrize("m", [0, 1, 2])
    def test_output_shape_any_split(self, m):
        x = rand((6, 5), 47)
        heads = (self._heads(m, 5, 3, "self", 48)
                 + self._heads(2 - m, 5, 3, "correlated", 49, cab=CabParams()))
        mix = MixtureWeights(heads=heads, w_o=rand((6, 5), 50))
        assert mixture_of_head(x, mix).shape == (6, 5)

    def test_correlated_head_without_cab_params(self):
        x = rand((6, 4), 51)
        heads = self._heads(1, 4, 2, "correlated", 52, cab=None)
        with pytest.raises(ParameterError):
            mixture_of_head(x, MixtureWeights(heads=heads, w_o=rand((2, 4), 53)))

    def test_bad_w_o_shape(self):
        x = rand((6, 4), 54)
        heads = self._heads(2, 4, 2, "self", 55)
        with pytest.raises(ShapeError):
            mixture_of_head(x, MixtureWeights(heads=heads, w_o=rand((3, 4), 56)))
