"""GCMB, gated MLP, FoPE/RoPE rotation, and the attention layer."""

import numpy as np
import pytest

from wisteria import tensor as T
from wisteria.blocks import (attention, dilation_schedule, fope_response, gated_mlp,
                             gcmb_block, init_attention, init_fope, init_gated_mlp,
                             init_gcmb, receptive_span, rope_frequencies, rope_response)
from wisteria.errors import ConfigError
from wisteria.tensor import Tensor, grad_check


def rng_for(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


# ---------------------------------------------------------------------------
# dilation schedule


def test_dilation_schedule_paper_values():
    assert dilation_schedule(3, 5) == [1, 1, 3, 9, 27]
    assert dilation_schedule(1, 6) == [1, 1, 1, 1, 1, 1]
    assert dilation_schedule(3, 8) == [1, 1, 3, 9, 27, 81, 243, 729]
    assert dilation_schedule(2, 3) == [1, 1, 2]


def test_dilation_schedule_validates():
    with pytest.raises(ConfigError):
        dilation_schedule(0, 5)
    with pytest.raises(ConfigError):
        dilation_schedule(3, 0)


def test_receptive_span_formula():
    assert receptive_span(9, 27) == 1 + 8 * 27
    assert receptive_span(1, 1) == 1


# ---------------------------------------------------------------------------
# gated MLP


def test_gated_mlp_zero_weights_is_identity():
    p = init_gated_mlp(rng_for(1), dim=4, hidden=8)
    for t in (p.w1, p.b1, p.w2, p.b2):
        t.data[...] = 0.0
    y = Tensor(rng_for(2).standard_normal((5, 4)))
    assert np.array_equal(gated_mlp(y, p).data, y.data)


def test_gated_mlp_closed_gate_leaves_residual_plus_bias():
    rng = rng_for(3)
    p = init_gated_mlp(rng, dim=4, hidden=8)
    # second half of b1 feeds the sigmoid gate; drive it hard negative
    p.w1.data[...] = 0.0
    p.b1.data[8:] = -1e4
    y = Tensor(rng.standard_normal((5, 4)))
    out = gated_mlp(y, p).data
    assert np.allclose(out, y.data + p.b2.data, atol=1e-12)


def test_gated_mlp_gradients():
    rng = rng_for(4)
    p = init_gated_mlp(rng, dim=4, hidden=8)
    y = Tensor(rng.standard_normal((4, 4)))
    assert grad_check(lambda t: gated_mlp(t, p), y) < 1e-4
    assert grad_check(lambda w: gated_mlp(y, type(p)(w, p.b1, p.w2, p.b2)), p.w1) < 1e-4
    assert grad_check(lambda w: gated_mlp(y, type(p)(p.w1, p.b1, w, p.b2)), p.w2) < 1e-4


def test_gated_mlp_has_no_normalization():
    # scaling the input by c scales (out - residual-and-bias response) nonlinearly,
    # but a layernormed block would be scale-invariant; check it is not
    rng = rng_for(5)
    p = init_gated_mlp(rng, dim=4, hidden=8)
    y = rng.standard_normal((3, 4))
    a = gated_mlp(Tensor(y), p).data
    b = gated_mlp(Tensor(10.0 * y), p).data
    assert not np.allclose(b, 10.0 * a, atol=1e-6)
    assert not np.allclose(b - 10.0 * y, a - y, atol=1e-6)


# ---------------------------------------------------------------------------
# GCMB block


def test_gcmb_gate_closed_ignores_feature_conv():
    rng = rng_for(6)
    p = init_gcmb(rng, dim=4, kernel=3, dil_a=1, dil_b=1)
    p.conv_b_b.data[...] = -1e4  # sigmoid gate saturated closed
    x = Tensor(rng.standard_normal((6, 4)))
    base = gcmb_block(x, p).data
    p.conv_a_w.data[...] = rng.standard_normal(p.conv_a_w.data.shape)
    p.conv_a_b.data[...] = rng.standard_normal(p.conv_a_b.data.shape)
    perturbed = gcmb_block(x, p).data
    assert np.max(np.abs(base - perturbed)) < 1e-12


def test_gcmb_rejects_even_kernel():
    with pytest.raises(ConfigError):
        init_gcmb(rng_for(7), dim=4, kernel=4, dil_a=1, dil_b=1)


def test_gcmb_conv_gradients_flow():
    rng = rng_for(8)
    p = init_gcmb(rng, dim=4, kernel=3, dil_a=2, dil_b=1)
    x = Tensor(rng.standard_normal((8, 4)))
    assert grad_check(lambda t: gcmb_block(t, p), x) < 1e-4
    for name in ("conv_a_w", "conv_b_w"):
        w = getattr(p, name)

        def f(t, name=name):
            saved = getattr(p, name)
            setattr(p, name, t)
            try:
                return gcmb_block(x, p)
            finally:
                setattr(p, name, saved)

        assert grad_check(f, w) < 1e-4, name


# ---------------------------------------------------------------------------
# FoPE / RoPE


def test_rope_frequency_spectrum():
    freqs = rope_frequencies(8, theta=10000.0)
    assert freqs.shape == (4,)
    assert np.allclose(freqs, 10000.0 ** (-2 * np.arange(4) / 8))
    with pytest.raises(ConfigError):
        rope_frequencies(7)


def test_fope_with_zero_coeffs_and_zero_cutoff_matches_rope():
    rng = rng_for(9)
    p = init_fope(rng, d_head=8, n_train=0, n_harmonics=4, theta=100.0)
    p.coeffs.data[...] = 0.0
    pos = np.arange(32)
    fr_fope, fi_fope = fope_response(p, pos)
    fr_rope, fi_rope = rope_response(p.freqs, pos)
    assert np.max(np.abs(fr_fope.data - fr_rope.data)) < 1e-12
    assert np.max(np.abs(fi_fope.data - fi_rope.data)) < 1e-12


def test_fope_cutoff_passes_low_frequencies_through():
    rng = rng_for(10)
    # N_train=64 -> cutoff 2pi/64 ~ 0.0982; theta=10000, d_head=8 keeps
    # frequencies {1, 0.1, 0.01, 0.001}: the last two fall below the cutoff
    p = init_fope(rng, d_head=8, n_train=64, n_harmonics=2, theta=10000.0)
    assert p.cutoff == pytest.approx(2 * np.pi / 64)
    assert list(p.active) == [True, True, False, False]
    pos = np.arange(50)
    fr, fi = fope_response(p, pos)
    assert np.array_equal(fr.data[:, 2:], np.ones((50, 2)))
    assert np.array_equal(fi.data[:, 2:], np.zeros((50, 2)))


def test_fope_position_zero_with_zero_coeffs_is_identity():
    rng = rng_for(11)
    p = init_fope(rng, d_head=8, n_train=0, n_harmonics=3, theta=500.0)
    p.coeffs.data[...] = 0.0
    fr, fi = fope_response(p, np.array([0]))
    assert np.allclose(fr.data, 1.0) and np.allclose(fi.data, 0.0)


def test_rope_logits_depend_only_on_relative_position():
    rng = rng_for(12)
    d_head = 8
    q = rng.standard_normal(d_head)
    k = rng.standard_normal(d_head)
    freqs = rope_frequencies(d_head, theta=1000.0)

    def rotate(vec, n):
        fr, fi = rope_response(freqs, np.array([n]))
        out = np.empty(d_head)
        out[0::2] = vec[0::2] * fr.data[0] - vec[1::2] * fi.data[0]
        out[1::2] = vec[0::2] * fi.data[0] + vec[1::2] * fr.data[0]
        return out

    pairs = rng.integers(0, 200, size=(20, 2))
    base = {}
    for n, m in pairs:
        logit = float(np.dot(rotate(q, n), rotate(k, m)))
        delta = int(n - m)
        if delta in base:
            assert abs(logit - base[delta]) < 1e-9
        base[delta] = logit
    # shifting both positions by a constant leaves the logit unchanged
    for n, m in pairs:
        l0 = float(np.dot(rotate(q, int(n)), rotate(k, int(m))))
        l1 = float(np.dot(rotate(q, int(n) + 17), rotate(k, int(m) + 17)))
        assert abs(l0 - l1) < 1e-9


# ---------------------------------------------------------------------------
# attention


def test_attention_length_one_softmax_is_identity_weight():
    rng = rng_for(13)
    p = init_attention(rng, dim=8, heads=2, mode="fope", n_train=16)
    x = Tensor(rng.standard_normal((1, 8)))
    out = attention(x, p).data
    v = x.data @ p.wv.data
    expect = v @ p.wo.data
    assert np.allclose(out, expect, atol=1e-12)


def test_attention_zero_qk_is_uniform_averaging():
    rng = rng_for(14)
    p = init_attention(rng, dim=8, heads=2, mode="rope", n_train=16)
    p.wq.data[...] = 0.0
    p.wk.data[...] = 0.0
    x = Tensor(rng.standard_normal((6, 8)))
    out = attention(x, p).data
    v = x.data @ p.wv.data
    expect = np.repeat(v.mean(axis=0, keepdims=True), 6, axis=0) @ p.wo.data
    assert np.max(np.abs(out - expect)) < 1e-12


def test_attention_masks_padding_keys():
    rng = rng_for(15)
    p = init_attention(rng, dim=8, heads=2, mode="none", n_train=16)
    x = rng.standard_normal((1, 5, 8))
    xpad = np.concatenate([x, np.zeros((1, 3, 8))], axis=1)
    mask = np.zeros((1, 8), dtype=bool)
    mask[0, :5] = True
    base = attention(Tensor(x), p, np.ones((1, 5), dtype=bool)).data
    padded = attention(Tensor(xpad), p, mask).data
    assert np.max(np.abs(padded[0, :5] - base[0])) < 1e-9


def test_attention_gradients_all_modes():
    rng = rng_for(16)
    x = Tensor(rng.standard_normal((5, 8)))
    for mode in ("fope", "rope", "none"):
        p = init_attention(rng_for(17), dim=8, heads=2, mode=mode, n_train=8)
        assert grad_check(lambda t: attention(t, p), x) < 1e-4, mode


def test_attention_fope_coeff_gradients():
    rng = rng_for(18)
    p = init_attention(rng, dim=8, heads=2, mode="fope", n_train=8)
    x = Tensor(rng.standard_normal((5, 8)))

    def f(c):
        saved = p.fope.coeffs
        p.fope.coeffs = c
        try:
            return attention(x, p)
        finally:
            p.fope.coeffs = saved

    assert grad_check(f, p.fope.coeffs) < 1e-4
