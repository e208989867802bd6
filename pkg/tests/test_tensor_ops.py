"""Forward semantics of the tensor op suite."""

import numpy as np
import pytest
from scipy.special import erf, expit

from wisteria import tensor as T
from wisteria.errors import DataError, ShapeError
from wisteria.tensor import Tensor


def rng_for(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def test_matmul_identity_and_hand_cases():
    eye = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    v = Tensor(np.array([[3.0], [4.0]]))
    assert np.array_equal(T.matmul(eye, v).data, [[3.0], [4.0]])
    row = Tensor(np.array([[1.0, 2.0]]))
    assert np.array_equal(T.matmul(row, v).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError) as err:
        T.matmul(a, b)
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_elementwise_analytic_values():
    z = Tensor(np.zeros(3))
    assert np.allclose(T.sigmoid(z).data, 0.5)
    assert np.allclose(T.silu(z).data, 0.0)
    assert np.allclose(T.softmax(Tensor(np.zeros((1, 3)))).data, 1.0 / 3.0)
    x = rng_for(1).standard_normal(17)
    assert np.allclose(T.gelu(Tensor(x)).data, x * 0.5 * (1 + erf(x / np.sqrt(2))))
    assert np.allclose(T.sigmoid(Tensor(x)).data, expit(x))
    assert np.allclose(T.softplus(Tensor(x)).data, np.logaddexp(0.0, x))


def test_flip_is_involution_and_split_concat_roundtrip():
    x = rng_for(2).standard_normal((4, 6))
    assert np.array_equal(T.flip(T.flip(Tensor(x), -2), -2).data, x)
    a, b = T.split_last(Tensor(x))
    assert np.array_equal(np.concatenate([a.data, b.data], axis=-1), x)
    with pytest.raises(ShapeError):
        T.split_last(Tensor(np.zeros((2, 5))))


def test_softmax_rows_sum_to_one():
    x = rng_for(3).standard_normal((5, 9)) * 30
    s = T.softmax(Tensor(x)).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(s >= 0)


def test_layernorm_normalizes_before_affine():
    x = rng_for(4).standard_normal((6, 8)) * 3 + 5
    out = T.layernorm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.max(np.abs(out.mean(axis=-1))) < 1e-9
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-6


def test_depthwise_conv_identity_and_hand_case():
    x = rng_for(5).standard_normal((7, 3))
    k1 = Tensor(np.ones((3, 1)))
    assert np.allclose(T.depthwise_conv1d(Tensor(x), k1, dilation=1).data, x)
    x3 = Tensor(np.array([[1.0], [2.0], [3.0]]))
    k3 = Tensor(np.ones((1, 3)))
    assert np.allclose(T.depthwise_conv1d(x3, k3, dilation=1).data[:, 0], [3.0, 6.0, 5.0])


def test_depthwise_conv_rejects_even_kernel():
    with pytest.raises(ShapeError):
        T.depthwise_conv1d(Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 4))), dilation=1)


def test_depthwise_conv_locality_span():
    # K=9 dilation=27 -> span 217, half-span 108
    rng = rng_for(6)
    x = rng.standard_normal((300, 2))
    k = Tensor(rng.standard_normal((2, 9)))
    base = T.depthwise_conv1d(Tensor(x), k, dilation=27).data
    xp = x.copy()
    xp[150] += 1.0
    out = T.depthwise_conv1d(Tensor(xp), k, dilation=27).data
    changed = np.where(np.any(out != base, axis=1))[0]
    assert changed.size > 0
    assert changed.min() >= 150 - 108 and changed.max() <= 150 + 108


def test_causal_conv_never_reads_the_future():
    rng = rng_for(7)
    x = rng.standard_normal((20, 3))
    k = Tensor(rng.standard_normal((3, 4)))
    base = T.causal_conv1d(Tensor(x), k).data
    xp = x.copy()
    xp[10] += 5.0
    out = T.causal_conv1d(Tensor(xp), k).data
    assert np.array_equal(base[:10], out[:10])
    assert not np.allclose(base[10:14], out[10:14])
    assert np.array_equal(base[14:], out[14:])


def test_embedding_rejects_out_of_range_ids():
    table = Tensor(rng_for(8).standard_normal((7, 4)))
    with pytest.raises(DataError):
        T.embedding(table, np.array([[0, 7]]))


def test_masked_cross_entropy_uniform_is_log_vocab():
    logits = Tensor(np.zeros((2, 5, 7)))
    targets = np.ones((2, 5), dtype=np.int64)
    mask = np.ones((2, 5), dtype=bool)
    loss = T.masked_cross_entropy(logits, targets, mask)
    assert abs(float(loss.data) - np.log(7)) < 1e-12


def test_masked_cross_entropy_single_position_reduction():
    rng = rng_for(9)
    logits = rng.standard_normal((1, 4, 7))
    targets = rng.integers(0, 7, size=(1, 4))
    mask = np.zeros((1, 4), dtype=bool)
    mask[0, 2] = True
    loss = T.masked_cross_entropy(Tensor(logits), targets, mask)
    row = logits[0, 2]
    direct = np.log(np.exp(row - row.max()).sum()) + row.max() - row[targets[0, 2]]
    assert abs(float(loss.data) - direct) < 1e-12


def test_meter_tracks_live_tensor_bytes():
    T.meter.reset_peak()
    before = T.meter.current
    keep = Tensor(np.zeros(1024))
    assert T.meter.current - before == 1024 * 8
    del keep
    assert T.meter.current == before
