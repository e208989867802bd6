"""Selective scan op, the mamba stream, and the BiMamba wrapper."""

import numpy as np
import pytest

from wisteria import tensor as T
from wisteria.errors import NumericError
from wisteria.ssm import bimamba, init_bimamba, init_ssm, mamba_stream, selective_scan
from wisteria.tensor import Tape, Tensor, grad_check


def rng_for(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def scan_inputs(rng, length, dim, state, batch=None):
    shape = (length, dim) if batch is None else (batch, length, dim)
    nshape = (length, state) if batch is None else (batch, length, state)
    return (
        Tensor(rng.standard_normal(shape)),
        Tensor(rng.uniform(0.01, 0.2, size=shape)),
        Tensor(-rng.uniform(0.3, 3.0, size=(dim, state))),
        Tensor(rng.standard_normal(nshape)),
        Tensor(rng.standard_normal(nshape)),
        Tensor(rng.standard_normal(dim)),
    )


def test_selective_scan_accepts_unbatched_and_batched():
    rng = rng_for(1)
    x, dt, a, b, c, dskip = scan_inputs(rng, 6, 3, 4)
    y = selective_scan(x, dt, a, b, c, dskip)
    assert y.data.shape == (6, 3)
    xb, dtb, ab, bb, cb, db = scan_inputs(rng, 6, 3, 4, batch=2)
    yb = selective_scan(xb, dtb, ab, bb, cb, db)
    assert yb.data.shape == (2, 6, 3)


def test_selective_scan_overflow_names_step():
    length = 5
    x = Tensor(np.full((length, 1), 1e308))
    dt = Tensor(np.ones((length, 1)))
    a = Tensor(np.array([[1e-9]]))  # decay ~1, inputs ~1e308 each step
    b = Tensor(np.full((length, 1), 1e8))
    c = Tensor(np.full((length, 1), 1e8))
    dskip = Tensor(np.zeros(1))
    with pytest.raises(NumericError) as err:
        selective_scan(x, dt, a, b, c, dskip)
    assert "step" in str(err.value)


def test_selective_scan_gradients_match_finite_differences():
    rng = rng_for(2)
    x, dt, a, b, c, dskip = scan_inputs(rng, 8, 2, 3)
    args = [x, dt, a, b, c, dskip]
    for i in range(len(args)):
        def f(t, i=i):
            cur = list(args)
            cur[i] = t
            return selective_scan(*cur)
        assert grad_check(f, args[i]) < 1e-4, f"arg {i}"


def test_mamba_stream_zero_input_zero_biases_gives_zero():
    rng = rng_for(3)
    p = init_ssm(rng, dim=4)
    x = Tensor(np.zeros((5, 4)))
    out = mamba_stream(x, p)
    assert np.allclose(out.data, 0.0, atol=1e-15)


def test_bimamba_flip_equivariance_tied_weights():
    rng = rng_for(4)
    p = init_bimamba(rng, dim=6, tie_weights=True)
    x = Tensor(rng.standard_normal((16, 6)))
    direct = bimamba(T.flip(x, -2), p).data
    flipped = np.flip(bimamba(x, p).data, axis=-2)
    assert np.max(np.abs(direct - flipped)) < 1e-10


def test_bimamba_length_one_is_mean_of_streams():
    rng = rng_for(5)
    p = init_bimamba(rng, dim=4)
    x = Tensor(rng.standard_normal((1, 4)))
    out = bimamba(x, p).data
    half = 0.5 * (mamba_stream(x, p.fwd).data + mamba_stream(x, p.bwd).data)
    assert np.allclose(out, half, atol=1e-14)


def test_stream_causality_directions():
    rng = rng_for(6)
    p = init_bimamba(rng, dim=3)
    x = rng.standard_normal((10, 3))
    xp = x.copy()
    xp[4] += 2.0
    fwd0 = mamba_stream(Tensor(x), p.fwd).data
    fwd1 = mamba_stream(Tensor(xp), p.fwd).data
    assert np.array_equal(fwd0[:4], fwd1[:4])
    bwd0 = np.flip(mamba_stream(T.flip(Tensor(x), -2), p.bwd).data, -2)
    bwd1 = np.flip(mamba_stream(T.flip(Tensor(xp), -2), p.bwd).data, -2)
    assert np.array_equal(bwd0[5:], bwd1[5:])


def test_mamba_stream_gradcheck_end_to_end():
    rng = rng_for(7)
    p = init_ssm(rng, dim=3)
    x = Tensor(rng.standard_normal((6, 3)))
    assert grad_check(lambda t: mamba_stream(t, p), x) < 1e-4
    assert grad_check(lambda w: mamba_stream(x, type(p)(**{**_fields(p), "log_a": w})),
                      p.log_a) < 1e-4


def _fields(p):
    from dataclasses import fields
    return {f.name: getattr(p, f.name) for f in fields(p)}


def test_bimamba_independent_weights_by_default_with_tie_switch():
    rng = rng_for(8)
    free = init_bimamba(rng, dim=4)
    assert not free.tied
    assert len(list(free.params())) == 2 * len(list(free.fwd.params()))
    tied = init_bimamba(rng_for(8), dim=4, tie_weights=True)
    assert tied.tied
    assert len(list(tied.params())) == len(list(tied.fwd.params()))


def test_mamba_stream_padding_invariance_with_mask():
    rng = rng_for(9)
    p = init_bimamba(rng, dim=4)
    x = rng.standard_normal((2, 6, 4))
    xpad = np.concatenate([x, rng.standard_normal((2, 3, 4))], axis=1)
    xpad_masked = xpad.copy()
    mask = np.zeros((2, 9), dtype=bool)
    mask[:, :6] = True
    xpad_masked[~mask] = 0.0
    base = bimamba(Tensor(x), p, np.ones((2, 6), dtype=bool)).data
    padded = bimamba(Tensor(xpad_masked), p, mask).data
    assert np.max(np.abs(padded[:, :6] - base)) < 1e-9
