"""Tape mechanics and the finite-difference oracle."""

import numpy as np
import pytest

from wisteria import tensor as T
from wisteria.errors import OracleError, ShapeError
from wisteria.tensor import Tape, Tensor, grad_check


def rng_for(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def test_backward_quadratic_hand_case():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.mul(w, w))
        tape.backward(loss)
    assert np.array_equal(w.grad, [2.0, 4.0])


def test_backward_requires_scalar_loss():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = T.mul(w, w)
        with pytest.raises(ShapeError):
            tape.backward(out)


def test_gradients_accumulate_across_backward_calls():
    w = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.mul(w, w))
        tape.backward(loss)
        tape.backward(loss)
    assert np.array_equal(w.grad, [12.0])


def test_matmul_gradient_of_sum_is_ones_times_bt():
    rng = rng_for(1)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.matmul(a, b))
        tape.backward(loss)
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_no_tape_records_nothing_and_skips_grads():
    w = Tensor(np.ones(2), requires_grad=True)
    out = T.mul(w, w)  # no active tape: plain evaluation
    assert out.data is not None and w.grad is None
    with Tape() as tape:
        with T.no_grad():
            T.mul(w, w)
        assert len(tape.nodes) == 0


def test_detached_tensor_gets_no_gradient():
    w = Tensor(np.ones(2), requires_grad=True)
    frozen = Tensor(w.data.copy(), requires_grad=False)
    with Tape() as tape:
        loss = T.tsum(T.mul(w, frozen))
        tape.backward(loss)
    assert w.grad is not None
    assert frozen.grad is None


def test_grad_check_identity_is_exact():
    x = Tensor(rng_for(2).standard_normal((3, 3)))
    assert grad_check(lambda t: t, x) < 1e-10


def test_grad_check_softmax_matmul_composition():
    rng = rng_for(3)
    w = Tensor(rng.standard_normal((3, 3)))
    x = Tensor(rng.standard_normal((3, 3)))
    err = grad_check(lambda t: T.softmax(T.matmul(t, w)), x)
    assert err < 1e-6


def test_grad_check_flags_wrong_backward_rule():
    def bad_tanh(t):
        def backward(g):
            return (g,)  # deliberately wrong: pretends d tanh/dx = 1
        return T.record_op(np.tanh(t.data), (t,), backward)

    x = Tensor(rng_for(4).standard_normal(6) + 2.0)
    assert grad_check(bad_tanh, x) > 1e-2


def test_grad_check_detects_nondeterministic_function():
    state = {"n": 0}

    def flaky(t):
        state["n"] += 1
        return T.scale(t, float(state["n"]))

    with pytest.raises(OracleError):
        grad_check(flaky, Tensor(np.ones(2)))


@pytest.mark.parametrize("name,fn,shape", [
    ("exp", T.exp, (5,)),
    ("sigmoid", T.sigmoid, (5,)),
    ("silu", T.silu, (5,)),
    ("gelu", T.gelu, (5,)),
    ("softplus", T.softplus, (5,)),
    ("softmax", T.softmax, (3, 4)),
    ("flip", lambda t: T.flip(t, -1), (3, 4)),
    ("tmean", T.tmean, (7,)),
])
def test_grad_check_elementwise_suite(name, fn, shape):
    x = Tensor(rng_for(hash(name) % 2**31).standard_normal(shape))
    assert grad_check(fn, x) < 1e-6, name


def test_grad_check_layernorm_full_backward():
    rng = rng_for(5)
    scale = Tensor(rng.standard_normal(6) + 1.0)
    shift = Tensor(rng.standard_normal(6))
    x = Tensor(rng.standard_normal((4, 6)))
    assert grad_check(lambda t: T.layernorm(t, scale, shift), x) < 1e-6
    assert grad_check(lambda s: T.layernorm(x, s, shift), scale) < 1e-6
    assert grad_check(lambda s: T.layernorm(x, scale, s), shift) < 1e-6


def test_grad_check_convolutions():
    rng = rng_for(6)
    x = Tensor(rng.standard_normal((10, 3)))
    k = Tensor(rng.standard_normal((3, 5)))
    assert grad_check(lambda t: T.depthwise_conv1d(t, k, dilation=2), x) < 1e-6
    assert grad_check(lambda t: T.depthwise_conv1d(x, t, dilation=2), k) < 1e-6
    kc = Tensor(rng.standard_normal((3, 4)))
    assert grad_check(lambda t: T.causal_conv1d(t, kc), x) < 1e-6
    assert grad_check(lambda t: T.causal_conv1d(x, t), kc) < 1e-6


def test_grad_check_masked_cross_entropy():
    rng = rng_for(7)
    targets = rng.integers(0, 7, size=(2, 5))
    mask = rng.random((2, 5)) < 0.6
    mask[0, 0] = True
    logits = Tensor(rng.standard_normal((2, 5, 7)))
    assert grad_check(lambda t: T.masked_cross_entropy(t, targets, mask), logits) < 1e-6
