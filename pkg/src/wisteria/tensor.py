"""Dense float64 tensors with tape-based reverse-mode autodiff.

Design: a `Tape` records (output, inputs, backward_fn) triples in execution
order; `Tape.backward` walks them in exact reverse order and accumulates
gradients with +=. No active tape means inference mode: ops run but nothing
is recorded. Tapes nest per thread via a thread-local stack.

All Tensor data is float64. Integer payloads (token ids, masks) travel as
plain numpy arrays, never as Tensors.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import DataError, NumericError, OracleError, ShapeError, TrainingError

__all__ = [
    "Tensor", "Tape", "no_grad", "current_tape", "record_op", "meter",
    "add", "sub", "mul", "scale", "neg", "matmul", "exp", "sigmoid", "silu",
    "gelu", "softplus", "softmax", "layernorm", "depthwise_conv1d",
    "causal_conv1d", "embedding", "flip", "reshape", "transpose",
    "slice_last", "split_last", "tsum", "tmean", "masked_cross_entropy",
    "assert_finite", "grad_check",
]


# ---------------------------------------------------------------------------
# allocation accounting


class AllocationMeter:
    """Tracks logical bytes held by live Tensors (current and peak)."""

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0

    def _acquire(self, nbytes: int) -> None:
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current

    def _release(self, nbytes: int) -> None:
        self.current -= nbytes

    def reset_peak(self) -> None:
        self.peak = self.current


meter = AllocationMeter()


# ---------------------------------------------------------------------------
# tape machinery

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording even if a tape is active."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """A float64 array plus grad bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        meter._acquire(arr.nbytes)
        weakref.finalize(self, meter._release, arr.nbytes)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars fold into dedicated ops so the tape only ever
    # holds Tensor inputs
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered op record; context manager pushes onto the thread-local stack."""

    def __init__(self) -> None:
        self._nodes: list = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Reverse sweep from a scalar loss; leaf grads accumulate with +=.

        Repeated calls without zeroing grads keep accumulating, which is the
        contract gradient-accumulation code relies on.
        """
        if loss.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        produced = {id(node[0]) for node in self._nodes}
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
        pending: dict[int, np.ndarray] = {}

        def feed(t: Tensor, g: np.ndarray) -> None:
            if id(t) in produced:
                cur = pending.get(id(t))
                # first write keeps the (fresh) array; later writes mutate it
                pending[id(t)] = g if cur is None else np.add(cur, g, out=cur)
            elif t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g

        feed(loss, seed)
        for out, inputs, backward_fn in reversed(self._nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gt in zip(inputs, backward_fn(g)):
                if gt is not None:
                    feed(t, gt)


def record_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap op output in a Tensor and record it if a tape is live.

    `backward(g)` must return one gradient array (or None) per input, as
    fresh arrays safe for in-place accumulation. Public so higher modules can
    register their own primitives (the scan kernel and rotary maps do).
    """
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, tuple(inputs), backward))
    return out


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g.reshape(shape))


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    needs = (a.requires_grad, b.requires_grad)

    def backward(g):
        return (
            _sum_to(g, a.data.shape) if needs[0] else None,
            _sum_to(g, b.data.shape) if needs[1] else None,
        )

    return record_op(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    needs = (a.requires_grad, b.requires_grad)

    def backward(g):
        return (
            _sum_to(g, a.data.shape) if needs[0] else None,
            _sum_to(-g, b.data.shape) if needs[1] else None,
        )

    return record_op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    needs = (a.requires_grad, b.requires_grad)

    def backward(g):
        return (
            _sum_to(g * bd, ad.shape) if needs[0] else None,
            _sum_to(g * ad, bd.shape) if needs[1] else None,
        )

    return record_op(ad * bd, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        return (g * s,)

    return record_op(a.data * s, (a,), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return record_op(-a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shapes incompatible: {ad.shape} @ {bd.shape}")
    needs = (a.requires_grad, b.requires_grad)

    def backward(g):
        ga = gb = None
        if needs[0]:
            ga = _sum_to(g @ bd.swapaxes(-1, -2), ad.shape)
        if needs[1]:
            gb = _sum_to(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return record_op(ad @ bd, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return record_op(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return record_op(out, (a,), backward)


def silu(a: Tensor) -> Tensor:
    sig = expit(a.data)
    out = a.data * sig

    def backward(g):
        return (g * (sig + out * (1.0 - sig)),)

    return record_op(out, (a,), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GeLU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return record_op(x * cdf, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        return (g * expit(a.data),)

    return record_op(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record_op(out, (a,), backward)


def layernorm(a: Tensor, scale_t: Tensor, shift_t: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis; learnable per-feature scale and shift."""
    x = a.data
    d = x.shape[-1]
    if scale_t.data.shape != (d,) or shift_t.data.shape != (d,):
        raise ShapeError(
            f"layernorm scale/shift must be ({d},), got {scale_t.data.shape} and {shift_t.data.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale_t.data + shift_t.data
    needs = (a.requires_grad, scale_t.requires_grad, shift_t.requires_grad)

    def backward(g):
        gx = gscale = gshift = None
        if needs[0]:
            dxhat = g * scale_t.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        if needs[1]:
            gscale = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gshift = g.reshape(-1, d).sum(axis=0)
        return gx, gscale, gshift

    return record_op(out, (a, scale_t, shift_t), backward)


# ---------------------------------------------------------------------------
# depthwise convolutions over the length axis (axis -2), channels last


def _check_conv_shapes(x: np.ndarray, w: np.ndarray) -> tuple[int, int]:
    if w.ndim != 2:
        raise ShapeError(f"conv weight must be [channels, taps], got {w.shape}")
    if x.ndim < 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"conv channel mismatch: input {x.shape} vs weight {w.shape}")
    return w.shape[0], w.shape[1]


def depthwise_conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Same-padded depthwise conv; odd tap count required so output centers."""
    xd, wd = x.data, w.data
    _, k = _check_conv_shapes(xd, wd)
    if k % 2 != 1:
        raise ShapeError(f"same-padded conv needs an odd tap count, got {k}")
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    length = xd.shape[-2]
    pad = (k - 1) // 2 * dilation
    spec = [(0, 0)] * (xd.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(xd, spec)
    out = np.zeros_like(xd)
    for tap in range(k):
        out += xp[..., tap * dilation : tap * dilation + length, :] * wd[:, tap]
    needs = (x.requires_grad, w.requires_grad)

    def backward(g):
        gx = gw = None
        if needs[0]:
            gp = np.pad(g, spec)
            gx = np.zeros_like(xd)
            for tap in range(k):
                gx += gp[..., tap * dilation : tap * dilation + length, :] * wd[:, k - 1 - tap]
        if needs[1]:
            gw = np.empty_like(wd)
            for tap in range(k):
                sl = xp[..., tap * dilation : tap * dilation + length, :]
                gw[:, tap] = (sl * g).reshape(-1, wd.shape[0]).sum(axis=0)
        return gx, gw

    return record_op(out, (x, w), backward)


def causal_conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Left-padded depthwise conv; position t sees inputs t-(k-1)*dilation..t."""
    xd, wd = x.data, w.data
    _, k = _check_conv_shapes(xd, wd)
    length = xd.shape[-2]
    pad = (k - 1) * dilation
    spec = [(0, 0)] * (xd.ndim - 2) + [(pad, 0), (0, 0)]
    xp = np.pad(xd, spec)
    out = np.zeros_like(xd)
    for tap in range(k):
        out += xp[..., tap * dilation : tap * dilation + length, :] * wd[:, tap]
    needs = (x.requires_grad, w.requires_grad)

    def backward(g):
        gx = gw = None
        if needs[0]:
            rspec = [(0, 0)] * (xd.ndim - 2) + [(0, pad), (0, 0)]
            gp = np.pad(g, rspec)
            gx = np.zeros_like(xd)
            for tap in range(k):
                off = (k - 1 - tap) * dilation
                gx += gp[..., off : off + length, :] * wd[:, k - 1 - tap]
        if needs[1]:
            gw = np.empty_like(wd)
            for tap in range(k):
                sl = xp[..., tap * dilation : tap * dilation + length, :]
                gw[:, tap] = (sl * g).reshape(-1, wd.shape[0]).sum(axis=0)
        return gx, gw

    return record_op(out, (x, w), backward)


# ---------------------------------------------------------------------------
# structural ops


def embedding(w: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DataError(f"embedding ids must be integers, got dtype {ids.dtype}")
    vocab = w.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DataError(
            f"embedding id out of range: min {ids.min()}, max {ids.max()}, vocab {vocab}"
        )
    out = w.data[ids]

    def backward(g):
        gw = np.zeros_like(w.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, w.data.shape[1]))
        return (gw,)

    return record_op(out, (w,), backward)


def flip(a: Tensor, axis: int) -> Tensor:
    def backward(g):
        return (np.flip(g, axis=axis).copy(),)

    return record_op(np.flip(a.data, axis=axis).copy(), (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return record_op(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[..., start:stop].copy()

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[..., start:stop] = g
        return (gx,)

    return record_op(out, (a,), backward)


def split_last(a: Tensor) -> tuple[Tensor, Tensor]:
    """Split the last axis into two equal halves."""
    d = a.data.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"split_last needs an even last axis, got shape {a.data.shape}")
    h = d // 2
    return slice_last(a, 0, h), slice_last(a, h, d)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.data.shape).copy(),)

    return record_op(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# losses


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean token-level cross entropy over positions where mask is true.

    logits [..., V]; targets and mask match the leading shape. Raises on an
    empty mask: averaging over nothing is a training-step bug, not a zero.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    ld = logits.data
    if targets.shape != ld.shape[:-1] or mask.shape != ld.shape[:-1]:
        raise ShapeError(
            f"cross entropy shapes: logits {ld.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    count = int(mask.sum())
    if count == 0:
        raise TrainingError("cross entropy over an empty mask")
    m = ld.max(axis=-1, keepdims=True)
    z = ld - m
    ez = np.exp(z)
    sez = ez.sum(axis=-1)
    lse = np.log(sez) + m[..., 0]
    picked = np.take_along_axis(ld, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = float((nll * mask).sum() / count)

    def backward(g):
        gl = ez / sez[..., None]
        np.put_along_axis(
            gl, targets[..., None],
            np.take_along_axis(gl, targets[..., None], axis=-1) - 1.0, axis=-1,
        )
        gl *= (mask / count * g)[..., None]
        return (gl,)

    return record_op(np.float64(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# diagnostics


def assert_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite value in {where}")
    return t


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f maps a Tensor to a Tensor; outputs are reduced to a scalar through a
    fixed seeded weight vector so tensor-valued f (including ones whose plain
    sum has zero gradient, like softmax) still get a meaningful check. f is
    evaluated twice up front; any bitwise mismatch means f is not
    deterministic and the check would be meaningless, so that raises.
    """
    base = np.array(x.data, dtype=np.float64, copy=True)

    with no_grad():
        y1 = f(Tensor(base.copy())).data
        y2 = f(Tensor(base.copy())).data
    if y1.shape != y2.shape or not np.array_equal(y1, y2):
        raise OracleError("grad_check: f is not deterministic under double evaluation")

    wgt = np.random.default_rng(0xC0FFEE).standard_normal(y1.shape)
    wt = Tensor(wgt)

    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        s = tsum(mul(f(probe), wt))
        tape.backward(s)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy().reshape(-1)
            xp[i] += h
            sp = float((f(Tensor(xp.reshape(base.shape))).data * wgt).sum())
            xm = base.copy().reshape(-1)
            xm[i] -= h
            sm = float((f(Tensor(xm.reshape(base.shape))).data * wgt).sum())
            flat[i] = (sp - sm) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
