"""Selective state-space layers: the scan primitive, one Mamba stream, and
the bidirectional average.

Recurrence (ZOH discretization, diagonal A):

    h_t = exp(dt_t * A) . h_{t-1} + (dt_t * B_t) x_t
    y_t = <C_t, h_t> + D_skip * x_t

A is parameterized as -exp(log_a) so it stays strictly negative; dt goes
through softplus so it stays positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfinv

from . import kernels
from . import tensor as T
from .errors import NumericError, ShapeError
from .tensor import Tensor

SCAN_CKPT = 64


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0):
    """Normal(0, std) truncated to +-bound*std via inverse-CDF sampling."""
    from scipy.special import erf

    lo = 0.5 * (1.0 + erf(-bound / np.sqrt(2.0)))
    u = rng.uniform(lo, 1.0 - lo, size=shape)
    return np.sqrt(2.0) * erfinv(2.0 * u - 1.0) * std


def selective_scan(x: Tensor, dt: Tensor, a: Tensor, b: Tensor, c: Tensor,
                   dskip: Tensor, ckpt: int = SCAN_CKPT) -> Tensor:
    """Tape-integrated scan; accepts [L, D] or [B, L, D] inputs."""
    xd = x.data
    unbatched = xd.ndim == 2
    if unbatched:
        xd = xd[None]
    if xd.ndim != 3:
        raise ShapeError(f"selective_scan input must be [L,D] or [B,L,D], got {x.data.shape}")
    nb, length, dim = xd.shape
    nstate = a.data.shape[1]
    dtd = np.ascontiguousarray(dt.data.reshape(nb, length, dim))
    bd = np.ascontiguousarray(b.data.reshape(nb, length, nstate))
    cd = np.ascontiguousarray(c.data.reshape(nb, length, nstate))
    ad = np.ascontiguousarray(a.data)
    dsd = np.ascontiguousarray(dskip.data)
    xd = np.ascontiguousarray(xd)

    y, hck = kernels.scan_forward(xd, dtd, ad, bd, cd, dsd, ckpt)
    finite_t = np.isfinite(y).all(axis=(0, 2))
    if not finite_t.all():
        step = int(np.argmin(finite_t))
        raise NumericError(f"non-finite selective_scan state at step {step}")

    def backward(g):
        gc3 = np.ascontiguousarray(g.reshape(nb, length, dim))
        gx, gdt, ga, gb, gc_, gds = kernels.scan_backward(
            xd, dtd, ad, bd, cd, dsd, hck, gc3, ckpt
        )
        if unbatched:
            gx, gdt, gb, gc_ = gx[0], gdt[0], gb[0], gc_[0]
        return gx, gdt, ga, gb, gc_, gds

    out = y[0] if unbatched else y
    return T.record_op(out, (x, dt, a, b, c, dskip), backward)


@dataclass
class SSMParams:
    """One unidirectional Mamba stream (projections + scan parameters)."""

    in_proj_w: Tensor   # [D, 2*Din]
    in_proj_b: Tensor   # [2*Din]
    conv_w: Tensor      # [Din, conv_width]
    conv_b: Tensor      # [Din]
    dt_w: Tensor        # [Din, Din]
    dt_b: Tensor        # [Din]
    b_w: Tensor         # [Din, N]
    c_w: Tensor         # [Din, N]
    log_a: Tensor       # [Din, N]; A = -exp(log_a)
    dskip: Tensor       # [Din]
    out_w: Tensor       # [Din, D]
    out_b: Tensor       # [D]

    def params(self):
        for name in ("in_proj_w", "in_proj_b", "conv_w", "conv_b", "dt_w", "dt_b",
                     "b_w", "c_w", "log_a", "dskip", "out_w", "out_b"):
            yield name, getattr(self, name)


def init_ssm(rng: np.random.Generator, dim: int, expand: int = 2, state_dim: int = 16,
             conv_width: int = 4, dt_min: float = 1e-3, dt_max: float = 1e-1) -> SSMParams:
    din = expand * dim

    def p(arr):
        return Tensor(arr, requires_grad=True)

    # S4D-real: n-th state gets A = -(n+1)
    log_a = np.broadcast_to(np.log(np.arange(1, state_dim + 1, dtype=np.float64)),
                            (din, state_dim)).copy()
    # softplus(dt_b) lands log-uniformly in [dt_min, dt_max]
    dt0 = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=din))
    dt_b = np.log(np.expm1(dt0))
    return SSMParams(
        in_proj_w=p(trunc_normal(rng, (dim, 2 * din))),
        in_proj_b=p(np.zeros(2 * din)),
        conv_w=p(trunc_normal(rng, (din, conv_width))),
        conv_b=p(np.zeros(din)),
        dt_w=p(trunc_normal(rng, (din, din))),
        dt_b=p(dt_b),
        b_w=p(trunc_normal(rng, (din, state_dim))),
        c_w=p(trunc_normal(rng, (din, state_dim))),
        log_a=p(log_a),
        dskip=p(np.ones(din)),
        out_w=p(trunc_normal(rng, (din, dim))),
        out_b=p(np.zeros(dim)),
    )


def mamba_stream(x: Tensor, p: SSMParams, valid_mask: np.ndarray | None = None) -> Tensor:
    """Full unidirectional block: in-proj, causal pre-conv, scan, SiLU gate, out-proj.

    valid_mask (True at real tokens) re-zeros the scan input both before and
    after the pre-conv: the in-proj and conv biases would otherwise leak
    nonzero values into padding rows, and with padding flipped to the front
    (the reversed stream) the causal window of early real tokens reads them.
    """
    xz = T.add(T.matmul(x, p.in_proj_w), p.in_proj_b)
    x_in, z = T.split_last(xz)
    if valid_mask is not None:
        vm = Tensor(valid_mask[..., None].astype(np.float64))
        x_in = T.mul(x_in, vm)
    xc = T.silu(T.add(T.causal_conv1d(x_in, p.conv_w), p.conv_b))
    if valid_mask is not None:
        xc = T.mul(xc, vm)
    dt = T.softplus(T.add(T.matmul(xc, p.dt_w), p.dt_b))
    bmat = T.matmul(xc, p.b_w)
    cmat = T.matmul(xc, p.c_w)
    a = T.neg(T.exp(p.log_a))
    y = selective_scan(xc, dt, a, bmat, cmat, p.dskip)
    y = T.mul(y, T.silu(z))
    return T.add(T.matmul(y, p.out_w), p.out_b)


@dataclass
class BiMambaParams:
    fwd: SSMParams
    bwd: SSMParams  # may be the same object as fwd (tied weights)

    @property
    def tied(self) -> bool:
        return self.bwd is self.fwd

    def params(self):
        for name, t in self.fwd.params():
            yield f"fwd.{name}", t
        if not self.tied:
            for name, t in self.bwd.params():
                yield f"bwd.{name}", t


def init_bimamba(rng: np.random.Generator, dim: int, expand: int = 2,
                 state_dim: int = 16, conv_width: int = 4,
                 tie_weights: bool = False) -> BiMambaParams:
    fwd = init_ssm(rng, dim, expand, state_dim, conv_width)
    bwd = fwd if tie_weights else init_ssm(rng, dim, expand, state_dim, conv_width)
    return BiMambaParams(fwd=fwd, bwd=bwd)


def bimamba(x: Tensor, p: BiMambaParams, valid_mask: np.ndarray | None = None) -> Tensor:
    """Average of a forward stream and a backward (flip-run-flip) stream."""
    fwd = mamba_stream(x, p.fwd, valid_mask)
    xr = T.flip(x, axis=-2)
    mask_r = None if valid_mask is None else np.flip(valid_mask, axis=-1)
    bwd = T.flip(mamba_stream(xr, p.bwd, mask_r), axis=-2)
    return T.scale(T.add(fwd, bwd), 0.5)
