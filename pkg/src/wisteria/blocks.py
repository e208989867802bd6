"""Model-specific blocks: the gated-convolution fusion block, the gated MLP,
and multi-head attention with Fourier or rotary position maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .ssm import BiMambaParams, bimamba, init_bimamba, trunc_normal
from .tensor import Tensor


def dilation_schedule(base: int, num_gcmb: int) -> list:
    """[1, 1, n, n^2, n^3, ...]: slot i >= 2 gets n^(i-1)."""
    if num_gcmb < 1:
        raise ConfigError(f"dilation_schedule needs num_gcmb >= 1, got {num_gcmb}")
    if base < 1:
        raise ConfigError(f"dilation_schedule needs base >= 1, got {base}")
    return [1 if i < 2 else base ** (i - 1) for i in range(num_gcmb)]


def receptive_span(kernel: int, dilation: int) -> int:
    return 1 + (kernel - 1) * dilation


# ---------------------------------------------------------------------------
# GCMB: H = bimamba(x); h = GeLU(conv_a(H)); g = sigmoid(conv_b(H));
#       Y = LayerNorm(MLP(H + h*g))


@dataclass
class GCMBParams:
    bimamba: BiMambaParams
    conv_a_w: Tensor    # [D, K], dilation dil_a
    conv_a_b: Tensor    # [D]
    conv_b_w: Tensor    # [D, K], dilation dil_b
    conv_b_b: Tensor    # [D]
    dil_a: int
    dil_b: int
    mlp_w1: Tensor      # [D, 2D]
    mlp_b1: Tensor
    mlp_w2: Tensor      # [2D, D]
    mlp_b2: Tensor
    ln_scale: Tensor
    ln_shift: Tensor

    def params(self):
        for name, t in self.bimamba.params():
            yield f"bimamba.{name}", t
        for name in ("conv_a_w", "conv_a_b", "conv_b_w", "conv_b_b",
                     "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln_scale", "ln_shift"):
            yield name, getattr(self, name)


def init_gcmb(rng: np.random.Generator, dim: int, kernel: int, dil_a: int, dil_b: int,
              expand: int = 2, state_dim: int = 16, conv_width: int = 4) -> GCMBParams:
    if kernel % 2 != 1:
        raise ConfigError(f"kernel_size must be odd, got {kernel}")

    def p(arr):
        return Tensor(arr, requires_grad=True)

    return GCMBParams(
        bimamba=init_bimamba(rng, dim, expand, state_dim, conv_width),
        conv_a_w=p(trunc_normal(rng, (dim, kernel))),
        conv_a_b=p(np.zeros(dim)),
        conv_b_w=p(trunc_normal(rng, (dim, kernel))),
        conv_b_b=p(np.zeros(dim)),
        dil_a=dil_a,
        dil_b=dil_b,
        mlp_w1=p(trunc_normal(rng, (dim, 2 * dim))),
        mlp_b1=p(np.zeros(2 * dim)),
        mlp_w2=p(trunc_normal(rng, (2 * dim, dim))),
        mlp_b2=p(np.zeros(dim)),
        ln_scale=p(np.ones(dim)),
        ln_shift=p(np.zeros(dim)),
    )


def gcmb_block(x: Tensor, p: GCMBParams, valid_mask: np.ndarray | None = None) -> Tensor:
    big_h = bimamba(x, p.bimamba, valid_mask)
    h = T.gelu(T.add(T.depthwise_conv1d(big_h, p.conv_a_w, p.dil_a), p.conv_a_b))
    g = T.sigmoid(T.add(T.depthwise_conv1d(big_h, p.conv_b_w, p.dil_b), p.conv_b_b))
    fused = T.add(big_h, T.mul(h, g))
    hid = T.gelu(T.add(T.matmul(fused, p.mlp_w1), p.mlp_b1))
    out = T.add(T.matmul(hid, p.mlp_w2), p.mlp_b2)
    return T.layernorm(out, p.ln_scale, p.ln_shift)


# ---------------------------------------------------------------------------
# gated MLP: [U,G] = split(W1 y + b1); Z = y + W2 (SiLU(U) * sigmoid(G)) + b2
# No normalization anywhere in this block.


@dataclass
class GatedMLPParams:
    w1: Tensor  # [D, 2h]
    b1: Tensor
    w2: Tensor  # [h, D]
    b2: Tensor

    def params(self):
        for name in ("w1", "b1", "w2", "b2"):
            yield name, getattr(self, name)


def init_gated_mlp(rng: np.random.Generator, dim: int, hidden: int) -> GatedMLPParams:
    def p(arr):
        return Tensor(arr, requires_grad=True)

    return GatedMLPParams(
        w1=p(trunc_normal(rng, (dim, 2 * hidden))),
        b1=p(np.zeros(2 * hidden)),
        w2=p(trunc_normal(rng, (hidden, dim))),
        b2=p(np.zeros(dim)),
    )


def gated_mlp(y: Tensor, p: GatedMLPParams) -> Tensor:
    ug = T.add(T.matmul(y, p.w1), p.b1)
    u, g = T.split_last(ug)
    fused = T.mul(T.silu(u), T.sigmoid(g))
    return T.add(y, T.add(T.matmul(fused, p.w2), p.b2))


# ---------------------------------------------------------------------------
# position maps


def rope_frequencies(d_head: int, theta: float = 10000.0) -> np.ndarray:
    """omega_m = theta^(-2m/d_head) for pair index m."""
    if d_head % 2 != 0:
        raise ConfigError(f"d_head must be even, got {d_head}")
    m = np.arange(d_head // 2, dtype=np.float64)
    return theta ** (-2.0 * m / d_head)


@dataclass
class FoPEParams:
    """Fourier positional response per coordinate pair.

    Pairs whose base frequency falls below the cutoff respond with the
    constant 1 (no rotation, no harmonics). Active pairs respond with
    exp(i*w_m*n) plus n_h learnable-coefficient harmonics whose frequencies
    are fixed draws from the same layer's rotary spectrum.
    """

    freqs: np.ndarray        # [d/2] base spectrum (constant)
    harm_freqs: np.ndarray   # [d/2, n_h] fixed harmonic draws (constant)
    coeffs: Tensor           # [d/2, n_h] learnable
    cutoff: float            # omega_l = 2*pi/N_train; 0 disables flooring
    d_head: int

    @property
    def active(self) -> np.ndarray:
        return self.freqs >= self.cutoff

    def params(self):
        yield "coeffs", self.coeffs


def init_fope(rng: np.random.Generator, d_head: int, n_train: int,
              n_harmonics: int = 4, theta: float = 10000.0) -> FoPEParams:
    freqs = rope_frequencies(d_head, theta)
    cutoff = 0.0 if n_train <= 0 else 2.0 * np.pi / n_train
    half = d_head // 2
    harm = rng.choice(freqs, size=(half, n_harmonics), replace=True)
    coeffs = rng.normal(0.0, 0.02 / np.sqrt(n_harmonics), size=(half, n_harmonics))
    return FoPEParams(
        freqs=freqs,
        harm_freqs=harm,
        coeffs=Tensor(coeffs, requires_grad=True),
        cutoff=cutoff,
        d_head=d_head,
    )


def pair_rotate(x: Tensor, f_re: Tensor, f_im: Tensor) -> Tensor:
    """Complex multiply on coordinate pairs: pair m of x scaled by (f_re + i*f_im).

    x: [..., L, H, d_head]; f_re, f_im: [L, d_head/2], broadcast over heads
    and any leading batch axes.
    """
    xd = x.data
    if xd.shape[-1] % 2 != 0:
        raise ConfigError(f"pair_rotate needs an even last axis, got {xd.shape}")
    length, half = f_re.data.shape
    if xd.shape[-3] != length or xd.shape[-1] // 2 != half:
        raise ShapeError(f"pair_rotate response {f_re.data.shape} does not match input {xd.shape}")
    fr = f_re.data[:, None, :]
    fi = f_im.data[:, None, :]
    x1 = xd[..., 0::2]
    x2 = xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x1 * fr - x2 * fi
    out[..., 1::2] = x1 * fi + x2 * fr
    needs = (x.requires_grad, f_re.requires_grad, f_im.requires_grad)

    def backward(g):
        g1 = g[..., 0::2]
        g2 = g[..., 1::2]
        gx = gfr = gfi = None
        if needs[0]:
            gx = np.empty_like(xd)
            gx[..., 0::2] = g1 * fr + g2 * fi
            gx[..., 1::2] = -g1 * fi + g2 * fr
        if needs[1]:
            gfr = T._sum_to(g1 * x1 + g2 * x2, (length, 1, half)).reshape(length, half)
        if needs[2]:
            gfi = T._sum_to(g2 * x1 - g1 * x2, (length, 1, half)).reshape(length, half)
        return gx, gfr, gfi

    return T.record_op(out, (x, f_re, f_im), backward)


def fope_response(p: FoPEParams, positions: np.ndarray) -> tuple[Tensor, Tensor]:
    """Build (F_re, F_im) of shape [L, d_head/2] on the tape (coeffs learnable)."""
    pos = np.asarray(positions, dtype=np.float64)
    active = p.active
    ang = pos[:, None] * p.freqs[None, :]
    base_re = np.where(active, np.cos(ang), 1.0)
    base_im = np.where(active, np.sin(ang), 0.0)
    hang = pos[:, None, None] * p.harm_freqs[None, :, :]
    gate = active[None, :, None]
    hc = np.cos(hang) * gate
    hs = np.sin(hang) * gate
    f_re = T.add(Tensor(base_re), T.tsum(T.mul(p.coeffs, Tensor(hc)), axis=-1))
    f_im = T.add(Tensor(base_im), T.tsum(T.mul(p.coeffs, Tensor(hs)), axis=-1))
    return f_re, f_im


def rope_response(freqs: np.ndarray, positions: np.ndarray) -> tuple[Tensor, Tensor]:
    pos = np.asarray(positions, dtype=np.float64)
    ang = pos[:, None] * freqs[None, :]
    return Tensor(np.cos(ang)), Tensor(np.sin(ang))


def fope_rotate(x: Tensor, p: FoPEParams, positions: np.ndarray) -> Tensor:
    f_re, f_im = fope_response(p, positions)
    return pair_rotate(x, f_re, f_im)


def rope_rotate(x: Tensor, freqs: np.ndarray, positions: np.ndarray) -> Tensor:
    f_re, f_im = rope_response(freqs, positions)
    return pair_rotate(x, f_re, f_im)


# ---------------------------------------------------------------------------
# attention

PAD_LOGIT_BIAS = -1e30


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    mode: str                      # fope | rope | none
    fope: FoPEParams | None = None
    rope_freqs: np.ndarray | None = None

    def params(self):
        for name in ("wq", "wk", "wv", "wo"):
            yield name, getattr(self, name)
        if self.fope is not None:
            yield "fope.coeffs", self.fope.coeffs


def init_attention(rng: np.random.Generator, dim: int, heads: int, mode: str,
                   n_train: int, n_harmonics: int = 4, theta: float = 10000.0) -> AttentionParams:
    mode = mode.lower()
    if mode not in ("fope", "rope", "none"):
        raise ConfigError(f"attn_mode must be fope, rope, or none, got {mode!r}")
    if dim % heads != 0:
        raise ConfigError(f"dim {dim} not divisible by heads {heads}")
    d_head = dim // heads
    if d_head % 2 != 0:
        raise ConfigError(f"d_head must be even, got dim {dim} / heads {heads} = {d_head}")

    def p(arr):
        return Tensor(arr, requires_grad=True)

    fope = init_fope(rng, d_head, n_train, n_harmonics, theta) if mode == "fope" else None
    rope = rope_frequencies(d_head, theta) if mode == "rope" else None
    return AttentionParams(
        wq=p(trunc_normal(rng, (dim, dim))),
        wk=p(trunc_normal(rng, (dim, dim))),
        wv=p(trunc_normal(rng, (dim, dim))),
        wo=p(trunc_normal(rng, (dim, dim))),
        heads=heads,
        mode=mode,
        fope=fope,
        rope_freqs=rope,
    )


def attention(x: Tensor, p: AttentionParams, valid_mask: np.ndarray | None = None,
              positions: np.ndarray | None = None) -> Tensor:
    """Non-causal multi-head attention; logits scaled by 1/sqrt(d_head).

    Padding keys get a -1e30 logit bias. A row whose keys are all padding
    softmaxes to a uniform average of (zero) pad values; the model re-masks
    layer outputs, so such rows come out as zeros by convention.
    """
    unbatched = x.data.ndim == 2
    xb = T.reshape(x, (1,) + x.data.shape) if unbatched else x
    nb, length, dim = xb.data.shape
    heads = p.heads
    d_head = dim // heads
    if positions is None:
        positions = np.arange(length)

    q = T.reshape(T.matmul(xb, p.wq), (nb, length, heads, d_head))
    k = T.reshape(T.matmul(xb, p.wk), (nb, length, heads, d_head))
    v = T.reshape(T.matmul(xb, p.wv), (nb, length, heads, d_head))
    if p.mode == "fope":
        f_re, f_im = fope_response(p.fope, positions)
        q = pair_rotate(q, f_re, f_im)
        k = pair_rotate(k, f_re, f_im)
    elif p.mode == "rope":
        f_re, f_im = rope_response(p.rope_freqs, positions)
        q = pair_rotate(q, f_re, f_im)
        k = pair_rotate(k, f_re, f_im)

    qh = T.transpose(q, (0, 2, 1, 3))
    kh = T.transpose(k, (0, 2, 1, 3))
    vh = T.transpose(v, (0, 2, 1, 3))
    inv = 1.0 / np.sqrt(d_head)
    bias = None
    if valid_mask is not None:
        vm = valid_mask.reshape(nb, length)
        bias = np.where(vm, 0.0, PAD_LOGIT_BIAS)[:, None, None, :]

    if T.current_tape() is None:
        # inference fast path: scale, mask, and softmax in place on the one
        # [B,H,L,L] buffer so peak memory stays near a single logit table
        logits = Tensor(qh.data @ kh.data.swapaxes(-1, -2))
        buf = logits.data
        buf *= inv
        if bias is not None:
            buf += bias
        buf -= buf.max(axis=-1, keepdims=True)
        np.exp(buf, out=buf)
        buf /= buf.sum(axis=-1, keepdims=True)
        ctx = Tensor(buf @ vh.data)
    else:
        logits = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), inv)
        if bias is not None:
            logits = T.add(logits, Tensor(bias))
        probs = T.softmax(logits, axis=-1)
        ctx = T.matmul(probs, vh)

    y = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (nb, length, dim))
    out = T.matmul(y, p.wo)
    return T.reshape(out, x.data.shape) if unbatched else out
