"""Pure-numpy selective-scan kernels.

Reference semantics for the compiled extension and the fallback when it is
unavailable. The recurrence over t is inherently sequential:

    h_t = exp(dt_t * A) * h_{t-1} + (dt_t * x_t) outer B_t
    y_t = <C_t, h_t> + D_skip * x_t

Forward checkpoints the state every `ckpt` steps; backward recomputes each
segment from its checkpoint, so peak memory is O(B * ckpt * D * N) instead of
O(B * L * D * N).
"""

import numpy as np

NAME = "reference"


def scan_forward(x, dt, a, b, c, dskip, ckpt: int = 64):
    """x, dt: [B,L,D]; a: [D,N]; b, c: [B,L,N]; dskip: [D] -> (y, hck)."""
    nb, length, dim = x.shape
    nck = (length + ckpt - 1) // ckpt
    hck = np.zeros((nb, nck, dim, a.shape[1]))
    h = np.zeros((nb, dim, a.shape[1]))
    y = np.empty_like(x)
    for t in range(length):
        if t % ckpt == 0:
            hck[:, t // ckpt] = h
        abar = np.exp(dt[:, t, :, None] * a)
        h = abar * h + (dt[:, t] * x[:, t])[:, :, None] * b[:, t, None, :]
        y[:, t] = np.einsum("bdn,bn->bd", h, c[:, t]) + dskip * x[:, t]
    return y, hck


def scan_backward(x, dt, a, b, c, dskip, hck, gy, ckpt: int = 64):
    """Segment-recomputing reverse sweep; returns grads for all six inputs."""
    nb, length, dim = x.shape
    nstate = a.shape[1]
    nck = hck.shape[1]
    gx = np.empty_like(x)
    gdt = np.empty_like(dt)
    ga = np.zeros_like(a)
    gb = np.empty_like(b)
    gc = np.empty_like(c)
    gdskip = (gy * x).sum(axis=(0, 1))
    gh = np.zeros((nb, dim, nstate))

    for seg in range(nck - 1, -1, -1):
        t0 = seg * ckpt
        t1 = min(length, t0 + ckpt)
        m = t1 - t0
        # recompute the segment's states and transition factors
        seg_a = np.exp(dt[:, t0:t1, :, None] * a)
        seg_h = np.empty((nb, m + 1, dim, nstate))
        seg_h[:, 0] = hck[:, seg]
        u = dt[:, t0:t1] * x[:, t0:t1]
        for i in range(m):
            seg_h[:, i + 1] = (
                seg_a[:, i] * seg_h[:, i] + u[:, i, :, None] * b[:, t0 + i, None, :]
            )
        for i in range(m - 1, -1, -1):
            t = t0 + i
            ghv = gh + gy[:, t, :, None] * c[:, t, None, :]
            gc[:, t] = np.einsum("bd,bdn->bn", gy[:, t], seg_h[:, i + 1])
            gab = ghv * seg_h[:, i]
            gdt[:, t] = (gab * a * seg_a[:, i]).sum(axis=-1) + (
                ghv * b[:, t, None, :]
            ).sum(axis=-1) * x[:, t]
            ga += np.einsum("bdn,bd->dn", gab * seg_a[:, i], dt[:, t])
            gb[:, t] = np.einsum("bdn,bd->bn", ghv, u[:, i])
            gx[:, t] = (ghv * b[:, t, None, :]).sum(axis=-1) * dt[:, t] + gy[:, t] * dskip
            gh = ghv * seg_a[:, i]
    return gx, gdt, ga, gb, gc, gdskip
