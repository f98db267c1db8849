"""3D convolution and stride-sized transposed convolution kernels.

Layout is ``(batch, channels, d0, d1, d2)``.  The numba kernels accumulate
every output voxel in 64-bit, in the order (input channel, k0, k1, k2), with
the bias added last; the reference loops in the test-suite follow the same
order, so results agree bitwise.  The numpy kernels route through BLAS and
agree to rounding only.
"""

from __future__ import annotations

import numpy as np

from .._backend import njit, resolve

__all__ = [
    "conv3d_forward",
    "conv3d_backward",
    "conv_transpose3d_forward",
    "conv_transpose3d_backward",
]


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------


@njit
def _conv3d_fwd_nb(xp, w, b, d0, d1, d2):
    # xp: zero-padded input flattened to (n, cin, P0*P1*P2)
    n, cin, _ = xp.shape
    cout, _, k0, k1, k2 = w.shape
    P2 = d2 + k2 - 1
    plane = (d1 + k1 - 1) * P2
    span = (d0 - 1) * plane + (d1 - 1) * P2 + d2
    acc = np.zeros((n, cout, d0 * plane), dtype=np.float64)
    for bi in range(n):
        for co in range(cout):
            dst = acc[bi, co]
            for ci in range(cin):
                src = xp[bi, ci]
                for a in range(k0):
                    for bb in range(k1):
                        for c in range(k2):
                            s = a * plane + bb * P2 + c
                            wv = np.float64(w[co, ci, a, bb, c])
                            for q in range(span):
                                dst[q] += wv * np.float64(src[q + s])
            bv = np.float64(b[co])
            for q in range(d0 * plane):
                dst[q] += bv
    return acc


@njit(fastmath=True)
def _conv3d_bwd_nb(xp, w, gp, d0, d1, d2):
    # gp: upstream gradient laid out on the padded anchor grid, (n, cout, d0*P1*P2),
    # zero in the padding columns
    n, cin, L = xp.shape
    cout, _, k0, k1, k2 = w.shape
    P2 = d2 + k2 - 1
    plane = (d1 + k1 - 1) * P2
    span = (d0 - 1) * plane + (d1 - 1) * P2 + d2
    gxp = np.zeros((n, cin, L), dtype=np.float64)
    gw = np.zeros((cout, cin, k0, k1, k2), dtype=np.float64)
    gb = np.zeros(cout, dtype=np.float64)
    for bi in range(n):
        for co in range(cout):
            g = gp[bi, co]
            s = 0.0
            for q in range(span):
                s += np.float64(g[q])
            gb[co] += s
            for ci in range(cin):
                src = xp[bi, ci]
                gdst = gxp[bi, ci]
                for a in range(k0):
                    for bb in range(k1):
                        for c in range(k2):
                            sh = a * plane + bb * P2 + c
                            wv = np.float64(w[co, ci, a, bb, c])
                            s = 0.0
                            for q in range(span):
                                gv = np.float64(g[q])
                                s += gv * np.float64(src[q + sh])
                                gdst[q + sh] += wv * gv
                            gw[co, ci, a, bb, c] += s
    return gxp, gw, gb


@njit
def _convT_fwd_nb(x, w, b):
    n, cin, d0, d1, d2 = x.shape
    _, cout, s0, s1, s2 = w.shape
    acc = np.zeros((n, cout, d0 * s0, d1 * s1, d2 * s2), dtype=np.float64)
    for bi in range(n):
        for ci in range(cin):
            for z in range(d0):
                for y in range(d1):
                    for i in range(d2):
                        xv = np.float64(x[bi, ci, z, y, i])
                        for co in range(cout):
                            for a in range(s0):
                                for bb in range(s1):
                                    for c in range(s2):
                                        acc[bi, co, z * s0 + a, y * s1 + bb, i * s2 + c] += (
                                            xv * np.float64(w[ci, co, a, bb, c])
                                        )
        for co in range(cout):
            bv = np.float64(b[co])
            acc[bi, co] += bv
    return acc


@njit(fastmath=True)
def _convT_bwd_nb(x, w, g):
    n, cin, d0, d1, d2 = x.shape
    _, cout, s0, s1, s2 = w.shape
    gx = np.zeros((n, cin, d0, d1, d2), dtype=np.float64)
    gw = np.zeros((cin, cout, s0, s1, s2), dtype=np.float64)
    gb = np.zeros(cout, dtype=np.float64)
    for bi in range(n):
        for co in range(cout):
            gb[co] += np.sum(g[bi, co].astype(np.float64))
        for ci in range(cin):
            for z in range(d0):
                for y in range(d1):
                    for i in range(d2):
                        xv = np.float64(x[bi, ci, z, y, i])
                        s = 0.0
                        for co in range(cout):
                            for a in range(s0):
                                for bb in range(s1):
                                    for c in range(s2):
                                        gv = np.float64(g[bi, co, z * s0 + a, y * s1 + bb, i * s2 + c])
                                        s += gv * np.float64(w[ci, co, a, bb, c])
                                        gw[ci, co, a, bb, c] += gv * xv
                        gx[bi, ci, z, y, i] = s
    return gx, gw, gb


# ---------------------------------------------------------------------------
# numpy
# ---------------------------------------------------------------------------


def _shift_layout(x, k):
    """Zero-pad ``x`` and return the flat padded buffer plus shift bookkeeping.

    Output voxel (z, y, i) is anchored at flat index ``z*P1*P2 + y*P2 + i`` of
    the padded buffer; tap (a, b, c) reads the same index shifted by
    ``a*P1*P2 + b*P2 + c``.  Each tap is therefore one GEMM over a strided
    window of the flat buffer, with no im2col copy.
    """
    n, cin, d0, d1, d2 = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    P1, P2 = d1 + 2 * p, d2 + 2 * p
    plane = P1 * P2
    span = (d0 - 1) * plane + (d1 - 1) * P2 + d2
    shifts = [a * plane + bb * P2 + c for a in range(k) for bb in range(k) for c in range(k)]
    return xp.reshape(n, cin, -1), shifts, span, (P1, P2)


def _conv3d_fwd_np(x, w, b):
    n, cin, d0, d1, d2 = x.shape
    cout, _, k = w.shape[:3]
    if k == 1:
        out = np.matmul(w[:, :, 0, 0, 0], x.reshape(n, cin, -1)).reshape(n, cout, d0, d1, d2)
        return out + b[None, :, None, None, None]
    flat, shifts, span, (P1, P2) = _shift_layout(x, k)
    taps = np.ascontiguousarray(w.reshape(cout, cin, -1).transpose(2, 0, 1))
    acc = np.zeros((n, cout, d0 * P1 * P2), dtype=np.result_type(x, w))
    tmp = np.empty((cout, span), dtype=acc.dtype)
    for bi in range(n):
        dst = acc[bi, :, :span]
        for t, s in enumerate(shifts):
            np.matmul(taps[t], flat[bi, :, s : s + span], out=tmp)
            dst += tmp
    out = acc.reshape(n, cout, d0, P1, P2)[:, :, :, :d1, :d2]
    return out + b[None, :, None, None, None]


def _conv3d_bwd_np(x, w, g):
    n, cin, d0, d1, d2 = x.shape
    cout, _, k = w.shape[:3]
    gb = g.sum(axis=(0, 2, 3, 4))
    if k == 1:
        gm, xm = g.reshape(n, cout, -1), x.reshape(n, cin, -1)
        gw = sum(gm[i] @ xm[i].T for i in range(n))[:, :, None, None, None]
        gx = np.matmul(w[:, :, 0, 0, 0].T, gm).reshape(x.shape)
        return gx, gw, gb
    p = k // 2
    flat, shifts, span, (P1, P2) = _shift_layout(x, k)
    taps = np.ascontiguousarray(w.reshape(cout, cin, -1).transpose(2, 0, 1))
    dtype = np.result_type(x, w, g)
    gfull = np.zeros((n, cout, d0, P1, P2), dtype=dtype)
    gfull[:, :, :, :d1, :d2] = g
    gflat = gfull.reshape(n, cout, -1)
    gtaps = np.zeros((len(shifts), cout, cin), dtype=dtype)
    gxp = np.zeros(flat.shape, dtype=dtype)
    tmp = np.empty((cin, span), dtype=dtype)
    for bi in range(n):
        G = gflat[bi, :, :span]
        for t, s in enumerate(shifts):
            window = flat[bi, :, s : s + span]
            gtaps[t] += G @ window.T
            np.matmul(taps[t].T, G, out=tmp)
            gxp[bi, :, s : s + span] += tmp
    gw = gtaps.transpose(1, 2, 0).reshape(w.shape)
    gx = gxp.reshape(n, cin, d0 + 2 * p, P1, P2)[:, :, p : p + d0, p : p + d1, p : p + d2]
    return gx, gw, gb


def _convT_fwd_np(x, w, b):
    # one GEMM: (cout*S, cin) @ (cin, voxels), then interleave the S kernel taps
    n, cin, d0, d1, d2 = x.shape
    _, cout, s0, s1, s2 = w.shape
    wm = w.reshape(cin, -1).T
    cols = np.matmul(wm, x.reshape(n, cin, -1))
    out = cols.reshape(n, cout, s0, s1, s2, d0, d1, d2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    out = out.reshape(n, cout, d0 * s0, d1 * s1, d2 * s2)
    return out + b[None, :, None, None, None]


def _convT_bwd_np(x, w, g):
    n, cin, d0, d1, d2 = x.shape
    _, cout, s0, s1, s2 = w.shape
    gb = g.sum(axis=(0, 2, 3, 4))
    gcols = g.reshape(n, cout, d0, s0, d1, s1, d2, s2).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    gcols = np.ascontiguousarray(gcols).reshape(n, cout * s0 * s1 * s2, -1)
    wm = w.reshape(cin, -1)
    xm = x.reshape(n, cin, -1)
    gx = np.matmul(wm, gcols).reshape(x.shape)
    gw = sum(xm[i] @ gcols[i].T for i in range(n)).reshape(w.shape)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _check_conv(x, w, b):
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5-d input and kernel, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, input has {x.shape[1]}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"conv3d kernel must be cubic with odd size, got {w.shape[2:]}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation of ``x`` with ``w`` plus bias."""
    _check_conv(x, w, b)
    if resolve("conv") == "numba":
        n, cout = x.shape[0], w.shape[0]
        d0, d1, d2 = x.shape[2:]
        k = w.shape[2]
        flat, _, _, (P1, P2) = _shift_layout(x, k)
        acc = _conv3d_fwd_nb(flat, w, b, d0, d1, d2)
        out = acc.reshape(n, cout, d0, P1, P2)[:, :, :, :d1, :d2]
        return np.ascontiguousarray(out, dtype=x.dtype)
    return _conv3d_fwd_np(x, w, b).astype(x.dtype, copy=False)


def conv3d_backward(x, w, g):
    """Gradients ``(dx, dw, db)`` of :func:`conv3d_forward` given upstream ``g``."""
    if resolve("conv") == "numba":
        n, cin = x.shape[:2]
        d0, d1, d2 = x.shape[2:]
        k = w.shape[2]
        p = k // 2
        flat, _, _, (P1, P2) = _shift_layout(x, k)
        gp = np.zeros((n, g.shape[1], d0, P1, P2), dtype=g.dtype)
        gp[:, :, :, :d1, :d2] = g
        gxp, gw, gb = _conv3d_bwd_nb(flat, w, gp.reshape(n, g.shape[1], -1), d0, d1, d2)
        gx = gxp.reshape(n, cin, d0 + 2 * p, P1, P2)[:, :, p : p + d0, p : p + d1, p : p + d2]
    else:
        gx, gw, gb = _conv3d_bwd_np(x, w, g)
    return gx.astype(x.dtype, copy=False), gw.astype(w.dtype, copy=False), gb.astype(w.dtype, copy=False)


def conv_transpose3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transposed convolution whose kernel size equals its stride.

    ``w`` has shape ``(cin, cout, s0, s1, s2)``; every input voxel stamps a
    weighted copy of its kernel into a disjoint ``s0 x s1 x s2`` output block.
    """
    if x.ndim != 5 or w.ndim != 5 or w.shape[0] != x.shape[1]:
        raise ValueError(f"transposed conv shape mismatch: input {x.shape}, kernel {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[1]} output channels")
    if resolve("conv") == "numba":
        return _convT_fwd_nb(x, w, b).astype(x.dtype, copy=False)
    return _convT_fwd_np(x, w, b).astype(x.dtype, copy=False)


def conv_transpose3d_backward(x, w, g):
    if resolve("conv") == "numba":
        gx, gw, gb = _convT_bwd_nb(x, w, g)
    else:
        gx, gw, gb = _convT_bwd_np(x, w, g)
    return gx.astype(x.dtype, copy=False), gw.astype(w.dtype, copy=False), gb.astype(w.dtype, copy=False)
