"""Non-overlapping 3D max pooling with first-occurrence argmax."""

from __future__ import annotations

import numpy as np

from .._backend import njit, resolve

__all__ = ["maxpool3d_forward", "maxpool3d_backward"]


@njit
def _pool_fwd_nb(x, p0, p1, p2):
    n, c, d0, d1, d2 = x.shape
    o0, o1, o2 = d0 // p0, d1 // p1, d2 // p2
    out = np.empty((n, c, o0, o1, o2), dtype=x.dtype)
    arg = np.empty((n, c, o0, o1, o2), dtype=np.int64)
    for bi in range(n):
        for ch in range(c):
            for i in range(o0):
                for j in range(o1):
                    for k in range(o2):
                        best = x[bi, ch, i * p0, j * p1, k * p2]
                        best_t = 0
                        t = 0
                        for a in range(p0):
                            for b in range(p1):
                                for cc in range(p2):
                                    v = x[bi, ch, i * p0 + a, j * p1 + b, k * p2 + cc]
                                    if v > best:
                                        best = v
                                        best_t = t
                                    t += 1
                        out[bi, ch, i, j, k] = best
                        arg[bi, ch, i, j, k] = best_t
    return out, arg


@njit
def _pool_bwd_nb(g, arg, p0, p1, p2):
    n, c, o0, o1, o2 = g.shape
    gx = np.zeros((n, c, o0 * p0, o1 * p1, o2 * p2), dtype=g.dtype)
    for bi in range(n):
        for ch in range(c):
            for i in range(o0):
                for j in range(o1):
                    for k in range(o2):
                        t = arg[bi, ch, i, j, k]
                        a = t // (p1 * p2)
                        b = (t // p2) % p1
                        cc = t % p2
                        gx[bi, ch, i * p0 + a, j * p1 + b, k * p2 + cc] = g[bi, ch, i, j, k]
    return gx


def _windows(x, pool):
    n, c, d0, d1, d2 = x.shape
    p0, p1, p2 = pool
    v = x.reshape(n, c, d0 // p0, p0, d1 // p1, p1, d2 // p2, p2)
    return v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d0 // p0, d1 // p1, d2 // p2, p0 * p1 * p2)


def maxpool3d_forward(x: np.ndarray, pool) -> tuple[np.ndarray, np.ndarray]:
    """Window maxima and the flat in-window argmax (scan order a, b, c)."""
    pool = tuple(int(p) for p in pool)
    if x.ndim != 5:
        raise ValueError(f"maxpool3d expects a 5-d tensor, got shape {x.shape}")
    if any(p < 1 for p in pool) or any(d % p for d, p in zip(x.shape[2:], pool)):
        raise ValueError(f"spatial dims {x.shape[2:]} are not divisible by pool size {pool}")
    if resolve("pool") == "numba":
        return _pool_fwd_nb(np.ascontiguousarray(x), *pool)
    win = _windows(x, pool)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool3d_backward(g: np.ndarray, arg: np.ndarray, pool) -> np.ndarray:
    pool = tuple(int(p) for p in pool)
    if resolve("pool") == "numba":
        return _pool_bwd_nb(np.ascontiguousarray(g), arg, *pool)
    n, c, o0, o1, o2 = g.shape
    p0, p1, p2 = pool
    win = np.zeros((n, c, o0, o1, o2, p0 * p1 * p2), dtype=g.dtype)
    np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
    win = win.reshape(n, c, o0, o1, o2, p0, p1, p2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return win.reshape(n, c, o0 * p0, o1 * p1, o2 * p2)
