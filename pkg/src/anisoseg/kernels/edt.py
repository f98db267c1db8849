"""Exact squared Euclidean distance transform on anisotropic grids.

The transform is separable: one 1D pass per axis computes
``out[q] = min_p (s * (q - p))**2 + f[p]`` along every grid line.  The numba
pass builds the lower envelope of the parabolas rooted at finite samples
(linear time per line).  The numpy pass evaluates the same minimum by brute
force over each line, which is exact as well, just quadratic in line length.
"""

from __future__ import annotations

import numpy as np

from .._backend import njit, resolve

__all__ = ["squared_edt"]


@njit
def _envelope_pass_nb(f, spacing):
    lines, n = f.shape
    out = np.empty_like(f)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    for line in range(lines):
        row = f[line]
        k = -1
        for q in range(n):
            fq = row[q]
            if fq == np.inf:
                continue
            xq = q * spacing
            s = 0.0
            while k >= 0:
                p = v[k]
                xp = p * spacing
                s = ((fq + xq * xq) - (row[p] + xp * xp)) / (2.0 * (xq - xp))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
            else:
                k += 1
                v[k] = q
                z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            for q in range(n):
                out[line, q] = np.inf
            continue
        j = 0
        for q in range(n):
            xq = q * spacing
            while z[j + 1] < xq:
                j += 1
            d = (q - v[j]) * spacing
            out[line, q] = d * d + row[v[j]]
    return out


def _brute_pass_np(f, spacing, chunk_elems=1 << 22):
    lines, n = f.shape
    idx = np.arange(n)
    d = (idx[:, None] - idx[None, :]) * spacing
    d2 = d * d
    out = np.empty_like(f)
    step = max(1, chunk_elems // (n * n))
    for start in range(0, lines, step):
        block = f[start : start + step]
        out[start : start + step] = (d2[None, :, :] + block[:, None, :]).min(axis=2)
    return out


def squared_edt(sites: np.ndarray, spacing) -> np.ndarray:
    """Squared distance (mm^2) from every voxel center to the nearest site.

    Parameters
    ----------
    sites : ndarray of bool, 3-d
        Voxels the distance is measured to.
    spacing : sequence of 3 floats
        Voxel edge lengths in mm, one per array axis.

    Returns
    -------
    ndarray of float64
        ``inf`` everywhere when ``sites`` is empty.
    """
    sites = np.asarray(sites, dtype=bool)
    f = np.where(sites, 0.0, np.inf)
    one_pass = _envelope_pass_nb if resolve("edt") == "numba" else _brute_pass_np
    for axis in range(sites.ndim):
        moved = np.moveaxis(f, axis, -1)
        shape = moved.shape
        lines = np.ascontiguousarray(moved).reshape(-1, shape[-1])
        done = one_pass(lines, float(spacing[axis]))
        f = np.moveaxis(done.reshape(shape), -1, axis)
    return np.ascontiguousarray(f)
