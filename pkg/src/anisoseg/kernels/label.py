"""Connected-component labeling of binary 3D masks.

Labels are numbered in order of each component's first voxel in C-order
raster scan, so label 1 always owns the smallest linear index.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .._backend import njit, resolve

__all__ = ["label_components"]


@njit
def _label_nb(mask, full):
    d0, d1, d2 = mask.shape
    labels = np.zeros((d0, d1, d2), dtype=np.int32)
    stack = np.empty(d0 * d1 * d2, dtype=np.int64)
    counts = [0]
    current = 0
    for i in range(d0):
        for j in range(d1):
            for k in range(d2):
                if not mask[i, j, k] or labels[i, j, k] != 0:
                    continue
                current += 1
                labels[i, j, k] = current
                top = 0
                stack[0] = (i * d1 + j) * d2 + k
                top = 1
                size = 0
                while top > 0:
                    top -= 1
                    flat = stack[top]
                    size += 1
                    a = flat // (d1 * d2)
                    b = (flat // d2) % d1
                    c = flat % d2
                    for da in range(-1, 2):
                        na = a + da
                        if na < 0 or na >= d0:
                            continue
                        for db in range(-1, 2):
                            nb = b + db
                            if nb < 0 or nb >= d1:
                                continue
                            for dc in range(-1, 2):
                                nc = c + dc
                                if nc < 0 or nc >= d2:
                                    continue
                                if not full and abs(da) + abs(db) + abs(dc) != 1:
                                    continue
                                if mask[na, nb, nc] and labels[na, nb, nc] == 0:
                                    labels[na, nb, nc] = current
                                    stack[top] = (na * d1 + nb) * d2 + nc
                                    top += 1
                counts.append(size)
    return labels, np.array(counts[1:], dtype=np.int64)


def label_components(mask: np.ndarray, connectivity: int = 26):
    """Label the foreground of ``mask``.

    Returns ``(labels, counts)`` where ``labels`` is int32 with 0 for
    background and ``counts[i]`` is the voxel count of label ``i + 1``.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = np.ascontiguousarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"expected a 3-d mask, got shape {mask.shape}")
    if resolve("label") == "numba":
        return _label_nb(mask, connectivity == 26)
    structure = ndimage.generate_binary_structure(3, 3 if connectivity == 26 else 1)
    labels, k = ndimage.label(mask, structure=structure)
    counts = np.bincount(labels.ravel(), minlength=k + 1)[1:].astype(np.int64)
    return labels.astype(np.int32), counts
