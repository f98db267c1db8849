"""Overlap and surface-distance metrics, regional evaluation and the signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .volume import GridMismatchError, Mask

__all__ = [
    "EmptySurfaceError",
    "DegeneratePartitionError",
    "UndefinedTestError",
    "SurfacePointSet",
    "RegionPartition",
    "RegionMetrics",
    "MetricsReport",
    "dsc",
    "surface_points",
    "directed_distances",
    "abd",
    "hd95",
    "partition_regions",
    "regional_metrics",
    "WilcoxonResult",
    "wilcoxon_signed_rank",
    "REGIONS",
]

REGIONS = ("whole", "apex", "mid", "base")
EXACT_MAX_N = 25


class EmptySurfaceError(ValueError):
    pass


class DegeneratePartitionError(ValueError):
    pass


class UndefinedTestError(ValueError):
    pass


def _same_grid(x: Mask, y: Mask) -> None:
    if x.grid != y.grid:
        raise GridMismatchError(f"masks live on different grids: {x.grid} vs {y.grid}")


def dsc(x: Mask, y: Mask) -> float:
    """Dice coefficient ``2|X & Y| / (|X| + |Y|)``; two empty masks score 1."""
    _same_grid(x, y)
    a, b = x.foreground, y.foreground
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass(frozen=True)
class SurfacePointSet:
    points: np.ndarray = field(repr=False)  # (k, 3) world coordinates, mm

    def __len__(self) -> int:
        return len(self.points)


def surface_mask(fg: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face neighbour (outside counts as background)."""
    padded = np.pad(fg, 1, constant_values=False)
    interior = fg.copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return fg & ~interior


def surface_points(m: Mask) -> SurfacePointSet:
    fg = m.foreground
    if not fg.any():
        raise EmptySurfaceError("mask is empty; its surface is undefined")
    idx = np.argwhere(surface_mask(fg))
    return SurfacePointSet(m.grid.index_to_world(idx))


def directed_distances(xs: SurfacePointSet, ys: SurfacePointSet) -> np.ndarray:
    """Exact distance from each point of ``xs`` to its nearest point in ``ys``."""
    if len(xs) == 0 or len(ys) == 0:
        raise EmptySurfaceError("distance metrics need two nonempty point sets")
    d, _ = cKDTree(ys.points).query(xs.points, k=1)
    return np.asarray(d, dtype=np.float64)


def abd(xs: SurfacePointSet, ys: SurfacePointSet) -> float:
    """Average boundary distance: both directed sums over ``|X| + |Y|``."""
    dxy = directed_distances(xs, ys)
    dyx = directed_distances(ys, xs)
    return float((dxy.sum() + dyx.sum()) / (len(xs) + len(ys)))


def hd95(xs: SurfacePointSet, ys: SurfacePointSet) -> float:
    """Larger of the two directed 95th percentiles (linear interpolation)."""
    dxy = directed_distances(xs, ys)
    dyx = directed_distances(ys, xs)
    return float(max(np.percentile(dxy, 95), np.percentile(dyx, 95)))


@dataclass(frozen=True)
class RegionPartition:
    """Half-open slice ranges along the last axis."""

    apex: tuple[int, int]
    mid: tuple[int, int]
    base: tuple[int, int]

    def range(self, region: str) -> tuple[int, int]:
        return getattr(self, region)


def partition_regions(reference: Mask, apex_at_low_index: bool = True) -> RegionPartition:
    """Split the reference's slice extent into three near-equal runs.

    With ``L = 3q + r`` slices every region gets ``q``; the ``r`` leftover
    slices go to apex first, then base.  ``apex_at_low_index`` says which end
    of the slice axis is the apex.
    """
    zs = np.nonzero(reference.foreground.any(axis=(0, 1)))[0]
    if zs.size == 0:
        raise DegeneratePartitionError("reference mask is empty")
    z0, z1 = int(zs[0]), int(zs[-1]) + 1
    length = z1 - z0
    if length < 3:
        raise DegeneratePartitionError(f"reference spans {length} slices; three regions need at least 3")
    q, r = divmod(length, 3)
    n_apex, n_mid, n_base = q + (r >= 1), q, q + (r >= 2)
    if apex_at_low_index:
        apex = (z0, z0 + n_apex)
        mid = (apex[1], apex[1] + n_mid)
        base = (mid[1], z1)
    else:
        base = (z0, z0 + n_base)
        mid = (base[1], base[1] + n_mid)
        apex = (mid[1], z1)
    return RegionPartition(apex, mid, base)


@dataclass(frozen=True)
class RegionMetrics:
    region: str
    dsc: float
    abd_mm: float
    hd95_mm: float
    flags: str = ""


@dataclass(frozen=True)
class MetricsReport:
    case: str
    regions: tuple[RegionMetrics, ...]

    def get(self, region: str) -> RegionMetrics:
        for r in self.regions:
            if r.region == region:
                return r
        raise KeyError(region)


def _crop_z(m: Mask, lo: int, hi: int) -> Mask:
    g = m.grid
    origin = list(g.origin)
    origin[2] += lo * g.spacing[2]
    return Mask(g.with_dims((g.dims[0], g.dims[1], hi - lo), origin), m.labels[:, :, lo:hi])


def _metrics(region: str, pred: Mask, ref: Mask) -> RegionMetrics:
    score = dsc(pred, ref)
    empty_p, empty_r = not pred.foreground.any(), not ref.foreground.any()
    if empty_p or empty_r:
        flags = "|".join(f for f, on in (("empty_prediction", empty_p), ("empty_reference", empty_r)) if on)
        return RegionMetrics(region, score, math.nan, math.nan, flags)
    sp, sr = surface_points(pred), surface_points(ref)
    return RegionMetrics(region, score, abd(sp, sr), hd95(sp, sr))


def regional_metrics(pred: Mask, ref: Mask, case: str = "", apex_at_low_index: bool = True) -> MetricsReport:
    """Whole-gland and apex/mid/base metrics.

    Each region crops both masks to its slice range of the reference, and
    surfaces are taken inside that slab (cut faces count as surface).
    Undefined distances are NaN with a flag naming the empty side.
    """
    _same_grid(pred, ref)
    rows = [_metrics("whole", pred, ref)]
    part = partition_regions(ref, apex_at_low_index)
    for region in REGIONS[1:]:
        lo, hi = part.range(region)
        rows.append(_metrics(region, _crop_z(pred, lo, hi), _crop_z(ref, lo, hi)))
    return MetricsReport(case, tuple(rows))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of ranks of the positive differences
    p_value: float
    alternative: str
    n: int
    method: str


def _exact_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments reaching each doubled rank sum."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float] | None = None, alternative: str = "two-sided") -> WilcoxonResult:
    """Signed-rank test of the paired differences ``a - b``.

    ``alternative`` is ``"two-sided"``, ``"greater"`` (``a`` tends to exceed
    ``b``) or ``"less"``.  Zero differences are dropped; tied magnitudes get
    average ranks.  Up to 25 nonzero pairs the null distribution is
    enumerated exactly; beyond that a normal approximation with tie and
    continuity corrections is used.  The two-sided p-value doubles the
    smaller tail and is capped at 1.
    """
    a = np.asarray(a, dtype=np.float64)
    d = a if b is None else a - np.asarray(b, dtype=np.float64)
    if b is not None and np.shape(a) != np.shape(b):
        raise ValueError("paired samples must have equal length")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise UndefinedTestError("all paired differences are zero")
    if n < 5:
        raise UndefinedTestError(f"need at least 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    doubled = np.rint(2 * ranks).astype(np.int64)
    w_plus2 = int(doubled[d > 0].sum())
    if n <= EXACT_MAX_N:
        counts = _exact_counts(doubled)
        denom = 2**n
        upper = int(sum(counts[w_plus2:]))
        lower = int(sum(counts[: w_plus2 + 1]))
        p_greater, p_less = upper / denom, lower / denom
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, t = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(t**3 - t)) / 48.0
        sd = math.sqrt(var)
        w = w_plus2 / 2.0
        p_greater = 0.5 * math.erfc(((w - mean - 0.5) / sd) / math.sqrt(2))
        p_less = 0.5 * math.erfc((-(w - mean + 0.5) / sd) / math.sqrt(2))
        method = "normal"
    if alternative == "greater":
        p = p_greater
    elif alternative == "less":
        p = p_less
    else:
        p = min(1.0, 2.0 * min(p_greater, p_less))
    return WilcoxonResult(w_plus2 / 2.0, float(min(p, 1.0)), alternative, n, method)
