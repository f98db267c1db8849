"""Axis-aligned 3D grids in physical space and the preprocessing that acts on them.

A voxel's value lives at its center.  ``origin`` is the world position (mm)
of the center of voxel ``(0, 0, 0)``; voxel ``i`` along axis ``a`` sits at
``origin[a] + i * spacing[a]`` and covers half a spacing on either side.
Arrays are indexed ``[i0, i1, i2]`` in the same axis order as the grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "InvalidGridError",
    "NoOverlapError",
    "GridMismatchError",
    "Grid3",
    "Volume",
    "Mask",
    "resample_linear",
    "resample_nearest",
    "resample_array_linear",
    "intersect_grids",
    "crop_or_pad",
    "normalize_percentile",
    "random_crop",
    "write_vraw",
    "read_vraw",
]

# continuous source indices closer than this to an integer are snapped onto it
_SNAP = 1e-9


class InvalidGridError(ValueError):
    pass


class NoOverlapError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


def _triple(values, kind, name):
    try:
        out = tuple(kind(v) for v in values)
    except TypeError:
        raise InvalidGridError(f"{name} must be a sequence of three numbers") from None
    if len(out) != 3:
        raise InvalidGridError(f"{name} must have three components, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid3:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(isinstance(d, float) and not float(d).is_integer() for d in self.dims):
            raise InvalidGridError(f"dims must be integers, got {self.dims}")
        dims = _triple(self.dims, int, "dims")
        spacing = _triple(self.spacing, float, "spacing")
        origin = _triple(self.origin, float, "origin")
        if any(d < 1 for d in dims):
            raise InvalidGridError(f"dims must all be >= 1, got {dims}")
        if any(not (s > 0 and math.isfinite(s)) for s in spacing):
            raise InvalidGridError(f"spacing must be positive and finite, got {spacing}")
        if any(not math.isfinite(o) for o in origin):
            raise InvalidGridError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self) -> tuple[float, float, float]:
        """World length covered per axis (mm)."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    @property
    def lower(self) -> np.ndarray:
        """World coordinate of the low face of the grid, per axis."""
        return np.asarray(self.origin) - 0.5 * np.asarray(self.spacing)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + np.asarray(self.extent)

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def index_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_index(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def with_dims(self, dims, origin=None) -> "Grid3":
        return Grid3(tuple(dims), self.spacing, self.origin if origin is None else tuple(origin))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing_mm": list(self.spacing), "origin_mm": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid3":
        return cls(tuple(d["dims"]), tuple(d.get("spacing_mm", (1, 1, 1))), tuple(d.get("origin_mm", (0, 0, 0))))


def _check_array(grid: Grid3, arr: np.ndarray, what: str) -> None:
    if arr.shape != grid.dims:
        raise GridMismatchError(f"{what} shape {arr.shape} does not match grid dims {grid.dims}")


@dataclass(frozen=True)
class Volume:
    """Scalar samples on a grid (float32 or float64)."""

    grid: Grid3
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.samples)
        if not np.issubdtype(s.dtype, np.floating):
            s = s.astype(np.float32)
        _check_array(self.grid, s, "samples")
        object.__setattr__(self, "samples", s)


@dataclass(frozen=True)
class Mask:
    """Binary labels on a grid, stored as uint8 with values 0 and 1 only."""

    grid: Grid3
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.dtype != bool:
            if not np.isin(lab, (0, 1)).all():
                raise ValueError("mask labels must be 0 or 1")
        lab = lab.astype(np.uint8)
        _check_array(self.grid, lab, "labels")
        object.__setattr__(self, "labels", lab)

    @property
    def foreground(self) -> np.ndarray:
        return self.labels.astype(bool)

    def count(self) -> int:
        return int(self.labels.sum(dtype=np.int64))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _source_coords(src: Grid3, target: Grid3, axis: int) -> np.ndarray:
    """Continuous source index of every target center along ``axis``, clamped to the field."""
    u = (target.centers(axis) - src.origin[axis]) / src.spacing[axis]
    r = np.round(u)
    u = np.where(np.abs(u - r) < _SNAP, r, u)
    return np.clip(u, 0.0, src.dims[axis] - 1)


def resample_array_linear(arr: np.ndarray, src: Grid3, target: Grid3) -> np.ndarray:
    """Trilinear resampling of a raw float array, computed in float64.

    Separable: one linear pass per axis.  Out-of-field points take the border value.
    """
    out = np.asarray(arr, dtype=np.float64)
    if src == target:
        return out.copy()
    for axis in range(3):
        u = _source_coords(src, target, axis)
        i0 = np.floor(u).astype(np.intp)
        i1 = np.minimum(i0 + 1, src.dims[axis] - 1)
        t = u - i0
        shape = [1, 1, 1]
        shape[axis] = -1
        t = t.reshape(shape)
        lo = np.take(out, i0, axis=axis)
        hi = np.take(out, i1, axis=axis)
        # exact at t == 0 so aligned grids reproduce source values bitwise
        out = np.where(t == 0.0, lo, lo + t * (hi - lo))
    return out


def resample_linear(src: Volume, target: Grid3) -> Volume:
    """Trilinear interpolation of ``src`` at every voxel center of ``target``.

    >>> g = Grid3((2, 1, 1))
    >>> v = Volume(g, np.array([0.0, 1.0]).reshape(2, 1, 1))
    >>> resample_linear(v, Grid3((3, 1, 1), (0.5, 1, 1), (-0.25, 0, 0))).samples.ravel()
    array([0.  , 0.25, 0.75])
    """
    if not isinstance(target, Grid3):
        raise InvalidGridError("target must be a Grid3")
    if src.grid == target:
        return Volume(target, src.samples.copy())
    out = resample_array_linear(src.samples, src.grid, target)
    return Volume(target, out.astype(src.samples.dtype))


def resample_nearest(src: Mask, target: Grid3) -> Mask:
    """Label of the nearest source voxel center (halfway ties go to the higher index)."""
    if not isinstance(target, Grid3):
        raise InvalidGridError("target must be a Grid3")
    if src.grid == target:
        return Mask(target, src.labels.copy())
    idx = [np.floor(_source_coords(src.grid, target, a) + 0.5).astype(np.intp) for a in range(3)]
    lab = src.labels[np.ix_(*idx)]
    return Mask(target, lab)


def intersect_grids(grids: Sequence[Grid3], spacing=None) -> Grid3:
    """Axis-aligned grid covering the common world extent of ``grids``.

    ``spacing`` defaults to the finest spacing per axis among the inputs.  The
    returned voxels are centered inside the intersection; dims are
    ``floor(extent / spacing)`` (at least 1).
    """
    grids = list(grids)
    if not grids:
        raise InvalidGridError("intersect_grids needs at least one grid")
    lo = np.max([g.lower for g in grids], axis=0)
    hi = np.min([g.upper for g in grids], axis=0)
    if np.any(hi <= lo):
        raise NoOverlapError(f"grids do not overlap: low {lo.tolist()}, high {hi.tolist()}")
    if spacing is None:
        spacing = np.min([g.spacing for g in grids], axis=0)
    spacing = np.asarray(_triple(spacing, float, "spacing"))
    ext = hi - lo
    dims = np.maximum(np.floor(ext / spacing + 1e-9).astype(int), 1)
    origin = lo + 0.5 * (ext - dims * spacing) + 0.5 * spacing
    return Grid3(tuple(int(d) for d in dims), tuple(spacing.tolist()), tuple(origin.tolist()))


# ---------------------------------------------------------------------------
# cropping and intensity normalization
# ---------------------------------------------------------------------------


def _crop_pad_array(arr, target_dims, fill):
    slices, pads, shift = [], [], []
    for n, t in zip(arr.shape, target_dims):
        if t <= n:
            start = (n - t) // 2
            slices.append(slice(start, start + t))
            pads.append((0, 0))
            shift.append(start)
        else:
            lo = (t - n) // 2
            slices.append(slice(None))
            pads.append((lo, t - n - lo))
            shift.append(-lo)
    out = arr[tuple(slices)]
    if any(p != (0, 0) for p in pads):
        out = np.pad(out, pads, mode="constant", constant_values=fill)
    return np.ascontiguousarray(out), shift


def crop_or_pad(v, target_dims, fill: float = 0.0):
    """Center crop or symmetric pad to ``target_dims``; odd remainders go to the high side.

    Works on :class:`Volume` and :class:`Mask`.  The origin moves so retained
    voxels keep their world coordinates.
    """
    target_dims = _triple(target_dims, int, "target_dims")
    if any(t < 1 for t in target_dims):
        raise InvalidGridError(f"target_dims must be >= 1, got {target_dims}")
    arr = v.samples if isinstance(v, Volume) else v.labels
    if isinstance(v, Mask) and fill not in (0, 1):
        raise ValueError("mask fill must be 0 or 1")
    out, shift = _crop_pad_array(arr, target_dims, fill)
    grid = v.grid.with_dims(target_dims, v.grid.index_to_world(shift))
    return type(v)(grid, out)


def normalize_percentile(v: Volume, p_lo: float = 1.0, p_hi: float = 99.0) -> Volume:
    """Clamp to the ``p_lo``/``p_hi`` percentiles, then map that range onto [0, 1].

    Percentiles interpolate linearly between order statistics.  A volume whose
    two percentiles coincide maps to all zeros.
    """
    x = v.samples.astype(np.float64)
    a, b = np.percentile(x, [p_lo, p_hi])
    if b <= a:
        return Volume(v.grid, np.zeros_like(v.samples))
    out = (np.clip(x, a, b) - a) / (b - a)
    return Volume(v.grid, np.clip(out, 0.0, 1.0).astype(v.samples.dtype))


def random_crop(vols: Sequence[Volume], mask: Mask, size, rng: np.random.Generator):
    """Crop all volumes and the mask at one uniformly drawn offset.

    Inputs smaller than ``size`` along an axis are first padded (volumes with
    their minimum, the mask with 0).
    """
    size = _triple(size, int, "size")
    grid = mask.grid
    for v in vols:
        if v.grid != grid:
            raise GridMismatchError("random_crop inputs must share one grid")
    if any(s > d for s, d in zip(size, grid.dims)):
        big = tuple(max(s, d) for s, d in zip(size, grid.dims))
        vols = [crop_or_pad(v, big, float(v.samples.min())) for v in vols]
        mask = crop_or_pad(mask, big, 0)
        grid = mask.grid
    offset = [int(rng.integers(0, d - s + 1)) for d, s in zip(grid.dims, size)]
    sl = tuple(slice(o, o + s) for o, s in zip(offset, size))
    new_grid = grid.with_dims(size, grid.index_to_world(offset))
    out_vols = [Volume(new_grid, np.ascontiguousarray(v.samples[sl])) for v in vols]
    return out_vols, Mask(new_grid, np.ascontiguousarray(mask.labels[sl]))


# ---------------------------------------------------------------------------
# vraw files: JSON header + raw little-endian payload, first axis fastest
# ---------------------------------------------------------------------------


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix == ".json":
        return path, path.with_suffix(".raw")
    return path.with_suffix(".json"), path.with_suffix(".raw")


def write_vraw(path, obj) -> Path:
    """Write a Volume (f32) or Mask (u8).  Returns the header path."""
    header_path, raw_path = _paths(path)
    if isinstance(obj, Volume):
        dtype, payload = "f32", obj.samples.astype("<f4")
    elif isinstance(obj, Mask):
        dtype, payload = "u8", obj.labels.astype("u1")
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as vraw")
    header = obj.grid.to_dict() | {"dtype": dtype, "order": "x-fastest", "payload": raw_path.name}
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2))
    raw_path.write_bytes(payload.ravel(order="F").tobytes())
    return header_path


def read_vraw(path):
    header_path, raw_path = _paths(path)
    header = json.loads(header_path.read_text())
    if header.get("order", "x-fastest") != "x-fastest":
        raise ValueError(f"unsupported voxel order {header['order']!r}")
    grid = Grid3.from_dict(header)
    raw_path = header_path.parent / header.get("payload", raw_path.name)
    dtype = {"f32": "<f4", "u8": "u1"}.get(header["dtype"])
    if dtype is None:
        raise ValueError(f"unsupported vraw dtype {header['dtype']!r}")
    flat = np.frombuffer(raw_path.read_bytes(), dtype=dtype)
    if flat.size != grid.size:
        raise ValueError(f"payload has {flat.size} samples, header expects {grid.size}")
    arr = np.ascontiguousarray(flat.reshape(grid.dims, order="F"))
    if header["dtype"] == "f32":
        return Volume(grid, arr.astype(np.float32))
    return Mask(grid, arr)
