"""Signed distance fields, multi-planar mask fusion and mask post-processing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels.edt import squared_edt
from .kernels.label import label_components
from .volume import Grid3, GridMismatchError, Mask, resample_array_linear

__all__ = [
    "AmbiguousVoteError",
    "DistanceField",
    "ComponentLabeling",
    "label_mask",
    "signed_edt",
    "fuse_planes",
    "majority_vote",
    "largest_component",
    "CONNECTIVITY",
]

CONNECTIVITY = 26


class AmbiguousVoteError(ValueError):
    pass


@dataclass(frozen=True)
class DistanceField:
    """Signed distance in mm between voxel centers: negative inside, positive outside."""

    grid: Grid3
    values: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class ComponentLabeling:
    grid: Grid3
    labels: np.ndarray = field(repr=False)  # int32, 0 background, 1..k components
    counts: np.ndarray  # voxels per component, label i + 1 at index i

    @property
    def n_components(self) -> int:
        return int(self.counts.size)


def label_mask(m: Mask, connectivity: int = CONNECTIVITY) -> ComponentLabeling:
    labels, counts = label_components(m.foreground, connectivity)
    return ComponentLabeling(m.grid, labels, counts)


def signed_edt(m: Mask) -> DistanceField:
    """Exact Euclidean distance from each voxel center to the nearest center of the other class.

    Inside voxels get the negated distance.  When one class is absent its
    distance is capped at the grid diagonal, so an empty mask is ``+diag``
    everywhere and a full one ``-diag``.
    """
    fg = m.foreground
    cap = m.grid.diagonal()
    d_out = np.sqrt(squared_edt(fg, m.grid.spacing))
    d_in = np.sqrt(squared_edt(~fg, m.grid.spacing))
    values = np.where(fg, -np.minimum(d_in, cap), np.minimum(d_out, cap))
    return DistanceField(m.grid, values)


def fuse_planes(masks: Sequence[Mask], target: Grid3) -> Mask:
    """Average the linearly resampled signed distance fields and keep voxels below zero.

    A voxel whose average is exactly zero is background.  The fields are
    sorted per voxel before summing, so the result does not depend on the
    order of ``masks``.
    """
    masks = list(masks)
    if not masks:
        raise ValueError("fuse_planes needs at least one mask")
    fields = np.stack([resample_array_linear(signed_edt(m).values, m.grid, target) for m in masks])
    fields.sort(axis=0)
    mean = fields.sum(axis=0) / len(masks)
    return Mask(target, mean < 0)


def majority_vote(masks: Sequence[Mask]) -> Mask:
    """Foreground where more than half of an odd number of masks agree."""
    masks = list(masks)
    if not masks or len(masks) % 2 == 0:
        raise AmbiguousVoteError(f"majority vote needs an odd number of masks, got {len(masks)}")
    grid = masks[0].grid
    if any(m.grid != grid for m in masks[1:]):
        raise GridMismatchError("majority vote inputs must share one grid")
    votes = np.sum([m.labels for m in masks], axis=0, dtype=np.int32)
    return Mask(grid, 2 * votes > len(masks))


def largest_component(m: Mask, connectivity: int = CONNECTIVITY) -> Mask:
    """Keep only the biggest connected component.

    Ties go to the component containing the smallest C-order linear index.
    An empty mask is returned unchanged.
    """
    comp = label_mask(m, connectivity)
    if comp.n_components == 0:
        return Mask(m.grid, m.labels.copy())
    # labels are numbered by first raster voxel, so argmax's first hit is the tie winner
    keep = int(np.argmax(comp.counts)) + 1
    return Mask(m.grid, comp.labels == keep)
