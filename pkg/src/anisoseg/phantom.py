"""Synthetic gland phantoms and thick-slice acquisitions of them."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .network import PLANE_THICK_AXIS
from .volume import Grid3, Mask, Volume

__all__ = [
    "PhantomSpecError",
    "PhantomSpec",
    "AcquisitionSpec",
    "generate_phantom",
    "simulate_acquisition",
    "box_weights",
    "acquisition_grid",
]

N_WAVES = 6


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Deformed-ellipsoid gland in a cubic isotropic field of view.

    ``deformation_mm`` bounds the radial displacement of the surface.
    ``texture_sigma`` scales a smooth correlated noise field added everywhere.
    """

    fov_voxels: int = 64
    spacing_mm: float = 0.5
    radii_mm: tuple[float, float, float] = (10.0, 8.0, 7.0)
    radius_jitter: float = 0.0  # relative, drawn per axis
    center_jitter_mm: float = 0.0
    deformation_mm: float = 1.0
    gland_mean: float = 1.0
    background_mean: float = 0.3
    texture_sigma: float = 0.1
    texture_scale_mm: float = 1.0
    seed: int = 0
    margin_voxels: int = 2

    def __post_init__(self):
        if self.fov_voxels < 1 or self.spacing_mm <= 0:
            raise PhantomSpecError("field of view and spacing must be positive")
        if min(self.radii_mm) <= 0 or self.deformation_mm < 0 or not 0 <= self.radius_jitter < 1:
            raise PhantomSpecError("radii must be positive, deformation and jitter nonnegative")
        # worst case: largest jittered radii, smallest mean radius scaling the relative deformation
        radii = np.asarray(self.radii_mm)
        rel = self.deformation_mm / (radii.mean() * (1 - self.radius_jitter))
        reach = radii * (1 + self.radius_jitter) * (1 + rel) + self.center_jitter_mm
        half = self.fov_voxels * self.spacing_mm / 2 - (self.margin_voxels + 0.5) * self.spacing_mm
        if np.any(reach > half):
            raise PhantomSpecError(f"gland reach {reach.max():.2f} mm exceeds the field of view half-width {half:.2f} mm minus margin")

    @property
    def grid(self) -> Grid3:
        n = self.fov_voxels
        return Grid3((n, n, n), (self.spacing_mm,) * 3)

    def with_seed(self, seed: int) -> "PhantomSpec":
        return PhantomSpec(**{**asdict(self), "radii_mm": tuple(self.radii_mm), "seed": seed})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "radii_mm" in d:
            d["radii_mm"] = tuple(d["radii_mm"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _smooth_noise(dims, sigma_vox, rng):
    field_ = ndimage.gaussian_filter(rng.standard_normal(dims), sigma_vox, mode="wrap")
    std = field_.std()
    return field_ / std if std > 0 else field_


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator | None = None) -> tuple[Volume, Mask]:
    """Isotropic image and ground-truth mask.

    The surface is ``|(x - c) / r| = 1 + delta(x)`` with ``delta`` a sum of
    low-frequency plane waves whose amplitude is ``deformation_mm`` divided
    by the mean radius.  With zero deformation the mask is exactly the set
    of voxel centers inside the ellipsoid.  ``rng`` defaults to one seeded
    from ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    grid = spec.grid
    center = (grid.lower + grid.upper) / 2
    center = center + rng.uniform(-1, 1, 3) * spec.center_jitter_mm
    radii = np.asarray(spec.radii_mm) * (1 + rng.uniform(-1, 1, 3) * spec.radius_jitter)
    axes = [grid.centers(a) - center[a] for a in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    level = (x / radii[0]) ** 2 + (y / radii[1]) ** 2 + (z / radii[2]) ** 2
    directions = rng.standard_normal((N_WAVES, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    freqs = rng.uniform(0.5, 1.5, N_WAVES) / (2 * radii.mean())  # cycles per mm
    phases = rng.uniform(0, 2 * np.pi, N_WAVES)
    weights = rng.uniform(0.5, 1.0, N_WAVES)
    weights /= weights.sum()
    if spec.deformation_mm > 0:
        amp = spec.deformation_mm / radii.mean()
        delta = np.zeros(grid.dims)
        for d, f, ph, w in zip(directions, freqs, phases, weights):
            delta += w * np.cos(2 * np.pi * f * (d[0] * x + d[1] * y + d[2] * z) + ph)
        inside = level <= (1 + amp * delta) ** 2
    else:
        inside = level <= 1.0
    texture = _smooth_noise(grid.dims, spec.texture_scale_mm / spec.spacing_mm, rng)
    image = np.where(inside, spec.gland_mean, spec.background_mean) + spec.texture_sigma * texture
    return Volume(grid, image.astype(np.float32)), Mask(grid, inside)


@dataclass(frozen=True)
class AcquisitionSpec:
    orientation: str = "axial"
    in_plane_mm: float = 0.5
    thickness_mm: float = 2.0
    noise_sigma: float = 0.0
    translation_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation_deg: float = 0.0  # about the thick axis

    def __post_init__(self):
        if self.orientation not in PLANE_THICK_AXIS:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if self.in_plane_mm <= 0 or self.thickness_mm < self.in_plane_mm:
            raise ValueError("slice thickness must be at least the in-plane spacing")

    @property
    def thick_axis(self) -> int:
        return PLANE_THICK_AXIS[self.orientation]

    def spacing(self) -> tuple[float, float, float]:
        return tuple(self.thickness_mm if a == self.thick_axis else self.in_plane_mm for a in range(3))


def acquisition_grid(iso: Grid3, acq: AcquisitionSpec) -> Grid3:
    """Largest grid of the acquisition spacing centered inside the iso field of view."""
    sp = acq.spacing()
    dims, origin = [], []
    for a in range(3):
        n = max(1, int(math.floor(iso.extent[a] / sp[a] + 1e-9)))
        lo = iso.lower[a] + (iso.extent[a] - n * sp[a]) / 2
        dims.append(n)
        origin.append(lo + sp[a] / 2)
    return Grid3(tuple(dims), sp, tuple(origin))


def box_weights(src: Grid3, target: Grid3, axis: int) -> np.ndarray:
    """Row-stochastic matrix averaging source voxels over each target voxel's extent.

    Entry ``(i, j)`` is the overlap of source voxel ``j`` with target voxel
    ``i`` (both as boxes) divided by the covered length.
    """
    s_lo = src.centers(axis) - src.spacing[axis] / 2
    s_hi = s_lo + src.spacing[axis]
    t_lo = target.centers(axis) - target.spacing[axis] / 2
    t_hi = t_lo + target.spacing[axis]
    overlap = np.minimum(t_hi[:, None], s_hi[None]) - np.maximum(t_lo[:, None], s_lo[None])
    overlap[overlap < 1e-9 * src.spacing[axis]] = 0.0  # touching faces, not overlap
    covered = overlap.sum(axis=1, keepdims=True)
    if np.any(covered <= 0):
        raise ValueError("target voxel outside the source field")
    return overlap / covered


def simulate_acquisition(iso: Volume, acq: AcquisitionSpec, rng: np.random.Generator | None = None) -> Volume:
    """Thick-slice view of ``iso``: rigid motion, box-profile averaging, then Gaussian noise."""
    if max(iso.grid.spacing) > acq.in_plane_mm + 1e-12:
        raise ValueError("isotropic spacing must not exceed the in-plane spacing")
    data = iso.samples.astype(np.float64)
    if acq.rotation_deg or any(acq.translation_mm):
        data = _rigid(data, iso.grid, acq)
    target = acquisition_grid(iso.grid, acq)
    for a in range(3):
        w = box_weights(iso.grid, target, a)
        if w.shape[0] == w.shape[1] and np.array_equal(w, np.eye(w.shape[0])):
            continue
        data = np.moveaxis(np.tensordot(w, np.moveaxis(data, a, 0), axes=(1, 0)), 0, a)
    if acq.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise needs an rng")
        data = data + rng.normal(0.0, acq.noise_sigma, data.shape)
    return Volume(target, data.astype(np.float32))


def _rigid(data: np.ndarray, grid: Grid3, acq: AcquisitionSpec) -> np.ndarray:
    """Resample ``data`` after moving the object by the acquisition's translation and rotation."""
    t = acq.thick_axis
    a, b = [ax for ax in range(3) if ax != t]
    theta = math.radians(acq.rotation_deg)
    rot = np.eye(3)
    rot[a, a] = rot[b, b] = math.cos(theta)
    rot[a, b], rot[b, a] = -math.sin(theta), math.sin(theta)
    sp = np.asarray(grid.spacing)
    center_idx = (np.asarray(grid.dims) - 1) / 2
    shift_idx = np.asarray(acq.translation_mm) / sp
    # output index o samples input index R^T (o - c - s) + c in isotropic voxels
    m = rot.T
    offset = center_idx - m @ (center_idx + shift_idx)
    return ndimage.affine_transform(data, m, offset=offset, order=1, mode="nearest")
