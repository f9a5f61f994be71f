"""Voxel-grid containers and resampling/smoothing/differentiation primitives.

Conventions used throughout the package:

* arrays are indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``; vector
  fields carry a leading component axis, shape ``(3, nx, ny, nz)``;
* displacements are stored in voxel (index) units and realize the mapping
  ``phi(z) = z - g(z)``: warping samples the input at ``z - g(z)``;
* out-of-range sample coordinates clamp to the nearest boundary voxel;
* scalar data is float32, masks are uint8 with values in {0, 1}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class DefieldError(Exception):
    """Base class for errors raised by this package."""


class GeometryMismatch(DefieldError):
    """Two grid objects that must share geometry do not."""


class ValidationError(DefieldError):
    """A container invariant or parameter precondition is violated."""


@dataclass(frozen=True)
class GridGeometry:
    """Voxel counts, spacing (mm) and origin (mm) of a regular 3-D grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValidationError("geometry fields must have three entries")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if any(d < 2 for d in self.dims):
            raise ValidationError(f"all dims must be >= 2, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"all spacings must be > 0, got {self.spacing}")

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """Scalar intensity grid (float32)."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != self.geometry.dims:
            raise ValidationError(
                f"volume data shape {arr.shape} != dims {self.geometry.dims}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr.copy() if arr is self.data else arr))

    @staticmethod
    def full(geometry: GridGeometry, value: float) -> "Volume":
        return Volume(geometry, np.full(geometry.dims, value, dtype=np.float32))


@dataclass(frozen=True)
class Mask:
    """Binary label grid (uint8, values 0/1)."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.uint8)
        if arr.shape != self.geometry.dims:
            raise ValidationError(
                f"mask data shape {arr.shape} != dims {self.geometry.dims}")
        if arr.max(initial=0) > 1:
            raise ValidationError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _freeze(arr.copy() if arr is self.data else arr))

    def volume_voxels(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class VectorField:
    """Per-voxel 3-vector grid (float32, voxel units), shape (3, nx, ny, nz)."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != (3, *self.geometry.dims):
            raise ValidationError(
                f"field data shape {arr.shape} != (3, *{self.geometry.dims})")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("field contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr.copy() if arr is self.data else arr))

    @staticmethod
    def zero(geometry: GridGeometry) -> "VectorField":
        return VectorField(geometry, np.zeros((3, *geometry.dims), dtype=np.float32))

    def max_norm(self) -> float:
        return float(np.sqrt((self.data.astype(np.float64) ** 2).sum(axis=0).max()))

    def mean_norm(self) -> float:
        return float(np.sqrt((self.data.astype(np.float64) ** 2).sum(axis=0)).mean())


def require_same_geometry(a, b) -> None:
    if a.geometry != b.geometry:
        raise GeometryMismatch(
            f"geometry mismatch: {a.geometry} vs {b.geometry}")


def index_coords(geometry: GridGeometry) -> np.ndarray:
    """Identity coordinate grid, shape (3, nx, ny, nz), float32."""
    return np.indices(geometry.dims, dtype=np.float32)


def _sample_many(data: np.ndarray, coords: np.ndarray, order: int) -> np.ndarray:
    # mode="nearest" extends edges, which for order<=1 equals clamping the
    # coordinates to [0, dim-1].
    return ndimage.map_coordinates(data, coords, order=order, mode="nearest")


def trilinear_sample(vol: Volume, p) -> float:
    """Trilinear blend of the 8 voxels around continuous index coordinate p.

    Coordinates outside [0, dim-1] clamp to the boundary.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise ValidationError(f"expected a 3-coordinate, got shape {p.shape}")
    out = _sample_many(vol.data, p.reshape(3, 1), order=1)
    return float(out[0])


def warp_volume(vol: Volume, disp: VectorField) -> Volume:
    """Resample vol through the mapping z - g(z) (trilinear)."""
    require_same_geometry(vol, disp)
    coords = index_coords(vol.geometry) - disp.data
    return Volume(vol.geometry, _sample_many(vol.data, coords, order=1))


def warp_mask(mask: Mask, disp: VectorField) -> Mask:
    """Resample a binary mask through z - g(z) (nearest neighbor)."""
    require_same_geometry(mask, disp)
    coords = index_coords(mask.geometry) - disp.data
    return Mask(mask.geometry, _sample_many(mask.data, coords, order=0))


def gradient_central(vol: Volume) -> VectorField:
    """Per-axis derivative in index units: central differences at interior
    voxels, one-sided on the faces."""
    grads = np.gradient(vol.data.astype(np.float64), axis=(0, 1, 2))
    return VectorField(vol.geometry, np.stack(grads).astype(np.float32))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at radius ceil(3*sigma), renormalized to
    sum 1. sigma=0 yields the identity kernel [1]."""
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return arr.copy()
    kernel = gaussian_kernel1d(sigma)
    out = arr
    for axis in range(arr.ndim):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="nearest")
    return out


def gaussian_smooth(obj, sigma: float):
    """Separable Gaussian smoothing of a Volume or (per component) a
    VectorField; sigma is in voxels and sigma=0 is the identity."""
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    if isinstance(obj, Volume):
        return Volume(obj.geometry, _smooth_array(obj.data, sigma))
    if isinstance(obj, VectorField):
        comps = [_smooth_array(obj.data[c], sigma) for c in range(3)]
        return VectorField(obj.geometry, np.stack(comps))
    raise ValidationError(f"cannot smooth object of type {type(obj).__name__}")


def downsample2(vol: Volume) -> Volume:
    """Halve each dimension: Gaussian pre-smooth (sigma=1) then 2x2x2 block
    means. Coarse voxel c corresponds to fine voxel 2c; spacing doubles,
    origin is kept."""
    dims = vol.geometry.dims
    if any(d < 4 for d in dims):
        raise ValidationError(f"downsample2 needs dims >= 4, got {dims}")
    smoothed = _smooth_array(vol.data, 1.0)
    nx, ny, nz = (d // 2 for d in dims)
    trimmed = smoothed[: 2 * nx, : 2 * ny, : 2 * nz]
    blocks = trimmed.reshape(nx, 2, ny, 2, nz, 2)
    coarse = blocks.mean(axis=(1, 3, 5))
    geom = GridGeometry(
        (nx, ny, nz),
        tuple(2.0 * s for s in vol.geometry.spacing),
        vol.geometry.origin,
    )
    return Volume(geom, coarse)


def upsample_field(field: VectorField, target: GridGeometry) -> VectorField:
    """Trilinearly interpolate a displacement field onto a finer grid and
    double the displacement magnitudes (voxel units rescale with the grid).

    Inverse of the downsample2 index convention: fine voxel f samples the
    coarse field at f/2.
    """
    coords = index_coords(target) * 0.5
    comps = [2.0 * _sample_many(field.data[c], coords, order=1) for c in range(3)]
    return VectorField(target, np.stack(comps))
