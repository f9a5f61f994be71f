"""Synthetic volumes, masks and deformation fields with analytic ground truth.

Deformations are radial maps r -> r * (1 + a * exp(-r^2 / 2 sigma^2)) about a
center, optionally composed (a local tumor component plus a wide shallow
background component with the opposite sign, mimicking surrounding tissue
that expands into the space a shrinking tumor vacates). Radial maps have a
closed-form Jacobian determinant and a monotone profile, so their inverses
are computable to 1e-6 voxels by bisection and every generated field can be
checked against analytic truth.

Weekly images are generated by warping the previous week's clean image
through the pullback of the anatomy map; per-week sensor noise is added on
top. A smooth background texture is baked into the week-0 scene so that
registration has structure to lock onto outside the tumor as well.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import volio
from .defanalysis import JacobianMap
from .grids import (
    GridGeometry,
    Mask,
    ValidationError,
    VectorField,
    Volume,
    _smooth_array,
    warp_mask,
    warp_volume,
)

_INV_SQRT_E = math.exp(-0.5)
# bounds keeping r (1 + a exp(-r^2/2s^2)) strictly monotone:
# d/dr = 1 + a e^{-t^2/2} (1 - t^2) with extremes 1 (t=0) and -2 e^{-3/2}
_A_MIN = -1.0
_A_MAX = 0.5 * math.exp(1.5)


@dataclass(frozen=True)
class RadialComponent:
    """One Gaussian bump of a radial map, f(r) = a * exp(-r^2 / 2 sigma^2)."""

    amplitude: float
    width: float

    def __post_init__(self):
        if self.width <= 0:
            raise ValidationError(f"radial width must be > 0, got {self.width}")
        a = self.amplitude
        if abs(a) / self.width >= math.sqrt(math.e):
            raise ValidationError(
                f"|amplitude|/width = {abs(a) / self.width:.3f} >= sqrt(e)")
        if not _A_MIN < a < _A_MAX:
            raise ValidationError(
                f"amplitude {a} outside the monotone range ({_A_MIN}, {_A_MAX:.3f})")

    def factor(self, r):
        return self.amplitude * np.exp(-0.5 * (r / self.width) ** 2)

    def map(self, r):
        return r * (1.0 + self.factor(r))

    def jacobian(self, r):
        """det of the 3-D radial map: (1+f)^2 (1 + f + r f')."""
        f = self.factor(r)
        dmap = 1.0 + f * (1.0 - (r / self.width) ** 2)
        return (1.0 + f) ** 2 * dmap

    @property
    def peak_displacement(self) -> float:
        return abs(self.amplitude) * self.width * _INV_SQRT_E


@dataclass(frozen=True)
class RadialMap:
    """Composition of radial components, applied first-to-last."""

    components: tuple[RadialComponent, ...]

    def map(self, r):
        out = np.asarray(r, dtype=np.float64)
        for comp in self.components:
            out = comp.map(out)
        return out

    def jacobian(self, r):
        r = np.asarray(r, dtype=np.float64)
        out = np.ones_like(r)
        for comp in self.components:
            out = out * comp.jacobian(r)
            r = comp.map(r)
        return out

    @property
    def peak_displacement(self) -> float:
        return sum(c.peak_displacement for c in self.components)

    def inverse(self, rho, tol: float = 1e-6):
        """Solve map(r) = rho by bisection on the monotone profile."""
        rho = np.asarray(rho, dtype=np.float64)
        lo = np.zeros_like(rho)
        hi = np.full_like(rho, float(rho.max(initial=0.0)) + self.peak_displacement + 1.0)
        span = float(hi.flat[0]) if hi.size else 0.0
        iterations = max(1, math.ceil(math.log2(max(span / tol, 2.0))))
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            below = self.map(mid) < rho
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)


def _radius_grid(grid: GridGeometry, center) -> tuple[np.ndarray, np.ndarray]:
    coords = np.indices(grid.dims, dtype=np.float64)
    offsets = coords - np.asarray(center, dtype=np.float64).reshape(3, 1, 1, 1)
    return offsets, np.sqrt((offsets ** 2).sum(axis=0))


def grid_center(grid: GridGeometry) -> tuple[float, float, float]:
    return tuple((d - 1) / 2.0 for d in grid.dims)


def affine_field(a_matrix, b, grid: GridGeometry) -> tuple[VectorField, float]:
    """Field realizing phi(z) = A (z - c) + c + b about the grid center.

    The analytic Jacobian determinant is det(A) everywhere; A must have
    positive determinant.
    """
    a_matrix = np.asarray(a_matrix, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    det = float(np.linalg.det(a_matrix))
    if det <= 0:
        raise ValidationError(f"affine matrix must have det > 0, got {det}")
    offsets, _ = _radius_grid(grid, grid_center(grid))
    mapped = np.einsum("kl,lxyz->kxyz", a_matrix, offsets) + b.reshape(3, 1, 1, 1)
    disp = (offsets - mapped).astype(np.float32)
    return VectorField(grid, disp), det


def radial_gaussian_field(center, amplitude: float, width: float,
                          grid: GridGeometry) -> tuple[VectorField, JacobianMap]:
    """Field realizing the outward radial map r -> r (1 + a e^{-r^2/2s^2})
    about center, together with its analytic Jacobian determinant map.

    Positive amplitude models growth (J > 1 near the center), negative
    shrink.
    """
    comp = RadialComponent(amplitude, width)
    offsets, r = _radius_grid(grid, center)
    disp = (-offsets * comp.factor(r)).astype(np.float32)
    jac = comp.jacobian(r).astype(np.float32)
    return VectorField(grid, disp), JacobianMap(grid, jac)


def pullback_field(rm: RadialMap, center, grid: GridGeometry) -> VectorField:
    """Displacement g with z - g(z) = inverse of the radial map.

    This is the forward registration field for an anatomy that evolved by
    rm: warping a week-k image with it produces the week-(k+1) image.
    """
    offsets, r = _radius_grid(grid, center)
    rinv = rm.inverse(r)
    scale = np.ones_like(r)
    nonzero = r > 1e-12
    scale[nonzero] = 1.0 - rinv[nonzero] / r[nonzero]
    return VectorField(grid, (offsets * scale).astype(np.float32))


def pullback_jacobian(rm: RadialMap, center, grid: GridGeometry) -> JacobianMap:
    """Analytic Jacobian of the pullback mapping: 1 / J(map^{-1}(r))."""
    _, r = _radius_grid(grid, center)
    rinv = rm.inverse(r)
    return JacobianMap(grid, (1.0 / rm.jacobian(rinv)).astype(np.float32))


@dataclass(frozen=True)
class PhantomSpec:
    """Configuration of a synthetic multi-week patient course."""

    grid: GridGeometry
    center: tuple[float, float, float] | None = None
    radius: float = 12.0           # initial tumor radius, voxels
    mode: str = "shrink"           # shrink | grow | stable
    amplitude: float = 1.1         # peak displacement per week, voxels
    noise_sd: float = 0.02
    weeks: int = 4
    seed: int = 7

    def __post_init__(self):
        if self.mode not in ("shrink", "grow", "stable"):
            raise ValidationError(f"unknown growth mode {self.mode!r}")
        if self.radius >= min(self.grid.dims) / 3.0:
            raise ValidationError(
                f"radius {self.radius} must be < min dim / 3 = {min(self.grid.dims) / 3:.1f}")
        if self.radius <= 2:
            raise ValidationError("radius must exceed 2 voxels")
        if self.amplitude < 0:
            raise ValidationError("amplitude must be >= 0")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")
        if self.weeks < 2:
            raise ValidationError("a course needs at least 2 weeks")
        if self.center is None:
            object.__setattr__(self, "center", grid_center(self.grid))


# shape constants of the generated scene, relative to the tumor radius
_TUMOR_WIDTH_FACTOR = 0.58     # contraction-zone width vs current radius
_BG_WIDTH_FACTOR = 1.35        # background component width vs initial radius
_BG_AMPLITUDE_FACTOR = -0.13   # background amplitude vs tumor amplitude
_BLOB_WIDTH_FACTOR = 0.70      # intensity blob width vs initial radius
_TEXTURE_SIGMA = 2.5
_TEXTURE_AMPLITUDE = 0.12
_GROW_DELINEATION_MARGIN = 1.5  # voxels/week: delineations over-cover growth

# delineation realism in shrink mode: the drawn contour loses a little
# extra radius each week and carries a few re-drawn angular notches, so the
# reduced region is a solid outer annulus and the newly-grown region comes
# from notch sites the next delineation re-includes (inner, higher J)
_SHRINK_DELINEATION_BIAS = 0.5  # extra voxels of radius removed per week
_NOTCH_COUNT = 3
_NOTCH_DEPTH = 2.2              # voxels below the contour radius
_NOTCH_COS = 0.88               # angular half-width ~28 degrees


@dataclass
class SyntheticWeek:
    volume: Volume
    mask: Mask


@dataclass
class SyntheticCourse:
    spec: PhantomSpec
    weeks: list[SyntheticWeek]
    gt_fields: list[VectorField]       # forward field per consecutive pair
    gt_jacobians: list[JacobianMap]    # analytic Jacobian of each gt field
    radii: list[float]                 # anatomy tumor radius per week

    def write(self, outdir, patient_id: str, recist: str = "NA") -> list[dict]:
        """Write week volumes/masks (and ground truth) under outdir; returns
        manifest rows patient_id,week,volume_path,mask_path,recist."""
        pdir = os.path.join(outdir, patient_id)
        os.makedirs(pdir, exist_ok=True)
        rows = []
        for week, wk in enumerate(self.weeks):
            vol_path = os.path.join(pdir, f"week{week:02d}_vol.vol")
            mask_path = os.path.join(pdir, f"week{week:02d}_mask.vol")
            volio.write_volume(vol_path, wk.volume)
            volio.write_mask(mask_path, wk.mask)
            rows.append({
                "patient_id": patient_id,
                "week": week,
                "volume_path": vol_path,
                "mask_path": mask_path,
                "recist": recist,
            })
        for pair, (fld, jac) in enumerate(zip(self.gt_fields, self.gt_jacobians)):
            volio.write_field(os.path.join(pdir, f"gt_forward{pair:02d}.vol"), fld)
            volio._write(os.path.join(pdir, f"gt_jacobian{pair:02d}.vol"),
                         jac.geometry, "float32-le", None,
                         jac.data.astype("<f4").ravel(order="F").tobytes())
        return rows


def _tumor_amplitude(spec: PhantomSpec, radius: float) -> float:
    sigma_t = _TUMOR_WIDTH_FACTOR * radius
    a = spec.amplitude / (sigma_t * _INV_SQRT_E)
    return -a if spec.mode == "shrink" else a


def _week_map(spec: PhantomSpec, radius: float, bg_amplitude: float) -> RadialMap:
    if spec.mode == "stable":
        return RadialMap(())
    a_t = _tumor_amplitude(spec, radius)
    components = (
        RadialComponent(a_t, _TUMOR_WIDTH_FACTOR * radius),
        RadialComponent(bg_amplitude, _BG_WIDTH_FACTOR * spec.radius),
    )
    return RadialMap(components)


def blob_volume(grid: GridGeometry, center, radius: float,
                texture_amplitude: float = _TEXTURE_AMPLITUDE,
                seed: int = 0) -> Volume:
    """Gaussian intensity blob over a smooth seeded background texture."""
    _, r = _radius_grid(grid, center)
    img = 0.2 + np.exp(-0.5 * (r / (_BLOB_WIDTH_FACTOR * radius)) ** 2)
    if texture_amplitude > 0:
        rng = np.random.default_rng((seed, 0))
        tex = _smooth_array(rng.standard_normal(grid.dims), _TEXTURE_SIGMA)
        img = img + texture_amplitude * tex / tex.std()
    return Volume(grid, img.astype(np.float32))


def _ball_mask(grid: GridGeometry, center, radius: float) -> Mask:
    _, r = _radius_grid(grid, center)
    return Mask(grid, (r <= radius).astype(np.uint8))


def _delineation_mask(grid: GridGeometry, center, radius: float,
                      rng: np.random.Generator | None) -> Mask:
    """Ball of the given radius, minus a few seeded angular notches."""
    offsets, r = _radius_grid(grid, center)
    inside = r <= radius
    if rng is not None:
        safe_r = np.maximum(r, 1e-12)
        for _ in range(_NOTCH_COUNT):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            cosang = np.einsum("c,cxyz->xyz", direction, offsets) / safe_r
            notch = (cosang > _NOTCH_COS) & (r > radius - _NOTCH_DEPTH)
            inside &= ~notch
    return Mask(grid, inside.astype(np.uint8))


def synth_course(spec: PhantomSpec) -> SyntheticCourse:
    """Generate a full multi-week course with retained ground truth.

    Shrink mode contracts the tumor week over week, grow mode expands it
    (with delineations over-covering the anatomy so the reduced region is
    empty under ground-truth warping), stable mode repeats the scene.
    Bit-reproducible for a fixed seed.
    """
    grid, center = spec.grid, spec.center
    clean = blob_volume(grid, center, spec.radius, seed=spec.seed)
    bg_amp = _BG_AMPLITUDE_FACTOR * _tumor_amplitude(spec, spec.radius)

    radii = [spec.radius]
    volumes, masks, fields, jacobians = [], [], [], []
    for week in range(spec.weeks):
        noisy = clean.data
        if spec.noise_sd > 0:
            rng = np.random.default_rng((spec.seed, 100 + week))
            noisy = noisy + spec.noise_sd * rng.standard_normal(grid.dims).astype(np.float32)
        volumes.append(Volume(grid, noisy))
        if spec.mode == "shrink":
            contour = radii[week] - _SHRINK_DELINEATION_BIAS * week
            notch_rng = np.random.default_rng((spec.seed, 300 + week))
            masks.append(_delineation_mask(grid, center, contour, notch_rng))
        elif spec.mode == "grow":
            contour = radii[week] + _GROW_DELINEATION_MARGIN * week
            masks.append(_ball_mask(grid, center, contour))
        else:
            masks.append(_ball_mask(grid, center, radii[week]))
        if week == spec.weeks - 1:
            break
        rm = _week_map(spec, radii[week], bg_amp)
        if rm.components:
            field = pullback_field(rm, center, grid)
            jacobians.append(pullback_jacobian(rm, center, grid))
        else:
            field = VectorField.zero(grid)
            jacobians.append(JacobianMap(grid, np.ones(grid.dims, dtype=np.float32)))
        fields.append(field)
        clean = warp_volume(clean, field)
        radii.append(float(rm.map(radii[week])))

    weeks = [SyntheticWeek(v, m) for v, m in zip(volumes, masks)]
    return SyntheticCourse(spec, weeks, fields, jacobians, radii)


def synth_cohort(spec: PhantomSpec, n_patients: int) -> list[SyntheticCourse]:
    """Independent courses with per-patient seeds and mild radius jitter."""
    if n_patients < 1:
        raise ValidationError("n_patients must be >= 1")
    courses = []
    for p in range(n_patients):
        jitter = [0.0, -1.0, 1.0][p % 3]
        course_spec = replace(spec, seed=spec.seed + 1000 * p,
                              radius=spec.radius + jitter)
        courses.append(synth_course(course_spec))
    return courses
