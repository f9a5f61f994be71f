"""Symmetric log-domain diffeomorphic registration with local-correlation forces.

The transform is parameterized by a stationary velocity field v; the
forward and backward displacement fields are exp(v) and exp(-v) computed by
scaling and squaring, so both mappings are smooth with smooth inverses.
Forces maximize the mean squared local correlation coefficient, which is
invariant to locally affine intensity rescaling: the gradient of the
energy with respect to the displacement at z is

    force(z) = -2 [ fbar(z) G*(A/(BC)) - mbar(z) G*(A^2/(B^2 C)) ] grad mbar(z)

where mbar/fbar are the Gaussian-window mean-centered moving/fixed images
and A = G*(mbar fbar), B = G*(mbar^2), C = G*(fbar^2). The update is the
average of the forward force and the sign-flipped backward force, fluid
smoothing is applied to the update and diffusion smoothing to the velocity,
and a step is accepted only if the symmetric similarity energy does not
decrease (the per-level step is halved otherwise).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import volio
from .grids import (
    GridGeometry,
    ValidationError,
    VectorField,
    Volume,
    _smooth_array,
    downsample2,
    index_coords,
    require_same_geometry,
    upsample_field,
    warp_volume,
)
from scipy import ndimage

# local-variance floor, as a fraction of the global intensity variance
VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class RegistrationParams:
    pyramid_levels: int = 3
    iterations_per_level: int = 50
    lcc_sigma: float = 3.0        # Gaussian window of the local correlation
    fluid_sigma: float = 2.0      # update-field smoothing
    diffusion_sigma: float = 1.5  # velocity-field smoothing
    exp_steps: int = 4            # minimum scaling-and-squaring steps (auto-raised)
    step_scale: float = 1.0       # max update length in voxels per iteration
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValidationError("pyramid_levels must be >= 1")
        if self.iterations_per_level < 1:
            raise ValidationError("iterations_per_level must be >= 1")
        if self.lcc_sigma <= 0:
            raise ValidationError("lcc_sigma must be > 0")
        if self.fluid_sigma < 0 or self.diffusion_sigma < 0:
            raise ValidationError("smoothing sigmas must be >= 0")
        if self.exp_steps < 1:
            raise ValidationError("exp_steps must be >= 1")
        if not 0 < self.step_scale <= 2:
            raise ValidationError("step_scale must be in (0, 2]")
        if self.convergence_tol < 0:
            raise ValidationError("convergence_tol must be >= 0")


@dataclass(frozen=True)
class SymmetricTransform:
    """Stationary velocity plus its exponentials.

    forward warps the source onto the target (phi(z) = z - forward(z));
    backward is the inverse mapping's displacement.
    """

    velocity: VectorField
    forward: VectorField
    backward: VectorField

    def __post_init__(self):
        require_same_geometry(self.velocity, self.forward)
        require_same_geometry(self.velocity, self.backward)

    @property
    def geometry(self) -> GridGeometry:
        return self.velocity.geometry


@dataclass(frozen=True)
class TraceEntry:
    level: int
    iteration: int
    energy: float
    max_update: float
    accepted: bool


@dataclass
class ConvergenceTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def append(self, entry: TraceEntry) -> None:
        if not math.isfinite(entry.energy):
            raise ValidationError("trace energy must be finite")
        self.entries.append(entry)

    def accepted_energies(self, level: int) -> list[float]:
        return [e.energy for e in self.entries if e.level == level and e.accepted]

    def levels(self) -> list[int]:
        return sorted({e.level for e in self.entries})

    def to_json_dict(self) -> list[dict]:
        return [vars(e) for e in self.entries]


def compose(f: VectorField, g: VectorField) -> VectorField:
    """Displacement of the composed mapping: z - h(z) = (z' - f(z'))
    evaluated at z' = z - g(z)."""
    require_same_geometry(f, g)
    return VectorField(f.geometry, _compose_arrays(f.data, g.data))


def _compose_arrays(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    coords = np.indices(f.shape[1:], dtype=np.float32) - g
    out = np.empty_like(g)
    for c in range(3):
        out[c] = g[c] + ndimage.map_coordinates(f[c], coords, order=1, mode="nearest")
    return out


def exp_velocity(v: VectorField, exp_steps: int) -> VectorField:
    """Scaling and squaring: scale v by 2^-exp_steps, then self-compose
    exp_steps times. exp_steps should keep the scaled max norm below half a
    voxel (see auto_exp_steps)."""
    if exp_steps < 1:
        raise ValidationError("exp_steps must be >= 1")
    d = (v.data / float(2 ** exp_steps)).astype(np.float32)
    for _ in range(exp_steps):
        d = _compose_arrays(d, d)
    return VectorField(v.geometry, d)


def auto_exp_steps(max_norm: float, minimum: int = 1) -> int:
    """Smallest step count >= minimum with max_norm / 2^steps < 0.5 voxel."""
    steps = minimum
    while max_norm / (2 ** steps) >= 0.5:
        steps += 1
    return steps


def invert(t: SymmetricTransform) -> SymmetricTransform:
    """Swap forward/backward and negate the velocity (exact involution)."""
    return SymmetricTransform(
        VectorField(t.geometry, -t.velocity.data),
        t.backward,
        t.forward,
    )


def _local_stats(m: np.ndarray, f: np.ndarray, sigma: float):
    mbar = m - _smooth_array(m, sigma)
    fbar = f - _smooth_array(f, sigma)
    a = _smooth_array(mbar * fbar, sigma)
    b = _smooth_array(mbar * mbar, sigma)
    c = _smooth_array(fbar * fbar, sigma)
    return mbar, fbar, a, b, c


def _lcc_energy(m, f, sigma, eps_m, eps_f) -> float:
    _, _, a, b, c = _local_stats(m, f, sigma)
    valid = (b > eps_m) & (c > eps_f)
    rho2 = np.zeros_like(a)
    np.divide(a * a, b * c, out=rho2, where=valid)
    np.clip(rho2, 0.0, 1.0, out=rho2)
    return float(rho2.mean(dtype=np.float64))


def _lcc_energy_force(m, f, sigma, eps_m, eps_f):
    mbar, fbar, a, b, c = _local_stats(m, f, sigma)
    valid = (b > eps_m) & (c > eps_f)
    rho2 = np.zeros_like(a)
    np.divide(a * a, b * c, out=rho2, where=valid)
    np.clip(rho2, 0.0, 1.0, out=rho2)
    energy = float(rho2.mean(dtype=np.float64))
    r1 = np.zeros_like(a)
    np.divide(a, b * c, out=r1, where=valid)
    r2 = np.zeros_like(a)
    np.divide(a * a, b * b * c, out=r2, where=valid)
    k = 2.0 * (fbar * _smooth_array(r1, sigma) - mbar * _smooth_array(r2, sigma))
    grads = np.gradient(mbar, axis=(0, 1, 2))
    force = np.stack([(-k * grads[axis]).astype(np.float32) for axis in range(3)])
    return energy, force


def lcc_similarity(a: Volume, b: Volume, lcc_sigma: float) -> float:
    """Mean over voxels of the squared local correlation in [0, 1].

    Voxels whose local variance falls below 1e-6 of either image's global
    variance contribute the neutral value 0.
    """
    require_same_geometry(a, b)
    if lcc_sigma <= 0:
        raise ValidationError("lcc_sigma must be > 0")
    eps_a = VARIANCE_FLOOR * float(a.data.var(dtype=np.float64))
    eps_b = VARIANCE_FLOOR * float(b.data.var(dtype=np.float64))
    return _lcc_energy(a.data, b.data, lcc_sigma, eps_a, eps_b)


class _LevelState:
    """Velocity plus its exponentials and warped images at one level."""

    def __init__(self, v, source, target, params):
        self.v = v
        steps = auto_exp_steps(_max_norm(v), params.exp_steps)
        self.fwd = _exp_array(v, steps)
        self.bwd = _exp_array(-v, steps)
        self.warped_src = _warp_array(source, self.fwd)
        self.warped_tgt = _warp_array(target, self.bwd)


def _max_norm(arr: np.ndarray) -> float:
    return float(np.sqrt((arr.astype(np.float64) ** 2).sum(axis=0).max()))


def _exp_array(v: np.ndarray, steps: int) -> np.ndarray:
    d = (v / float(2 ** steps)).astype(np.float32)
    for _ in range(steps):
        d = _compose_arrays(d, d)
    return d


def _warp_array(img: np.ndarray, disp: np.ndarray) -> np.ndarray:
    coords = np.indices(img.shape, dtype=np.float32) - disp
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def _smooth_field_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return arr
    return np.stack([_smooth_array(arr[c], sigma) for c in range(3)])


def register(source: Volume, target: Volume,
             params: RegistrationParams = RegistrationParams()
             ) -> tuple[SymmetricTransform, ConvergenceTrace]:
    """Multiresolution symmetric registration of source onto target.

    Returns a transform whose forward field warps source onto target, and
    the per-iteration convergence trace. The accepted similarity energy is
    non-decreasing within each level, so the final forward similarity is at
    least the initial one.
    """
    require_same_geometry(source, target)
    for name, vol in (("source", source), ("target", target)):
        if float(vol.data.var(dtype=np.float64)) == 0.0:
            raise ValidationError(
                f"{name} volume is constant: local correlation is undefined")

    pyr_src = [source]
    pyr_tgt = [target]
    while (len(pyr_src) < params.pyramid_levels
           and all(d >= 8 for d in pyr_src[-1].geometry.dims)):
        pyr_src.append(downsample2(pyr_src[-1]))
        pyr_tgt.append(downsample2(pyr_tgt[-1]))
    pyr_src.reverse()
    pyr_tgt.reverse()

    trace = ConvergenceTrace()
    v = None
    for level, (src_l, tgt_l) in enumerate(zip(pyr_src, pyr_tgt)):
        geom = src_l.geometry
        if v is None:
            v = np.zeros((3, *geom.dims), dtype=np.float32)
        else:
            v = upsample_field(VectorField(prev_geom, v), geom).data.copy()
        prev_geom = geom

        s_arr = src_l.data
        t_arr = tgt_l.data
        eps_s = VARIANCE_FLOOR * float(s_arr.var(dtype=np.float64))
        eps_t = VARIANCE_FLOOR * float(t_arr.var(dtype=np.float64))
        sigma = params.lcc_sigma

        state = _LevelState(v, s_arr, t_arr, params)
        # coarse-level velocities that do not beat the identity are discarded
        if level > 0 and _max_norm(v) > 0:
            e_carried = 0.5 * (
                _lcc_energy(state.warped_src, t_arr, sigma, eps_s, eps_t)
                + _lcc_energy(state.warped_tgt, s_arr, sigma, eps_t, eps_s))
            e_zero = _lcc_energy(s_arr, t_arr, sigma, eps_s, eps_t)
            if e_carried < e_zero:
                v = np.zeros_like(v)
                state = _LevelState(v, s_arr, t_arr, params)

        step = params.step_scale
        e_cur = None
        for iteration in range(params.iterations_per_level):
            e_f, f_f = _lcc_energy_force(state.warped_src, t_arr, sigma, eps_s, eps_t)
            e_b, f_b = _lcc_energy_force(state.warped_tgt, s_arr, sigma, eps_t, eps_s)
            if e_cur is None:
                e_cur = 0.5 * (e_f + e_b)
            u = 0.5 * (f_f - f_b)
            u = _smooth_field_array(u, params.fluid_sigma)
            umax = _max_norm(u)
            if umax < 1e-12:
                break
            u *= step / umax
            v_cand = _smooth_field_array(v + u, params.diffusion_sigma).astype(np.float32)
            cand = _LevelState(v_cand, s_arr, t_arr, params)
            e_cand = 0.5 * (
                _lcc_energy(cand.warped_src, t_arr, sigma, eps_s, eps_t)
                + _lcc_energy(cand.warped_tgt, s_arr, sigma, eps_t, eps_s))
            accepted = e_cand >= e_cur - 1e-12
            trace.append(TraceEntry(level, iteration,
                                    e_cand if accepted else e_cur,
                                    step, accepted))
            if accepted:
                rel = abs(e_cand - e_cur) / max(abs(e_cur), 1e-12)
                v, state, e_cur = v_cand, cand, e_cand
                if rel < params.convergence_tol:
                    break
            else:
                step *= 0.5
                if step < 1e-3 * params.step_scale:
                    break

    geometry = source.geometry
    velocity = VectorField(geometry, v)
    steps = auto_exp_steps(_max_norm(v), params.exp_steps)
    transform = SymmetricTransform(
        velocity,
        VectorField(geometry, _exp_array(v, steps)),
        VectorField(geometry, _exp_array(-v, steps)),
    )
    # contract: never worse than the identity alignment
    sim_before = lcc_similarity(source, target, params.lcc_sigma)
    sim_after = lcc_similarity(warp_volume(source, transform.forward), target,
                               params.lcc_sigma)
    if sim_after < sim_before:
        zero = VectorField.zero(geometry)
        transform = SymmetricTransform(zero, zero, zero)
    return transform, trace


def save_transform(dirpath, transform: SymmetricTransform,
                   params: RegistrationParams, trace: ConvergenceTrace) -> None:
    """Three .vol field files plus a JSON sidecar of params and trace."""
    os.makedirs(dirpath, exist_ok=True)
    volio.write_field(os.path.join(dirpath, "velocity.vol"), transform.velocity)
    volio.write_field(os.path.join(dirpath, "forward.vol"), transform.forward)
    volio.write_field(os.path.join(dirpath, "backward.vol"), transform.backward)
    sidecar = {"params": vars(params), "trace": trace.to_json_dict()}
    with open(os.path.join(dirpath, "transform.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_transform(dirpath) -> tuple[SymmetricTransform, RegistrationParams, ConvergenceTrace]:
    transform = SymmetricTransform(
        volio.read_field(os.path.join(dirpath, "velocity.vol")),
        volio.read_field(os.path.join(dirpath, "forward.vol")),
        volio.read_field(os.path.join(dirpath, "backward.vol")),
    )
    with open(os.path.join(dirpath, "transform.json")) as fh:
        sidecar = json.load(fh)
    params = RegistrationParams(**sidecar["params"])
    trace = ConvergenceTrace([TraceEntry(**e) for e in sidecar["trace"]])
    return transform, params, trace
