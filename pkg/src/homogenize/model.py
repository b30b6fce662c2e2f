"""System specification and the field-level operations built on it.

A :class:`SystemSpec` bundles the drag matrix, noise amplitude, and optional
potential / vector-potential / extra-force fields of one inertial system.
The operations here evaluate the derived fields every other module consumes:
the effective drag (with its antisymmetric vector-potential part), the total
force, the noise-induced drift of the overdamped limit, and the assumption
audit that certifies spectral floors before any simulation runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import expm

from .errors import InvalidInputError, StabilityError
from .kernels import (
    SpectralBounds,
    equilibrium_covariance,
    symmetric_part_bounds,
)

#: Central-difference step scale (cube root of machine epsilon).
FD_SCALE = float(np.finfo(float).eps) ** (1.0 / 3.0)


def fd_step(q: np.ndarray) -> float:
    """Finite-difference step scaled to the evaluation point."""
    return FD_SCALE * max(1.0, float(np.linalg.norm(q)))


@dataclass(frozen=True)
class BatchedFields:
    """Vectorized one-dimensional field evaluators over trajectory batches.

    Callables take ``(t, q)`` with ``q`` a flat array of positions and return
    an array of the same shape; forces additionally take the velocity-scale
    state.  Only scalar (dim == 1) models carry these; they let the ensemble
    driver advance every trajectory in one numpy expression.
    """

    drag: Callable[[float, np.ndarray], np.ndarray]
    drag_derivative: Callable[[float, np.ndarray], np.ndarray]
    sigma: Callable[[float, np.ndarray], np.ndarray]
    force: Callable[[float, np.ndarray, np.ndarray], np.ndarray] | None = None
    limiting_force: Callable[[float, np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class SystemSpec:
    """One inertial system: drag, noise, and optional force fields.

    ``drag`` must return a symmetric matrix with a positive floor on the
    audited domain.  The vector potential enters the dynamics twice: its curl
    augments the drag antisymmetrically and its time derivative contributes
    to the force.  Analytic derivative callables are optional; every
    operation falls back to central differences with a step scaled by
    :func:`fd_step`.
    """

    name: str
    dim: int
    drag: Callable[[float, np.ndarray], np.ndarray]
    sigma: Callable[[float, np.ndarray], np.ndarray]
    noise_dim: int
    vector_potential: Callable[[float, np.ndarray], np.ndarray] | None = None
    potential: Callable[[float, np.ndarray], float] | None = None
    tail_force: Callable[[float, np.ndarray, np.ndarray], np.ndarray] | None = None
    effective_drag_gradient: Callable[[float, np.ndarray], np.ndarray] | None = None
    potential_gradient: Callable[[float, np.ndarray], np.ndarray] | None = None
    vector_potential_jacobian: Callable[[float, np.ndarray], np.ndarray] | None = None
    vector_potential_time_derivative: (
        Callable[[float, np.ndarray], np.ndarray] | None
    ) = None
    constant_coefficients: bool = False
    zero_force: bool = False
    batched: BatchedFields | None = None
    description: str = ""
    notes: dict = field(default_factory=dict)

    def without_analytic_derivatives(self) -> "SystemSpec":
        """Copy of this spec forced onto the finite-difference path."""
        return replace(
            self,
            effective_drag_gradient=None,
            potential_gradient=None,
            vector_potential_jacobian=None,
            vector_potential_time_derivative=None,
        )


def _as_state(q, dim: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(q, dtype=float))
    if arr.shape != (dim,):
        raise InvalidInputError(f"state must have shape ({dim},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("state contains non-finite entries")
    return arr


def _field_matrix(value, dim: int, name: str, cols: int | None = None) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    want = (dim, dim if cols is None else cols)
    if arr.shape != want:
        raise InvalidInputError(f"{name} must have shape {want}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} returned non-finite entries")
    return arr


def _field_vector(value, dim: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape != (dim,):
        raise InvalidInputError(f"{name} must have shape ({dim},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} returned non-finite entries")
    return arr


def _potential_jacobian(spec: SystemSpec, t: float, q: np.ndarray) -> np.ndarray:
    """J[i, k] = d psi_k / d q_i, analytic when available, else central FD."""
    if spec.vector_potential_jacobian is not None:
        return _field_matrix(spec.vector_potential_jacobian(t, q), spec.dim, "psi jacobian")
    h = fd_step(q)
    jac = np.empty((spec.dim, spec.dim))
    for i in range(spec.dim):
        shift = np.zeros(spec.dim)
        shift[i] = h
        hi = _field_vector(spec.vector_potential(t, q + shift), spec.dim, "psi")
        lo = _field_vector(spec.vector_potential(t, q - shift), spec.dim, "psi")
        jac[i] = (hi - lo) / (2.0 * h)
    return jac


def effective_drag(spec: SystemSpec, t: float, q) -> np.ndarray:
    """Drag plus the antisymmetric curl of the vector potential.

    Entry (i, k) is ``drag_ik + d psi_i/d q_k - d psi_k/d q_i``; for a plane
    rotation potential this adds the familiar magnetic off-diagonal block.
    """
    q = _as_state(q, spec.dim)
    gamma = _field_matrix(spec.drag(t, q), spec.dim, "drag")
    if np.abs(gamma - gamma.T).max() > 1e-10 * max(1.0, np.abs(gamma).max()):
        raise InvalidInputError("drag field must be symmetric")
    if spec.vector_potential is None:
        return gamma
    jac = _potential_jacobian(spec, t, q)
    return gamma + jac.T - jac


def diffusion_covariance(spec: SystemSpec, t: float, q) -> np.ndarray:
    """Noise covariance sigma sigma^T at (t, q)."""
    q = _as_state(q, spec.dim)
    sig = _field_matrix(spec.sigma(t, q), spec.dim, "sigma", cols=spec.noise_dim)
    return sig @ sig.T


def total_force(spec: SystemSpec, t: float, q, p) -> np.ndarray:
    """Force at momentum p: -d psi/dt - grad V + tail_force(t, q, p)."""
    q = _as_state(q, spec.dim)
    p = _as_state(p, spec.dim)
    out = np.zeros(spec.dim)
    if spec.vector_potential is not None:
        if spec.vector_potential_time_derivative is not None:
            out -= _field_vector(
                spec.vector_potential_time_derivative(t, q), spec.dim, "d psi/dt"
            )
        else:
            ht = FD_SCALE * max(1.0, abs(t))
            hi = _field_vector(spec.vector_potential(t + ht, q), spec.dim, "psi")
            lo = _field_vector(spec.vector_potential(t - ht, q), spec.dim, "psi")
            out -= (hi - lo) / (2.0 * ht)
    if spec.potential is not None:
        if spec.potential_gradient is not None:
            out -= _field_vector(spec.potential_gradient(t, q), spec.dim, "grad V")
        else:
            h = fd_step(q)
            for k in range(spec.dim):
                shift = np.zeros(spec.dim)
                shift[k] = h
                out[k] -= (
                    float(spec.potential(t, q + shift)) - float(spec.potential(t, q - shift))
                ) / (2.0 * h)
    if spec.tail_force is not None:
        out += _field_vector(spec.tail_force(t, q, p), spec.dim, "tail force")
    return out


def _effective_drag_gradient(spec: SystemSpec, t: float, q: np.ndarray) -> np.ndarray:
    """Gradient of the effective drag: out[k] = d(effective drag)/d q_k."""
    if spec.effective_drag_gradient is not None:
        arr = np.asarray(spec.effective_drag_gradient(t, q), dtype=float)
        if arr.shape != (spec.dim, spec.dim, spec.dim):
            raise InvalidInputError(
                "effective_drag_gradient must return shape "
                f"({spec.dim}, {spec.dim}, {spec.dim}), got {arr.shape}"
            )
        return arr
    h = fd_step(q)
    out = np.empty((spec.dim, spec.dim, spec.dim))
    for k in range(spec.dim):
        shift = np.zeros(spec.dim)
        shift[k] = h
        out[k] = (effective_drag(spec, t, q + shift) - effective_drag(spec, t, q - shift)) / (
            2.0 * h
        )
    return out


def noise_induced_drift(spec: SystemSpec, t: float, q) -> np.ndarray:
    """Drift correction inherited from state-dependent drag in the limit.

    Computed as ``S_i = sum_{j,k} d_k (G^{-1})_{ij} M_{jk}`` with M the
    stationary covariance of the fast velocity scale; the inverse-map
    derivative uses the exact identity ``d(G^{-1}) = -G^{-1} (dG) G^{-1}``.
    """
    q = _as_state(q, spec.dim)
    drag_matrix = effective_drag(spec, t, q)
    stationary = equilibrium_covariance(drag_matrix, diffusion_covariance(spec, t, q))
    gradient = _effective_drag_gradient(spec, t, q)
    inv = np.linalg.inv(drag_matrix)
    inv_gradient = -np.einsum("ia,kab,bj->kij", inv, gradient, inv)
    return np.einsum("kij,jk->i", inv_gradient, stationary)


def noise_induced_drift_oracle(
    spec: SystemSpec, t: float, q, tail_tol: float = 1e-12
) -> np.ndarray:
    """Independent evaluation of :func:`noise_induced_drift`.

    Builds the full four-index decay kernel ``K[j,l,r,s] = int (e^{-Gz})_{jr}
    (e^{-Gz})_{ls} dz`` by panel quadrature, contracts it with the noise
    covariance, and differentiates the inverse-drag map by plain central
    differences of matrix inverses.  No Lyapunov solve, no analytic Jacobian
    identity — a genuinely separate route for cross-checking.
    """
    q = _as_state(q, spec.dim)
    drag_matrix = effective_drag(spec, t, q)
    noise = diffusion_covariance(spec, t, q)
    lo, _ = symmetric_part_bounds(drag_matrix)
    if lo <= 0.0:
        raise StabilityError("oracle quadrature needs a positive drag floor")
    upper = math.log(1.0 / tail_tol) / (2.0 * lo)
    width = min(upper, 1.0 / max(np.linalg.norm(drag_matrix, 2), lo))
    n_panels = int(math.ceil(upper / width))
    nodes, weights = leggauss(12)
    offsets = 0.5 * width * (nodes + 1.0)
    scaled_w = 0.5 * width * weights
    decay_at_offset = [expm(-drag_matrix * z) for z in offsets]
    decay_per_panel = expm(-drag_matrix * width)
    panel_start = np.eye(spec.dim)
    kernel = np.zeros((spec.dim,) * 4)
    for _ in range(n_panels):
        for mat, w in zip(decay_at_offset, scaled_w):
            decay = panel_start @ mat
            kernel += w * np.einsum("jr,ls->jlrs", decay, decay)
        panel_start = panel_start @ decay_per_panel
    contracted = np.einsum("jlrs,rs->jl", kernel, noise)

    h = fd_step(q)
    inv_gradient = np.empty((spec.dim, spec.dim, spec.dim))
    for k in range(spec.dim):
        shift = np.zeros(spec.dim)
        shift[k] = h
        hi = np.linalg.inv(effective_drag(spec, t, q + shift))
        lo_mat = np.linalg.inv(effective_drag(spec, t, q - shift))
        inv_gradient[k] = (hi - lo_mat) / (2.0 * h)
    return np.einsum("kij,jk->i", inv_gradient, contracted)


def limiting_drift(spec: SystemSpec, t: float, q) -> np.ndarray:
    """Drift of the overdamped limit: G^{-1} F (at reference momentum) plus
    the noise-induced correction."""
    q = _as_state(q, spec.dim)
    drag_matrix = effective_drag(spec, t, q)
    if spec.vector_potential is not None:
        p_ref = _field_vector(spec.vector_potential(t, q), spec.dim, "psi")
    else:
        p_ref = np.zeros(spec.dim)
    force = total_force(spec, t, q, p_ref)
    return np.linalg.solve(drag_matrix, force) + noise_induced_drift(spec, t, q)


def limiting_diffusion(spec: SystemSpec, t: float, q) -> np.ndarray:
    """Diffusion matrix of the overdamped limit: G^{-1} sigma."""
    q = _as_state(q, spec.dim)
    drag_matrix = effective_drag(spec, t, q)
    sig = _field_matrix(spec.sigma(t, q), spec.dim, "sigma", cols=spec.noise_dim)
    return np.linalg.solve(drag_matrix, sig)


@dataclass(frozen=True)
class AuditReport:
    """Sampled assumption audit over a box: spectral floors, norms, Lipschitz
    estimates, and pass/fail flags.  Floors are sampled minima (necessary,
    not sufficient, for the global assumptions — the report says so)."""

    model: str
    box: tuple
    times: tuple
    resolution: int
    drag_floor: float
    noise_floor: float
    drag_norm: float
    noise_norm: float
    drag_lipschitz: float
    sigma_lipschitz: float
    flags: dict
    passed: bool

    def spectral_bounds(self) -> SpectralBounds | None:
        if self.drag_floor <= 0.0 or self.noise_floor <= 0.0:
            return None
        return SpectralBounds(
            drag_floor=self.drag_floor,
            noise_floor=self.noise_floor,
            drag_norm=self.drag_norm,
            noise_norm=self.noise_norm,
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "box": [list(b) for b in self.box],
            "times": list(self.times),
            "resolution": self.resolution,
            "drag_floor": self.drag_floor,
            "noise_floor": self.noise_floor,
            "drag_norm": self.drag_norm,
            "noise_norm": self.noise_norm,
            "drag_lipschitz": self.drag_lipschitz,
            "sigma_lipschitz": self.sigma_lipschitz,
            "flags": dict(sorted(self.flags.items())),
            "passed": self.passed,
        }


def audit_assumptions(
    spec: SystemSpec,
    box,
    times=(0.0,),
    resolution: int = 9,
) -> AuditReport:
    """Sample the assumption set on a product grid over ``box`` x ``times``.

    Checks drag symmetry, positive spectral floors for drag and noise
    covariance, finiteness of every sampled field, and estimates Lipschitz
    constants from adjacent grid points.
    """
    box = tuple((float(lo), float(hi)) for lo, hi in box)
    if len(box) != spec.dim:
        raise InvalidInputError(f"box must have {spec.dim} axes, got {len(box)}")
    for lo, hi in box:
        if not hi > lo:
            raise InvalidInputError(f"degenerate box axis [{lo}, {hi}]")
    if resolution < 2:
        raise InvalidInputError("resolution must be at least 2")
    if resolution**spec.dim > 100_000:
        raise InvalidInputError(
            "audit grid too large; lower the resolution or the dimension"
        )
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    times = tuple(float(t) for t in times)

    drag_floor = math.inf
    noise_floor = math.inf
    drag_norm = 0.0
    noise_norm = 0.0
    symmetric_ok = True
    finite_ok = True
    grids: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
    for t in times:
        for idx in product(range(resolution), repeat=spec.dim):
            q = np.array([axes[d][idx[d]] for d in range(spec.dim)])
            try:
                gamma = np.asarray(spec.drag(t, q), dtype=float).reshape(
                    spec.dim, spec.dim
                )
                eff = effective_drag(spec, t, q)
                noise = diffusion_covariance(spec, t, q)
            except InvalidInputError as exc:
                if "symmetric" in str(exc):
                    symmetric_ok = False
                    break
                finite_ok = False
                break
            if not (np.all(np.isfinite(eff)) and np.all(np.isfinite(noise))):
                finite_ok = False
                break
            if np.abs(gamma - gamma.T).max() > 1e-10 * max(1.0, np.abs(gamma).max()):
                symmetric_ok = False
            drag_floor = min(drag_floor, float(np.linalg.eigvalsh(gamma)[0]))
            noise_floor = min(noise_floor, float(np.linalg.eigvalsh(noise)[0]))
            drag_norm = max(drag_norm, float(np.linalg.norm(eff, 2)))
            noise_norm = max(noise_norm, float(np.linalg.norm(noise, 2)))
            grids[(t, idx)] = (eff, np.asarray(spec.sigma(t, q), dtype=float))
        else:
            continue
        break

    drag_lipschitz = 0.0
    sigma_lipschitz = 0.0
    if symmetric_ok and finite_ok:
        spacing = [
            (hi - lo) / (resolution - 1) if resolution > 1 else 0.0 for lo, hi in box
        ]
        for (t, idx), (eff, sig) in grids.items():
            for d in range(spec.dim):
                nbr = list(idx)
                nbr[d] += 1
                if nbr[d] >= resolution:
                    continue
                eff2, sig2 = grids[(t, tuple(nbr))]
                drag_lipschitz = max(
                    drag_lipschitz, float(np.linalg.norm(eff2 - eff, 2)) / spacing[d]
                )
                sigma_lipschitz = max(
                    sigma_lipschitz, float(np.linalg.norm(sig2 - sig, 2)) / spacing[d]
                )
        if len(times) > 1:
            for a, b in zip(times[:-1], times[1:]):
                dt = b - a
                if dt <= 0:
                    continue
                for idx in product(range(resolution), repeat=spec.dim):
                    eff_a, sig_a = grids[(a, idx)]
                    eff_b, sig_b = grids[(b, idx)]
                    drag_lipschitz = max(
                        drag_lipschitz, float(np.linalg.norm(eff_b - eff_a, 2)) / dt
                    )
                    sigma_lipschitz = max(
                        sigma_lipschitz, float(np.linalg.norm(sig_b - sig_a, 2)) / dt
                    )

    flags = {
        "drag_symmetric": symmetric_ok,
        "fields_finite": finite_ok,
        "drag_floor_positive": finite_ok and drag_floor > 0.0,
        "noise_floor_positive": finite_ok and noise_floor > 0.0,
        "lipschitz_finite": math.isfinite(drag_lipschitz)
        and math.isfinite(sigma_lipschitz),
    }
    return AuditReport(
        model=spec.name,
        box=box,
        times=times,
        resolution=resolution,
        drag_floor=drag_floor if math.isfinite(drag_floor) else -math.inf,
        noise_floor=noise_floor if math.isfinite(noise_floor) else -math.inf,
        drag_norm=drag_norm,
        noise_norm=noise_norm,
        drag_lipschitz=drag_lipschitz,
        sigma_lipschitz=sigma_lipschitz,
        flags=flags,
        passed=all(flags.values()),
    )
