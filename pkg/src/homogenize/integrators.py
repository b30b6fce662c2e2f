"""Time stepping for the inertial pair (q, u), its overdamped limit, and
coupled pairs driven by shared Wiener increments.

Two schemes are provided.  Euler-Maruyama is the textbook explicit update
and needs ``h < m / ||G||`` to stay stable.  The exponential scheme freezes
the coefficients at the step start and then advances with the *exact*
Gaussian one-step law of the frozen system, so it is unconditionally stable
in ``h/m`` and introduces no sampling bias at all for constant coefficients.

The exact step exploits one structural fact: integrating the momentum
equation over a step gives ``xi_u = sigma dW - G xi_q`` identically, so the
position noise is a deterministic function of the step increment and the
momentum noise.  Only the momentum noise conditional on dW is ever sampled.

Sampling discipline (the reproducibility contract): trajectory ``j`` under
master seed ``s`` draws from ``Generator(Philox(SeedSequence((s, j))))`` and
consumes one row of standard normals per step, in step order — a row holds
``noise_dim + dim`` values for the exponential scheme and ``noise_dim`` for
Euler-Maruyama (times ``substeps``).  Chunk boundaries, buffer sizes, and
worker counts never change what a trajectory draws, so a fixed request is
bit-identical across worker counts and repeats.  Changing ``chunk_size``
keeps the draws but can move results by rounding (BLAS handles the edge
columns of a different-width batch differently).
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.integrate import cumulative_trapezoid

from .errors import (
    ConfigurationError,
    InvalidInputError,
    NumericError,
    ResolutionError,
    StabilityError,
)
from .expressions import compile_field, state_variables
from .kernels import matrix_exponential, noise_covariance_integral, solve_lyapunov
from .model import (
    SystemSpec,
    effective_drag,
    limiting_diffusion,
    limiting_drift,
    total_force,
)

SCHEMES = ("exponential", "euler-maruyama")

#: Below this value of x = drag * h / mass the scalar kernel switches from
#: expm1-based formulas to series expansions (relative error ~1e-10 on both
#: sides of the branch point).
_SERIES_CUTOFF = 1e-2


def trajectory_rng(master_seed: int, trajectory_index: int) -> Generator:
    """Counter-based stream for one trajectory, independent of all others."""
    return Generator(Philox(SeedSequence((master_seed, trajectory_index))))


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class WienerPath:
    """Increments of one driving Wiener path on a fixed grid."""

    times: np.ndarray  # (K+1,) strictly increasing
    increments: np.ndarray  # (K, noise_dim)
    master_seed: int | None = None
    trajectory_index: int | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        inc = np.asarray(self.increments, dtype=float)
        if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0.0):
            raise InvalidInputError("times must be a strictly increasing grid")
        if inc.ndim != 2 or inc.shape[0] != times.size - 1:
            raise InvalidInputError(
                "increments must have one row per grid interval"
            )
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "increments", inc)

    @classmethod
    def sample(cls, master_seed, trajectory_index, times, noise_dim):
        """Draw the path of the given lineage on the given grid."""
        times = np.asarray(times, dtype=float)
        rng = trajectory_rng(master_seed, trajectory_index)
        steps = np.sqrt(np.diff(times))[:, None]
        inc = rng.standard_normal((times.size - 1, noise_dim)) * steps
        return cls(times, inc, master_seed, trajectory_index)

    def values(self) -> np.ndarray:
        """W at the grid points, starting from zero: shape (K+1, noise_dim)."""
        out = np.zeros((self.times.size, self.increments.shape[1]))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


@dataclass(frozen=True)
class PathState:
    """State of one trajectory: time, position, mass-scaled momentum u = m v."""

    t: float
    q: np.ndarray
    u: np.ndarray
    m: float

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        u = np.atleast_1d(np.asarray(self.u, dtype=float))
        if q.shape != u.shape or q.ndim != 1:
            raise InvalidInputError("q and u must be vectors of equal length")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(u))):
            raise InvalidInputError("state contains non-finite entries")
        if not self.m > 0.0:
            raise InvalidInputError(f"mass must be positive, got {self.m}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "u", u)

    @property
    def z(self) -> np.ndarray:
        """Rescaled momentum u / sqrt(m), the variable with an O(1) limit law."""
        return self.u / math.sqrt(self.m)


@dataclass(frozen=True)
class IntegratorConfig:
    """Scheme selection and step layout shared by all drivers."""

    scheme: str = "exponential"
    step: float = 1e-2
    substeps: int = 1
    freeze: str = "start-of-step"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(
                f"scheme must be one of {SCHEMES}, got {self.scheme!r}"
            )
        if not self.step > 0.0:
            raise ConfigurationError(f"step must be positive, got {self.step}")
        if not (isinstance(self.substeps, int) and self.substeps >= 1):
            raise ConfigurationError(
                f"substeps must be an integer >= 1, got {self.substeps!r}"
            )
        if self.freeze != "start-of-step":
            raise ConfigurationError(
                "only start-of-step coefficient freezing is implemented"
            )


# ---------------------------------------------------------------------------
# one-step operators


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Square root of a PSD matrix: Cholesky, falling back to eigen-clipping
    when rounding pushes a near-zero eigenvalue below zero."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        floor = -1e-10 * max(1.0, vals.max(initial=0.0))
        if vals.min(initial=0.0) < floor:
            raise NumericError(
                "noise covariance is not positive semidefinite"
            ) from None
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class ExactStepOperator:
    """Exact one-step map of the frozen pair at fixed (mass, step).

    Deterministic part: ``u' = E u + force_gain_u F``,
    ``q' = q + position_gain u + force_gain_q F``.  Noise part: with
    ``dw = sqrt(h) z_w`` and ``xi_u = increment_gain dw + residual_factor z_r``
    the updates receive ``u' += xi_u`` and ``q' += drag_inverse
    (sigma dw - xi_u)``.  ``z_w`` and ``z_r`` are independent standard
    normals; conditioning on dw is what couples the pair to the limiting
    equation driven by the same increments.
    """

    mass: float
    step: float
    decay: np.ndarray  # E = exp(-G h / m)
    position_gain: np.ndarray  # Phi_1 / m,  Phi_1 = m G^{-1} (I - E)
    force_gain_u: np.ndarray  # Phi_1
    force_gain_q: np.ndarray  # G^{-1} (h I - Phi_1)
    increment_gain: np.ndarray  # Cov(xi_u, dW) / h
    residual_factor: np.ndarray  # factor of Cov(xi_u | dW)
    sigma: np.ndarray
    drag_inverse: np.ndarray


def exact_step_operator(gamma_tilde, sigma, h: float, mass: float) -> ExactStepOperator:
    """Build the exact one-step operator for frozen coefficients.

    For moderate stiffness the momentum noise covariance and its correlation
    with the increment are read off one block (Van Loan) exponential of the
    augmented (u, W) system; past h ||G|| / m = 50 that block would overflow,
    so the covariance switches to the equivalent Lyapunov form
    ``G X + X G^T = S - E S E^T`` and the cross term to its closed form
    ``Phi_1 sigma``, both of which stay finite for arbitrarily stiff steps.
    """
    g = np.atleast_2d(np.asarray(gamma_tilde, dtype=float))
    sig = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = g.shape[0]
    n_w = sig.shape[1]
    if h <= 0.0 or mass <= 0.0:
        raise InvalidInputError("step and mass must be positive")
    try:
        g_inv = np.linalg.inv(g)
    except np.linalg.LinAlgError:
        raise StabilityError("effective drag is singular") from None
    if h * np.linalg.norm(g, 2) / mass <= 50.0:
        a = np.zeros((n + n_w, n + n_w))
        a[:n, :n] = -g / mass
        b = np.vstack([sig, np.eye(n_w)])
        prop, cov = noise_covariance_integral(a, b @ b.T, h)
        decay = prop[:n, :n]
        phi1 = mass * (g_inv @ (np.eye(n) - decay))
        cov_uu = cov[:n, :n]
        cov_uw = cov[:n, n:]
    else:
        decay = matrix_exponential(-(h / mass) * g)
        phi1 = mass * (g_inv @ (np.eye(n) - decay))
        s_cov = sig @ sig.T
        cov_uu = mass * solve_lyapunov(g, s_cov - decay @ s_cov @ decay.T)
        cov_uw = phi1 @ sig
    conditional = cov_uu - cov_uw @ cov_uw.T / h
    return ExactStepOperator(
        mass=mass,
        step=h,
        decay=decay,
        position_gain=phi1 / mass,
        force_gain_u=phi1,
        force_gain_q=g_inv @ (h * np.eye(n) - phi1),
        increment_gain=cov_uw / h,
        residual_factor=_psd_factor(conditional),
        sigma=sig,
        drag_inverse=g_inv,
    )


def _momentum(spec: SystemSpec, t: float, q: np.ndarray, u: np.ndarray) -> np.ndarray:
    if spec.vector_potential is None:
        return u
    return u + np.asarray(spec.vector_potential(t, q), dtype=float)


def _force(spec: SystemSpec, t: float, q: np.ndarray, u: np.ndarray) -> np.ndarray:
    if spec.zero_force:
        return np.zeros(spec.dim)
    return total_force(spec, t, q, _momentum(spec, t, q, u))


def step_underdamped_em(
    spec: SystemSpec, state: PathState, dw, h: float
) -> PathState:
    """One explicit Euler-Maruyama step of the inertial pair."""
    g = effective_drag(spec, state.t, state.q)
    lam = np.linalg.norm(g, 2)
    if h * lam >= state.m:
        raise ConfigurationError(
            f"explicit scheme is unstable: step {h} exceeds m/||G|| = "
            f"{state.m / lam:.3e}; shrink the step or use the exponential scheme"
        )
    dw = np.asarray(dw, dtype=float)
    sig = np.atleast_2d(np.asarray(spec.sigma(state.t, state.q), dtype=float))
    force = _force(spec, state.t, state.q, state.u)
    u_new = state.u - (h / state.m) * (g @ state.u) + h * force + sig @ dw
    q_new = state.q + (h / state.m) * state.u
    return PathState(state.t + h, q_new, u_new, state.m)


def step_underdamped_exponential(
    spec: SystemSpec, state: PathState, dw, residual, h: float
) -> PathState:
    """One exact step of the coefficient-frozen inertial pair.

    ``dw`` is the Wiener increment over the step and ``residual`` the
    ``dim`` standard normals feeding the momentum fluctuation that the
    increment does not determine.  Unconditionally stable in h/m.
    """
    g = effective_drag(spec, state.t, state.q)
    sig = np.atleast_2d(np.asarray(spec.sigma(state.t, state.q), dtype=float))
    op = exact_step_operator(g, sig, h, state.m)
    force = _force(spec, state.t, state.q, state.u)
    dw = np.asarray(dw, dtype=float)
    residual = np.asarray(residual, dtype=float)
    xi_u = op.increment_gain @ dw + op.residual_factor @ residual
    u_new = op.decay @ state.u + op.force_gain_u @ force + xi_u
    q_new = (
        state.q
        + op.position_gain @ state.u
        + op.force_gain_q @ force
        + op.drag_inverse @ (sig @ dw - xi_u)
    )
    return PathState(state.t + h, q_new, u_new, state.m)


def step_limiting(spec: SystemSpec, t: float, q, dw, h: float) -> np.ndarray:
    """One Euler-Maruyama step of the overdamped limit."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    dw = np.asarray(dw, dtype=float)
    try:
        drift = limiting_drift(spec, t, q)
        dif = limiting_diffusion(spec, t, q)
    except np.linalg.LinAlgError:
        raise StabilityError("effective drag is singular") from None
    return q + h * drift + dif @ dw


# ---------------------------------------------------------------------------
# vectorized ensemble kernels
#
# A kernel advances every trajectory of a chunk by one coupling step from one
# (draws_per_step, n_traj) block of standard normals.  Selection is by model
# structure: constant coefficients -> precomputed matrices; one-dimensional
# varying fields -> elementwise closed forms; anything else -> a per-
# trajectory loop over the generic steppers (test scale only).


class _BatchState:
    __slots__ = ("t", "q", "u", "q_limit")

    def __init__(self, t, q, u, q_limit):
        self.t = t
        self.q = q  # (dim, n_traj)
        self.u = u
        self.q_limit = q_limit  # (dim, n_traj) or None


def _scalar_phi1(x):
    """(1 - exp(-x)) / x with a series branch for small x."""
    out = -np.expm1(-x) / x
    small = x < _SERIES_CUTOFF
    if np.any(small):
        xs = np.where(small, x, 0.0)
        series = 1.0 - xs / 2.0 + xs**2 / 6.0 - xs**3 / 24.0 + xs**4 / 120.0
        out = np.where(small, series, out)
    return out


def _scalar_phi2(x, phi1):
    """(1 - phi1(x)) / x with a series branch for small x."""
    out = (1.0 - phi1) / x
    small = x < _SERIES_CUTOFF
    if np.any(small):
        xs = np.where(small, x, 0.0)
        series = 0.5 - xs / 6.0 + xs**2 / 24.0 - xs**3 / 120.0 + xs**4 / 720.0
        out = np.where(small, series, out)
    return out


def _scalar_conditional_var(x, phi1):
    """Unit-noise variance of the momentum noise given the increment.

    Equals psi_u(x) - phi1(x)^2 with psi_u = (1 - exp(-2x)) / (2x); the two
    terms cancel to O(x^2), so a series takes over below the cutoff.
    """
    psi_u = -np.expm1(-2.0 * x) / (2.0 * x)
    out = psi_u - phi1 * phi1
    small = x < _SERIES_CUTOFF
    if np.any(small):
        xs = np.where(small, x, 0.0)
        series = (xs**2 / 12.0) * (
            1.0 - xs + 17.0 * xs**2 / 30.0 - 7.0 * xs**3 / 30.0
        )
        out = np.where(small, series, out)
    return np.clip(out, 0.0, None)


class ConstantKernel:
    """Ensemble stepper for constant-coefficient, force-free models.

    Every matrix is precomputed once; a step is a handful of small matrix
    products over the (dim, n_traj) state block.
    """

    def __init__(self, spec, mass, h, scheme, substeps, couple):
        if not (spec.constant_coefficients and spec.zero_force):
            raise InvalidInputError(
                "constant kernel requires constant coefficients and zero force"
            )
        self.dim = spec.dim
        self.noise_dim = spec.noise_dim
        self.mass = mass
        self.scheme = scheme
        self.substeps = substeps
        self.couple = couple
        origin = np.zeros(spec.dim)
        g = effective_drag(spec, 0.0, origin)
        sig = np.atleast_2d(np.asarray(spec.sigma(0.0, origin), dtype=float))
        h_sub = h / substeps
        self._sqrt_h = math.sqrt(h_sub)
        if scheme == "exponential":
            op = exact_step_operator(g, sig, h_sub, mass)
            self._decay = op.decay
            self._position_gain = op.position_gain
            self._sigma = sig
            self._drag_inverse = op.drag_inverse
            # xi_u from the (z_w, z_r) block in one product
            self._noise_gain = np.hstack(
                [op.increment_gain * self._sqrt_h, op.residual_factor]
            )
            self.draws_per_step = substeps * (self.noise_dim + self.dim)
            self._draws_sub = self.noise_dim + self.dim
        else:
            lam = np.linalg.norm(g, 2)
            if h_sub * lam >= mass:
                raise ConfigurationError(
                    f"explicit scheme is unstable: substep {h_sub} exceeds "
                    f"m/||G|| = {mass / lam:.3e}"
                )
            self._em_decay = np.eye(spec.dim) - (h_sub / mass) * g
            self._sigma = sig
            self.draws_per_step = substeps * self.noise_dim
            self._draws_sub = self.noise_dim
        self._h_sub = h_sub
        self._limit_diffusion = np.linalg.solve(g, sig) if couple else None

    def advance(self, state: _BatchState, block: np.ndarray) -> None:
        n, n_w = self.dim, self.noise_dim
        dw_total = None
        for s in range(self.substeps):
            z = block[s * self._draws_sub : (s + 1) * self._draws_sub]
            dw = self._sqrt_h * z[:n_w]
            if self.scheme == "exponential":
                xi_u = self._noise_gain @ z
                q_new = (
                    state.q
                    + self._position_gain @ state.u
                    + self._drag_inverse @ (self._sigma @ dw - xi_u)
                )
                state.u = self._decay @ state.u + xi_u
                state.q = q_new
            else:
                q_new = state.q + (self._h_sub / self.mass) * state.u
                state.u = self._em_decay @ state.u + self._sigma @ dw
                state.q = q_new
            dw_total = dw if dw_total is None else dw_total + dw
        if self.couple:
            state.q_limit = state.q_limit + self._limit_diffusion @ dw_total


class Scalar1DKernel:
    """Ensemble stepper for one-dimensional models with varying fields.

    All per-trajectory coefficients are elementwise closed forms in
    x = drag * h / m, so a step is a fixed sequence of vector operations.
    """

    def __init__(self, spec, mass, h, scheme, substeps, couple):
        if spec.dim != 1 or spec.batched is None:
            raise InvalidInputError(
                "scalar kernel requires a one-dimensional model with batched fields"
            )
        self.spec = spec
        self.fields = spec.batched
        self.mass = mass
        self.scheme = scheme
        self.substeps = substeps
        self.couple = couple
        self._h_sub = h / substeps
        self._sqrt_h = math.sqrt(self._h_sub)
        per_sub = 2 if scheme == "exponential" else 1
        self._draws_sub = per_sub
        self.draws_per_step = substeps * per_sub

    def _drag_at(self, t, q):
        gam = self.fields.drag(t, q)
        if not np.all(gam > 0.0):
            raise StabilityError("drag field lost its positive floor")
        return gam

    def advance(self, state: _BatchState, block: np.ndarray) -> None:
        m, h = self.mass, self._h_sub
        dw_total = None
        for s in range(self.substeps):
            z = block[s * self._draws_sub : (s + 1) * self._draws_sub]
            q, u = state.q[0], state.u[0]
            t = state.t + s * h
            gam = self._drag_at(t, q)
            sig = self.fields.sigma(t, q)
            force = (
                self.fields.force(t, q, u) if self.fields.force is not None else None
            )
            dw = self._sqrt_h * z[0]
            if self.scheme == "exponential":
                x = gam * (h / m)
                decay = np.exp(-x)
                phi1 = _scalar_phi1(x)
                xi_u = sig * (
                    phi1 * dw + np.sqrt(h * _scalar_conditional_var(x, phi1)) * z[1]
                )
                q_new = q + (h / m) * phi1 * u + (sig * dw - xi_u) / gam
                u_new = decay * u + xi_u
                if force is not None:
                    u_new += h * phi1 * force
                    q_new += (h * h / m) * _scalar_phi2(x, phi1) * force
            else:
                x = gam * (h / m)
                if float(x.max()) >= 1.0:
                    raise ConfigurationError(
                        "explicit scheme is unstable: step exceeds m/drag "
                        f"(max drag*h/m = {float(x.max()):.3f})"
                    )
                u_new = (1.0 - x) * u + sig * dw
                if force is not None:
                    u_new += h * force
                q_new = q + (h / m) * u
            state.q[0] = q_new
            state.u[0] = u_new
            dw_total = dw if dw_total is None else dw_total + dw
        if self.couple:
            ql = state.q_limit[0]
            gam_l = self._drag_at(state.t, ql)
            sig_l = self.fields.sigma(state.t, ql)
            dgam_l = self.fields.drag_derivative(state.t, ql)
            drift = -dgam_l * sig_l**2 / (2.0 * gam_l**3)
            if self.fields.limiting_force is not None:
                drift = drift + self.fields.limiting_force(state.t, ql) / gam_l
            state.q_limit[0] = ql + drift * (h * self.substeps) + (sig_l / gam_l) * dw_total


class GenericKernel:
    """Per-trajectory fallback for multidimensional varying fields.

    Runs the single-step operators in a Python loop; intended for tests and
    desk-scale diagnostics, not large ensembles.
    """

    def __init__(self, spec, mass, h, scheme, substeps, couple):
        self.spec = spec
        self.mass = mass
        self.scheme = scheme
        self.substeps = substeps
        self.couple = couple
        self._h_sub = h / substeps
        self._sqrt_h = math.sqrt(self._h_sub)
        per_sub = (
            spec.noise_dim + spec.dim if scheme == "exponential" else spec.noise_dim
        )
        self._draws_sub = per_sub
        self.draws_per_step = substeps * per_sub

    def advance(self, state: _BatchState, block: np.ndarray) -> None:
        n_w = self.spec.noise_dim
        n_traj = state.q.shape[1]
        h = self._h_sub
        for j in range(n_traj):
            ps = PathState(state.t, state.q[:, j], state.u[:, j], self.mass)
            dw_total = np.zeros(n_w)
            for s in range(self.substeps):
                z = block[s * self._draws_sub : (s + 1) * self._draws_sub, j]
                dw = self._sqrt_h * z[:n_w]
                if self.scheme == "exponential":
                    ps = step_underdamped_exponential(self.spec, ps, dw, z[n_w:], h)
                else:
                    ps = step_underdamped_em(self.spec, ps, dw, h)
                dw_total += dw
            state.q[:, j] = ps.q
            state.u[:, j] = ps.u
            if self.couple:
                state.q_limit[:, j] = step_limiting(
                    self.spec,
                    state.t,
                    state.q_limit[:, j],
                    dw_total,
                    h * self.substeps,
                )


def select_kernel(spec, mass, h, scheme, substeps, couple):
    """Pick the fastest kernel the model structure allows."""
    if spec.constant_coefficients and spec.zero_force:
        return ConstantKernel(spec, mass, h, scheme, substeps, couple)
    if spec.dim == 1 and spec.batched is not None:
        return Scalar1DKernel(spec, mass, h, scheme, substeps, couple)
    return GenericKernel(spec, mass, h, scheme, substeps, couple)


# ---------------------------------------------------------------------------
# ensemble driver


@dataclass(frozen=True)
class EnsembleRequest:
    """One ensemble simulation: grid, initial data, seeding, and outputs.

    ``sample_times`` are snapped to the nearest grid point.  When ``couple``
    is set the overdamped limit runs alongside on the same increments and
    ``track_sup_difference`` records the per-trajectory supremum of
    ``|q - q_limit|`` over the grid.  ``observable`` (an expression in t and
    q1..qn, or a callable ``g(t, Q)`` on (dim, n) position blocks) is
    integrated along both paths by the trapezoid rule.  ``window`` keeps the
    increments of the trailing window of that width for velocity-readout
    diagnostics.
    """

    mass: float
    horizon: float
    n_steps: int
    n_trajectories: int
    master_seed: int
    q0: tuple | None = None  # None means the origin
    u0: tuple | None = None
    scheme: str = "exponential"
    substeps: int = 1
    couple: bool = True
    sample_times: tuple = ()
    track_sup_difference: bool = False
    observable: object | None = None
    window: float | None = None
    store_increments: bool = False
    chunk_size: int = 16384

    def __post_init__(self):
        if self.mass <= 0.0 or self.horizon <= 0.0:
            raise InvalidInputError("mass and horizon must be positive")
        if self.n_steps < 1 or self.n_trajectories < 1:
            raise InvalidInputError("n_steps and n_trajectories must be >= 1")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if self.substeps < 1:
            raise ConfigurationError(f"substeps must be >= 1, got {self.substeps}")
        if self.chunk_size < 1:
            raise InvalidInputError("chunk_size must be >= 1")
        if self.track_sup_difference and not self.couple:
            raise ConfigurationError(
                "sup-difference tracking requires a coupled run"
            )

    @property
    def step(self) -> float:
        return self.horizon / self.n_steps

    def grid(self) -> np.ndarray:
        return self.step * np.arange(self.n_steps + 1)

    def sample_indices(self) -> list[int]:
        idx = []
        for t in self.sample_times:
            k = int(round(t / self.step))
            if not 0 <= k <= self.n_steps:
                raise InvalidInputError(
                    f"sample time {t} lies outside the horizon"
                )
            idx.append(k)
        return idx


@dataclass
class EnsembleResult:
    """Trajectory-ordered arrays produced by one ensemble run."""

    times: np.ndarray
    mass: float
    scheme: str
    q_final: np.ndarray  # (n_traj, dim)
    u_final: np.ndarray
    q_limit_final: np.ndarray | None
    sample_times: np.ndarray  # (S,) snapped to the grid
    q_samples: np.ndarray  # (S, n_traj, dim)
    u_samples: np.ndarray
    q_limit_samples: np.ndarray | None
    sup_difference: np.ndarray | None  # (n_traj,)
    observable: np.ndarray | None  # (n_traj,) along the inertial path
    observable_limit: np.ndarray | None
    window_start_index: int | None = None
    window_increments: np.ndarray | None = None  # (n_traj, Kw, noise_dim)
    window_q_limit: np.ndarray | None = None  # (n_traj, dim) at window start
    increments: np.ndarray | None = None  # (n_traj, K, noise_dim) if stored

    @property
    def z_final(self) -> np.ndarray:
        return self.u_final / math.sqrt(self.mass)

    def z_at(self, sample: int) -> np.ndarray:
        return self.u_samples[sample] / math.sqrt(self.mass)


def _compile_observable(observable, dim):
    if observable is None or callable(observable):
        return observable
    expr = compile_field(str(observable), state_variables(dim))

    def g(t, q_block, _e=expr):
        env = {f"q{i + 1}": q_block[i] for i in range(dim)}
        out = np.asarray(_e(t=t, **env), dtype=float)
        return np.broadcast_to(out, q_block.shape[1:]).copy()

    return g


def _noise_block_budget(draws, n_traj):
    """Steps per noise buffer: bounded memory, no effect on results."""
    return max(1, min(4096, 4_000_000 // max(1, draws * n_traj)))


def _run_chunk(spec, req: EnsembleRequest, start: int, count: int) -> dict:
    """Simulate trajectories [start, start+count) and reduce them.

    This is the worker payload; everything it returns is a plain array so
    chunks concatenate in trajectory order regardless of which process ran
    them.
    """
    dim, n_w = spec.dim, spec.noise_dim
    h = req.step
    n_steps = req.n_steps
    kernel = select_kernel(spec, req.mass, h, req.scheme, req.substeps, req.couple)
    draws = kernel.draws_per_step
    q0 = (
        np.zeros((dim, 1))
        if req.q0 is None
        else np.asarray(req.q0, dtype=float).reshape(dim, 1)
    )
    u0 = (
        np.zeros((dim, 1))
        if req.u0 is None
        else np.asarray(req.u0, dtype=float).reshape(dim, 1)
    )
    state = _BatchState(
        0.0,
        np.repeat(q0, count, axis=1),
        np.repeat(u0, count, axis=1),
        np.repeat(q0, count, axis=1) if req.couple else None,
    )
    sample_idx = req.sample_indices()
    samples = {}

    def record(k):
        if k in sample_idx:
            samples[k] = (
                state.q.T.copy(),
                state.u.T.copy(),
                state.q_limit.T.copy() if req.couple else None,
            )

    sup = np.zeros(count) if req.track_sup_difference else None
    g = _compile_observable(req.observable, dim)
    obs = obs_limit = None
    if g is not None:
        obs = np.zeros(count)
        g_prev = np.asarray(g(0.0, state.q), dtype=float)
        if req.couple:
            obs_limit = np.zeros(count)
            gl_prev = g_prev.copy()

    window_start = None
    window_inc = None
    window_ql = None
    if req.window is not None:
        width_steps = int(round(req.window / h))
        if width_steps < 8:
            raise ResolutionError(
                f"window of width {req.window} spans only {width_steps} grid "
                "steps; refine the grid"
            )
        window_start = n_steps - width_steps
        if window_start < 0:
            raise InvalidInputError("window is wider than the horizon")
        window_inc = np.empty((count, width_steps, n_w))
    stored = np.empty((count, n_steps, n_w)) if req.store_increments else None
    for buf in (window_inc, stored):
        if buf is not None and buf.size > 100_000_000:
            raise ConfigurationError(
                "increment storage would exceed the memory budget; lower the "
                "trajectory count or narrow the window"
            )

    gens = [trajectory_rng(req.master_seed, start + j) for j in range(count)]
    block_steps = _noise_block_budget(draws, count)
    buffer = np.empty((count, block_steps * draws))
    record(0)
    for k0 in range(0, n_steps, block_steps):
        b = min(block_steps, n_steps - k0)
        for j, gen in enumerate(gens):
            buffer[j, : b * draws] = gen.standard_normal(b * draws)
        # (step, draw, trajectory) with contiguous per-step slabs
        blocks = np.ascontiguousarray(
            buffer[:, : b * draws].reshape(count, b, draws).transpose(1, 2, 0)
        )
        for i in range(b):
            k = k0 + i
            state.t = k * h
            if window_start is not None and k >= window_start:
                if k == window_start:
                    window_ql = (
                        state.q_limit.T.copy() if req.couple else state.q.T.copy()
                    )
                window_inc[:, k - window_start, :] = (
                    math.sqrt(h) * blocks[i, :n_w].T
                )
            if stored is not None:
                stored[:, k, :] = math.sqrt(h) * blocks[i, :n_w].T
            kernel.advance(state, blocks[i])
            if sup is not None:
                diff = state.q - state.q_limit
                norms = (
                    np.abs(diff[0])
                    if dim == 1
                    else np.sqrt(np.sum(diff * diff, axis=0))
                )
                np.maximum(sup, norms, out=sup)
            if g is not None:
                g_new = np.asarray(g((k + 1) * h, state.q), dtype=float)
                obs += (h / 2.0) * (g_prev + g_new)
                g_prev = g_new
                if req.couple:
                    gl_new = np.asarray(g((k + 1) * h, state.q_limit), dtype=float)
                    obs_limit += (h / 2.0) * (gl_prev + gl_new)
                    gl_prev = gl_new
            record(k + 1)
    return {
        "q_final": state.q.T.copy(),
        "u_final": state.u.T.copy(),
        "q_limit_final": state.q_limit.T.copy() if req.couple else None,
        "samples": [samples[k] for k in sample_idx],
        "sup": sup,
        "observable": obs,
        "observable_limit": obs_limit,
        "window_start": window_start,
        "window_increments": window_inc,
        "window_q_limit": window_ql,
        "increments": stored,
    }


def _chunk_payload(args):
    model_config, req, start, count = args
    from .library import build_model

    return _run_chunk(build_model(model_config), req, start, count)


def _resolve_model(model):
    """Return (spec, picklable-config-or-None) for the ensemble driver."""
    if isinstance(model, SystemSpec):
        from .library import BUILTIN_MODELS

        config = {"builtin": model.name} if model.name in BUILTIN_MODELS else None
        return model, config
    from .library import build_model

    return build_model(model), model


def run_ensemble(model, request: EnsembleRequest, workers: int = 1) -> EnsembleResult:
    """Simulate an ensemble and concatenate per-chunk reductions.

    ``model`` is a :class:`SystemSpec` or a model-config mapping.  Chunks are
    fixed by ``request.chunk_size`` and processed in trajectory order; with
    ``workers > 1`` they are farmed to a process pool, which requires the
    model to be reconstructible from a config (built-in name or expression
    fields).
    """
    spec, config = _resolve_model(model)
    for label, value in (("q0", request.q0), ("u0", request.u0)):
        if value is not None and len(value) != spec.dim:
            raise InvalidInputError(
                f"{label} must have {spec.dim} components, got {value!r}"
            )
    n = request.n_trajectories
    bounds = [
        (s, min(request.chunk_size, n - s)) for s in range(0, n, request.chunk_size)
    ]
    if workers > 1 and config is None:
        raise ConfigurationError(
            "parallel runs need a model expressible as a config; pass the "
            "config mapping or use workers=1"
        )
    if workers > 1 and callable(request.observable):
        raise ConfigurationError(
            "parallel runs need an expression observable, not a callable"
        )
    if workers > 1 and len(bounds) > 1:
        jobs = [(config, request, s, c) for s, c in bounds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_payload, jobs))
    else:
        parts = [_run_chunk(spec, request, s, c) for s, c in bounds]

    def cat(key):
        if parts[0][key] is None:
            return None
        return np.concatenate([p[key] for p in parts], axis=0)

    sample_idx = request.sample_indices()
    n_samples = len(sample_idx)
    dims = (n_samples, n, spec.dim)
    q_s = np.empty(dims)
    u_s = np.empty(dims)
    ql_s = np.empty(dims) if request.couple else None
    for si in range(n_samples):
        offset = 0
        for p in parts:
            q_part, u_part, ql_part = p["samples"][si]
            rows = q_part.shape[0]
            q_s[si, offset : offset + rows] = q_part
            u_s[si, offset : offset + rows] = u_part
            if ql_s is not None:
                ql_s[si, offset : offset + rows] = ql_part
            offset += rows
    return EnsembleResult(
        times=request.grid(),
        mass=request.mass,
        scheme=request.scheme,
        q_final=cat("q_final"),
        u_final=cat("u_final"),
        q_limit_final=cat("q_limit_final"),
        sample_times=request.step * np.asarray(sample_idx, dtype=float),
        q_samples=q_s,
        u_samples=u_s,
        q_limit_samples=ql_s,
        sup_difference=cat("sup"),
        observable=cat("observable"),
        observable_limit=cat("observable_limit"),
        window_start_index=parts[0]["window_start"],
        window_increments=cat("window_increments"),
        window_q_limit=cat("window_q_limit"),
        increments=cat("increments"),
    )


# ---------------------------------------------------------------------------
# single-trajectory simulation and path functionals


@dataclass(frozen=True)
class PathTable:
    """Dense record of one trajectory on the grid."""

    times: np.ndarray  # (K+1,)
    q: np.ndarray  # (K+1, dim)
    u: np.ndarray | None = None  # (K+1, dim); None for the limit


def simulate_coupled(
    model,
    mass: float,
    q0,
    u0,
    horizon: float,
    n_steps: int,
    master_seed: int,
    trajectory_index: int,
    scheme: str = "exponential",
    substeps: int = 1,
) -> tuple[PathTable, PathTable, WienerPath]:
    """Simulate one inertial/limit pair on shared increments.

    Deterministic given (master seed, trajectory index, configuration); the
    trajectory consumes its stream exactly like the ensemble driver, so
    trajectory j of an ensemble and this function agree bit for bit.
    """
    spec, _ = _resolve_model(model)
    dim, n_w = spec.dim, spec.noise_dim
    q0 = (0.0,) * dim if q0 is None else tuple(q0)
    u0 = (0.0,) * dim if u0 is None else tuple(u0)
    if len(q0) != dim or len(u0) != dim:
        raise InvalidInputError(f"initial data must have {dim} components")
    h = horizon / n_steps
    kernel = select_kernel(spec, mass, h, scheme, substeps, True)
    draws = kernel.draws_per_step
    rng = trajectory_rng(master_seed, trajectory_index)
    state = _BatchState(
        0.0,
        np.asarray(q0, dtype=float).reshape(dim, 1).copy(),
        np.asarray(u0, dtype=float).reshape(dim, 1).copy(),
        np.asarray(q0, dtype=float).reshape(dim, 1).copy(),
    )
    times = h * np.arange(n_steps + 1)
    q_path = np.empty((n_steps + 1, dim))
    u_path = np.empty((n_steps + 1, dim))
    ql_path = np.empty((n_steps + 1, dim))
    q_path[0], u_path[0], ql_path[0] = state.q[:, 0], state.u[:, 0], state.q_limit[:, 0]
    increments = np.empty((n_steps, n_w))
    sqrt_h = math.sqrt(h / substeps)
    for k in range(n_steps):
        state.t = k * h
        z = rng.standard_normal(draws).reshape(draws, 1)
        per_sub = draws // substeps
        increments[k] = sqrt_h * sum(
            z[s * per_sub : s * per_sub + n_w, 0] for s in range(substeps)
        )
        kernel.advance(state, z)
        q_path[k + 1] = state.q[:, 0]
        u_path[k + 1] = state.u[:, 0]
        ql_path[k + 1] = state.q_limit[:, 0]
    wiener = WienerPath(times, increments, master_seed, trajectory_index)
    return (
        PathTable(times, q_path, u_path),
        PathTable(times, ql_path, None),
        wiener,
    )


def instantiate_observable(g, times, q_path) -> np.ndarray:
    """Cumulative trapezoid of g(t, q_t) along a stored path."""
    times = np.asarray(times, dtype=float)
    q_path = np.asarray(q_path, dtype=float)
    if q_path.ndim == 1:
        q_path = q_path[:, None]
    fn = _compile_observable(g, q_path.shape[1])
    values = np.array(
        [float(np.asarray(fn(t, q[:, None])).reshape(())) for t, q in zip(times, q_path)]
    )
    return cumulative_trapezoid(values, times, initial=0.0)


def _z7_weights(spec, t, q_freeze, window_times, mass):
    """Trapezoid weights of the velocity-readout kernel at frozen coefficients."""
    g = effective_drag(spec, t, q_freeze)
    sig = np.atleast_2d(np.asarray(spec.sigma(t, q_freeze), dtype=float))
    gs = g @ sig
    h = window_times[1] - window_times[0]
    weights = np.full(window_times.size, h)
    weights[0] = weights[-1] = h / 2.0
    mats = []
    for s, w in zip(window_times, weights):
        mats.append(w * (matrix_exponential(-g * ((t - s) / mass)) @ gs))
    return np.asarray(mats) / mass**1.5


def z7_diagnostic(spec, times, q_limit_path, wiener: WienerPath, t, mass, kappa=0.75):
    """Velocity readout from the increments over the trailing window.

    Integrates ``exp(-G (t-s)/m) G sigma (W_t - W_s)`` over ``s`` in
    ``[t - m^kappa, t]`` with coefficients frozen at the window start of the
    limiting path, scaled by ``m^{-3/2}``; its ensemble law approaches the
    local equilibrium covariance as the mass decreases.
    """
    if not 0.5 < kappa < 1.0:
        raise InvalidInputError(f"kappa must lie in (1/2, 1), got {kappa}")
    times = np.asarray(times, dtype=float)
    q_limit_path = np.asarray(q_limit_path, dtype=float)
    if q_limit_path.ndim == 1:
        q_limit_path = q_limit_path[:, None]
    width = mass**kappa
    if t - width < times[0] - 1e-12:
        raise InvalidInputError(
            f"window [{t - width:.4g}, {t:.4g}] starts before the path does"
        )
    h = times[1] - times[0]
    k_end = int(round((t - times[0]) / h))
    k_start = int(round((t - width - times[0]) / h))
    if k_end - k_start < 8:
        raise ResolutionError(
            f"window of width {width:.3g} spans only {k_end - k_start} grid "
            "steps; refine the grid"
        )
    window_times = times[k_start : k_end + 1]
    mats = _z7_weights(spec, t, q_limit_path[k_start], window_times, mass)
    w_values = wiener.values()
    deficit = w_values[k_end] - w_values[k_start : k_end + 1]  # W_t - W_s
    return np.einsum("sij,sj->i", mats, deficit)


def z7_ensemble(spec, result: EnsembleResult, mass, kappa=0.75) -> np.ndarray:
    """Vectorized velocity readout for every trajectory of an ensemble run.

    Requires the run to have kept a trailing increment window at least
    ``mass**kappa`` wide.
    """
    if result.window_increments is None:
        raise InvalidInputError("ensemble was run without an increment window")
    times = result.times
    h = times[1] - times[0]
    t = times[-1]
    width = mass**kappa
    width_steps = int(round(width / h))
    stored = result.window_increments.shape[1]
    if width_steps < 8:
        raise ResolutionError(
            f"window of width {width:.3g} spans only {width_steps} grid steps"
        )
    if width_steps > stored:
        raise InvalidInputError(
            f"stored window covers {stored} steps but kappa={kappa} needs "
            f"{width_steps}"
        )
    inc = result.window_increments[:, stored - width_steps :, :]
    k_start = result.window_start_index + (stored - width_steps)
    out = np.empty((inc.shape[0], spec.dim))
    window_times = times[k_start : k_start + width_steps + 1]
    # W_t - W_s per trajectory: reversed cumulative sums over the window
    deficit = np.concatenate(
        [
            np.cumsum(inc[:, ::-1, :], axis=1)[:, ::-1, :],
            np.zeros((inc.shape[0], 1, inc.shape[2])),
        ],
        axis=1,
    )
    if spec.constant_coefficients:
        mats = _z7_weights(spec, t, np.zeros(spec.dim), window_times, mass)
        return np.einsum("sij,nsj->ni", mats, deficit)
    q_freeze = (
        result.window_q_limit
        if result.window_q_limit is not None
        else result.q_final
    )
    for traj in range(inc.shape[0]):
        mats = _z7_weights(spec, t, q_freeze[traj], window_times, mass)
        out[traj] = np.einsum("sij,sj->i", mats, deficit[traj])
    return out
