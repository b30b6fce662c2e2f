"""Dense matrix kernels: exponentials, Lyapunov solves, covariance integrals.

Everything here operates on small dense float64 arrays sized by the field
dimension (not the ensemble), and certifies its own numerical quality where
the contract demands it.  Ensemble-scale vectorization lives in
:mod:`homogenize.integrators`; these kernels are the single-trajectory /
single-matrix ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import expm, solve_continuous_lyapunov

from .errors import InvalidInputError, NumericError, StabilityError

#: Relative residual allowed for the direct Lyapunov solve.
LYAPUNOV_RTOL = 1e-12

#: Default relative truncation error for the quadrature cross-check.
QUADRATURE_TAIL_TOL = 1e-12


def _as_square_matrix(a, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInputError(f"{name} must be a square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def _is_symmetric(a: np.ndarray) -> bool:
    scale = np.abs(a).max()
    return bool(np.abs(a - a.T).max() <= 1e-13 * max(scale, 1.0))


def matrix_exponential(a) -> np.ndarray:
    """Matrix exponential of a square array (scaling-and-squaring Pade)."""
    arr = _as_square_matrix(a, "a")
    out = expm(arr)
    if not np.all(np.isfinite(out)):
        raise NumericError("matrix exponential produced non-finite entries")
    return out


def symmetric_part_bounds(a) -> tuple[float, float]:
    """Smallest and largest eigenvalue of the symmetric part (a + a^T)/2."""
    arr = _as_square_matrix(a, "a")
    w = np.linalg.eigvalsh(0.5 * (arr + arr.T))
    return float(w[0]), float(w[-1])


def _certify_positive_spectrum(a: np.ndarray) -> float:
    """Return a positive decay floor for e^{-a z}, or raise StabilityError.

    The cheap certificate is a positive symmetric-part floor.  Matrices with
    an indefinite symmetric part but strictly positive eigenvalue real parts
    are still admissible for the Lyapunov solve, so fall back to the spectrum
    itself before rejecting (the returned floor is then only asymptotic).
    """
    lo, _ = symmetric_part_bounds(a)
    if lo > 0.0:
        return lo
    real_floor = float(np.linalg.eigvals(a).real.min())
    if real_floor <= 0.0:
        raise StabilityError(
            "spectral precondition violated: smallest eigenvalue real part "
            f"{real_floor:.6e} is not positive"
        )
    return real_floor


def solve_lyapunov(a, q) -> np.ndarray:
    """Solve ``A X + X A^T = Q`` for X.

    Every eigenvalue of A must have positive real part (certified via the
    symmetric part, with a direct spectrum check as fallback for non-normal
    inputs).  The result is residual-certified against LYAPUNOV_RTOL and
    symmetrized when Q is symmetric.
    """
    mat_a = _as_square_matrix(a, "a")
    mat_q = _as_square_matrix(q, "q")
    if mat_a.shape != mat_q.shape:
        raise InvalidInputError(
            f"shape mismatch: a is {mat_a.shape}, q is {mat_q.shape}"
        )
    _certify_positive_spectrum(mat_a)
    x = solve_continuous_lyapunov(mat_a, mat_q)
    residual = np.linalg.norm(mat_a @ x + x @ mat_a.T - mat_q, 2)
    scale = (
        np.linalg.norm(mat_a, 2) * np.linalg.norm(x, 2) + np.linalg.norm(mat_q, 2)
    )
    if residual > LYAPUNOV_RTOL * max(scale, np.finfo(float).tiny):
        raise NumericError(
            f"Lyapunov residual {residual:.3e} exceeds {LYAPUNOV_RTOL:.1e} * {scale:.3e}"
        )
    if _is_symmetric(mat_q):
        x = 0.5 * (x + x.T)
    return x


def equilibrium_covariance(gamma_tilde, noise_cov) -> np.ndarray:
    """Stationary velocity-scale covariance: solves G M + M G^T = S.

    ``noise_cov`` is the full noise covariance S = sigma sigma^T and must be
    symmetric positive semi-definite.
    """
    noise = _as_square_matrix(noise_cov, "noise_cov")
    if not _is_symmetric(noise):
        raise InvalidInputError("noise_cov must be symmetric")
    floor = float(np.linalg.eigvalsh(0.5 * (noise + noise.T))[0])
    if floor < -1e-12 * max(np.abs(noise).max(), 1.0):
        raise InvalidInputError("noise_cov must be positive semi-definite")
    return solve_lyapunov(gamma_tilde, noise)


def covariance_quadrature(
    gamma_tilde, noise_cov, tail_tol: float = QUADRATURE_TAIL_TOL
) -> np.ndarray:
    """Quadrature evaluation of ``int_0^inf exp(-G z) S exp(-G^T z) dz``.

    Independent cross-check for :func:`equilibrium_covariance`: composite
    12-node Gauss-Legendre panels out to a truncation point where the
    exponential tail bound drops below ``tail_tol`` relative to the
    stationary-covariance scale.  Shares no code with the Lyapunov solve
    beyond the matrix exponential.
    """
    g = _as_square_matrix(gamma_tilde, "gamma_tilde")
    s = _as_square_matrix(noise_cov, "noise_cov")
    lo, _ = symmetric_part_bounds(g)
    if lo <= 0.0:
        raise StabilityError(
            "quadrature truncation bound requires a positive symmetric-part floor"
        )
    upper = math.log(1.0 / tail_tol) / (2.0 * lo)
    width = min(upper, 1.0 / max(np.linalg.norm(g, 2), lo))
    n_panels = int(math.ceil(upper / width))
    nodes, weights = leggauss(12)
    offsets = 0.5 * width * (nodes + 1.0)
    scaled_w = 0.5 * width * weights
    decay_at_offset = [expm(-g * z) for z in offsets]
    decay_per_panel = expm(-g * width)
    panel_start = np.eye(g.shape[0])
    acc = np.zeros_like(s)
    for _ in range(n_panels):
        for mat, w in zip(decay_at_offset, scaled_w):
            f = panel_start @ mat
            acc += w * (f @ s @ f.T)
        panel_start = panel_start @ decay_per_panel
    return 0.5 * (acc + acc.T)


def finite_time_covariance(gamma_tilde, noise_cov, t: float, mass: float) -> np.ndarray:
    """Covariance accumulated over [0, t] at mass ``mass`` (velocity scale).

    Solves ``G X + X G^T = S - E S E^T`` with ``E = exp(-G t / mass)``; the
    exact finite-time analogue of :func:`equilibrium_covariance`, recovering
    it as t -> infinity and the zero matrix at t = 0.
    """
    g = _as_square_matrix(gamma_tilde, "gamma_tilde")
    s = _as_square_matrix(noise_cov, "noise_cov")
    if mass <= 0.0:
        raise InvalidInputError(f"mass must be positive, got {mass}")
    if t < 0.0:
        raise InvalidInputError(f"t must be non-negative, got {t}")
    if t == 0.0:
        return np.zeros_like(s)
    decay = expm(-g * (t / mass))
    rhs = s - decay @ s @ decay.T
    return solve_lyapunov(g, 0.5 * (rhs + rhs.T))


def exponential_integrals(a, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(exp(A h), int_0^h exp(A s) ds)`` via one block exponential."""
    mat = _as_square_matrix(a, "a")
    if h < 0.0:
        raise InvalidInputError(f"h must be non-negative, got {h}")
    n = mat.shape[0]
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = mat * h
    block[:n, n:] = np.eye(n) * h
    full = expm(block)
    return full[:n, :n], full[:n, n:]


def noise_covariance_integral(a, q, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(exp(A h), int_0^h exp(A s) Q exp(A^T s) ds)``.

    Uses the block-exponential (Van Loan) construction, which needs no
    inversion and is exact for singular A, so it works on augmented systems
    with conserved components.
    """
    mat_a = _as_square_matrix(a, "a")
    mat_q = _as_square_matrix(q, "q")
    if mat_a.shape != mat_q.shape:
        raise InvalidInputError("a and q must have matching shapes")
    if h < 0.0:
        raise InvalidInputError(f"h must be non-negative, got {h}")
    n = mat_a.shape[0]
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = mat_a * h
    block[:n, n:] = mat_q * h
    block[n:, n:] = -mat_a.T * h
    full = expm(block)
    prop = full[:n, :n]
    cov = full[:n, n:] @ prop.T
    return prop, 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class Propagator:
    """Fundamental-solution step over [t_start, t_end] with its decay certificate.

    ``sym_upper`` is the largest symmetric-part eigenvalue of the generator
    field seen at any substep; for a drag-generated field -G(t)/mass it equals
    -lambda/mass, so :meth:`decay_bound` reproduces the exp(-lambda dt/mass)
    contraction estimate with a 1 + 10 h roundoff allowance.
    """

    step_matrix: np.ndarray
    t_start: float
    t_end: float
    mass: float
    substeps: int
    sym_upper: float

    @property
    def substep_size(self) -> float:
        return (self.t_end - self.t_start) / self.substeps

    def decay_bound(self) -> float:
        return math.exp(self.sym_upper * (self.t_end - self.t_start)) * (
            1.0 + 10.0 * self.substep_size
        )

    def satisfies_decay(self) -> bool:
        return bool(np.linalg.norm(self.step_matrix, 2) <= self.decay_bound())


def propagate_step(
    field: Callable[[float], np.ndarray],
    t_start: float,
    t_end: float,
    substeps: int,
    mass: float = 1.0,
) -> Propagator:
    """Frozen-coefficient exponential propagator for ``dPhi/dt = field(t) Phi``.

    The field is frozen at the start of each substep and advanced with an
    exact matrix exponential, so the product inherits the per-factor
    contraction bound structurally instead of through a scheme-dependent
    stability condition.
    """
    if not t_end > t_start:
        raise InvalidInputError(f"need t_end > t_start, got [{t_start}, {t_end}]")
    if substeps < 1:
        raise InvalidInputError(f"substeps must be >= 1, got {substeps}")
    if mass <= 0.0:
        raise InvalidInputError(f"mass must be positive, got {mass}")
    h = (t_end - t_start) / substeps
    step = None
    sym_upper = -math.inf
    for k in range(substeps):
        gen = _as_square_matrix(field(t_start + k * h), "field value")
        sym_upper = max(sym_upper, symmetric_part_bounds(gen)[1])
        factor = matrix_exponential(gen * h)
        step = factor if step is None else factor @ step
    return Propagator(step, t_start, t_end, mass, substeps, sym_upper)


@dataclass(frozen=True)
class SpectralBounds:
    """Uniform spectral floors and norms of the drag/noise fields.

    ``drag_floor`` bounds the symmetric drag part from below, ``noise_floor``
    the noise covariance; the norms are (sampled) suprema of the effective
    drag and noise covariance.  These four numbers drive every contraction
    and covariance-window certificate.
    """

    drag_floor: float
    noise_floor: float
    drag_norm: float
    noise_norm: float

    def __post_init__(self):
        vals = (self.drag_floor, self.noise_floor, self.drag_norm, self.noise_norm)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError("spectral bounds must be finite")
        if self.drag_floor <= 0.0 or self.noise_floor <= 0.0:
            raise InvalidInputError("drag/noise floors must be positive")
        if self.drag_norm < self.drag_floor or self.noise_norm < self.noise_floor:
            raise InvalidInputError("norm bounds cannot undercut the floors")

    def covariance_window(self) -> tuple[float, float]:
        """Eigenvalue window [mu/(2 |G|), |S|/(2 lambda)] sandwiching the
        stationary covariance."""
        return (
            self.noise_floor / (2.0 * self.drag_norm),
            self.noise_norm / (2.0 * self.drag_floor),
        )

    def contains_covariance(self, cov, rtol: float = 1e-9) -> bool:
        arr = _as_square_matrix(cov, "cov")
        eigs = np.linalg.eigvalsh(0.5 * (arr + arr.T))
        lo, hi = self.covariance_window()
        slack = rtol * max(hi, 1.0)
        return bool(eigs[0] >= lo - slack and eigs[-1] <= hi + slack)

    def equilibration_gap(self, t: float, mass: float) -> float:
        """Bound on the finite-time-vs-stationary covariance distance."""
        return self.noise_norm / (2.0 * self.drag_floor) * math.exp(
            -2.0 * self.drag_floor * t / mass
        )
