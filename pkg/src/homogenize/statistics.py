"""Ensemble estimators and hypothesis checks for the overdamped limit.

Every verdict in here reports an effect size together with its standard
error; nothing passes or fails on a point estimate alone.  Monotonicity
down a mass ladder is always judged within statistical slack — for
constant-coefficient models the exact stepper leaves nothing but Monte
Carlo noise at every mass, so literal monotonicity would be a coin flip.

Estimator accumulation is a fixed-order reduction over trajectory-ordered
arrays, so results are bit-identical across worker counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.stats import linregress

from .errors import InvalidInputError, ResolutionError
from .integrators import EnsembleRequest, EnsembleResult, run_ensemble
from .kernels import equilibrium_covariance, finite_time_covariance
from .model import SystemSpec, diffusion_covariance, effective_drag

DEFAULT_MASS_LADDER = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)
DEFAULT_STEPS_PER_MASS = 20
SLACK_SIGMAS = 3.0


# ---------------------------------------------------------------------------
# ensemble container and characteristic-function probes


@dataclass(frozen=True)
class PathEnsemble:
    """Joint samples (J, q at sample times, z at sample times) of one mass.

    ``joint()`` flattens each trajectory into one row ordered observable
    first, then the position blocks time by time, then the rescaled-momentum
    blocks time by time; frequency vectors for the probes use that layout.
    """

    spec_id: str
    mass: float
    sample_times: np.ndarray  # (S,)
    q_samples: np.ndarray  # (S, N, dim)
    z_samples: np.ndarray  # (S, N, dim)
    observable: np.ndarray | None = None  # (N,)
    limit_q_samples: np.ndarray | None = None
    limit_observable: np.ndarray | None = None

    def __post_init__(self):
        q = np.asarray(self.q_samples, dtype=float)
        z = np.asarray(self.z_samples, dtype=float)
        if q.ndim != 3 or q.shape != z.shape:
            raise InvalidInputError(
                "q and z samples must share an (S, N, dim) shape"
            )
        if q.shape[1] < 2:
            raise InvalidInputError("an ensemble needs at least two trajectories")
        object.__setattr__(self, "q_samples", q)
        object.__setattr__(self, "z_samples", z)
        object.__setattr__(
            self, "sample_times", np.asarray(self.sample_times, dtype=float)
        )

    @classmethod
    def from_result(cls, spec: SystemSpec, result: EnsembleResult) -> "PathEnsemble":
        scale = 1.0 / math.sqrt(result.mass)
        return cls(
            spec_id=spec.name,
            mass=result.mass,
            sample_times=result.sample_times,
            q_samples=result.q_samples,
            z_samples=result.u_samples * scale,
            observable=result.observable,
            limit_q_samples=result.q_limit_samples,
            limit_observable=result.observable_limit,
        )

    @property
    def n_trajectories(self) -> int:
        return self.q_samples.shape[1]

    @property
    def dim(self) -> int:
        return self.q_samples.shape[2]

    @property
    def n_times(self) -> int:
        return self.q_samples.shape[0]

    @property
    def has_observable(self) -> bool:
        return self.observable is not None

    @property
    def joint_width(self) -> int:
        return (1 if self.has_observable else 0) + 2 * self.n_times * self.dim

    def q_block(self, time_index: int) -> slice:
        start = (1 if self.has_observable else 0) + time_index * self.dim
        return slice(start, start + self.dim)

    def z_block(self, time_index: int) -> slice:
        start = (
            (1 if self.has_observable else 0)
            + self.n_times * self.dim
            + time_index * self.dim
        )
        return slice(start, start + self.dim)

    def joint(self) -> np.ndarray:
        n = self.n_trajectories
        cols = [] if self.observable is None else [self.observable[:, None]]
        cols.extend(self.q_samples[j] for j in range(self.n_times))
        cols.extend(self.z_samples[j] for j in range(self.n_times))
        out = np.hstack(cols)
        assert out.shape == (n, self.joint_width)
        return out

    def limit_joint(self) -> np.ndarray:
        """(J, q)-block rows of the limiting ensemble (no z columns)."""
        if self.limit_q_samples is None:
            raise InvalidInputError("ensemble was built without a coupled limit")
        cols = [] if self.limit_observable is None else [self.limit_observable[:, None]]
        cols.extend(self.limit_q_samples[j] for j in range(self.n_times))
        return np.hstack(cols)


@dataclass(frozen=True)
class CFProbe:
    """One characteristic-function evaluation with its jackknife error."""

    k: np.ndarray
    estimate: complex
    stderr: float

    def __post_init__(self):
        if abs(self.estimate) > 1.0 + 1e-12:
            raise InvalidInputError("characteristic function exceeded modulus one")


def _mean_with_jackknife(values: np.ndarray) -> tuple[complex, float]:
    """Mean of complex samples and its leave-one-out (jackknife) stderr.

    For the plain mean the jackknife variance collapses to
    sum |v_i - mean|^2 / (N (N-1)), computed here directly.
    """
    n = values.shape[0]
    mean = values.mean()
    spread = float((np.abs(values - mean) ** 2).sum())
    return complex(mean), math.sqrt(spread / (n * (n - 1)))


def empirical_cf(ensemble: PathEnsemble, k) -> CFProbe:
    """Sample characteristic function of the joint block at frequency k."""
    k = np.asarray(k, dtype=float)
    if k.shape != (ensemble.joint_width,):
        raise InvalidInputError(
            f"frequency must have {ensemble.joint_width} components, got {k.shape}"
        )
    if ensemble.n_trajectories < 100:
        raise InvalidInputError("need at least 100 trajectories for a stable stderr")
    values = np.exp(1j * (ensemble.joint() @ k))
    estimate, stderr = _mean_with_jackknife(values)
    return CFProbe(k=k, estimate=estimate, stderr=stderr)


def local_equilibrium_covariance(spec: SystemSpec, t: float, q_rows) -> np.ndarray:
    """M(t, q) for a batch of positions: (N, dim, dim).

    Constant-coefficient models collapse to one Lyapunov solve; scalar models
    use the closed form sigma^2 / (2 drag); anything else loops.
    """
    q_rows = np.atleast_2d(np.asarray(q_rows, dtype=float))
    n = q_rows.shape[0]
    if spec.constant_coefficients:
        m0 = equilibrium_covariance(
            effective_drag(spec, t, q_rows[0]),
            diffusion_covariance(spec, t, q_rows[0]),
        )
        return np.broadcast_to(m0, (n, spec.dim, spec.dim))
    if spec.dim == 1 and spec.batched is not None:
        q = q_rows[:, 0]
        m_vals = spec.batched.sigma(t, q) ** 2 / (2.0 * spec.batched.drag(t, q))
        return m_vals[:, None, None]
    out = np.empty((n, spec.dim, spec.dim))
    for i in range(n):
        out[i] = equilibrium_covariance(
            effective_drag(spec, t, q_rows[i]),
            diffusion_covariance(spec, t, q_rows[i]),
        )
    return out


def predicted_cf(ensemble: PathEnsemble, k, spec: SystemSpec) -> CFProbe:
    """Limit-law characteristic function at frequency k.

    Monte Carlo average over the limiting ensemble of
    exp(i k0.(J, q-blocks)) * prod_j exp(-k_j.M(t_j, q_j) k_j / 2) — the
    z-blocks enter through the Gaussian mixture, not through samples.
    """
    k = np.asarray(k, dtype=float)
    if k.shape != (ensemble.joint_width,):
        raise InvalidInputError(
            f"frequency must have {ensemble.joint_width} components, got {k.shape}"
        )
    base = ensemble.limit_joint()
    k0 = k[: base.shape[1]]
    phase = base @ k0
    damp = np.zeros(ensemble.limit_q_samples.shape[1])
    for j in range(ensemble.n_times):
        kj = k[ensemble.z_block(j)]
        if not np.any(kj):
            continue
        m_batch = local_equilibrium_covariance(
            spec, float(ensemble.sample_times[j]), ensemble.limit_q_samples[j]
        )
        damp += 0.5 * np.einsum("nab,a,b->n", m_batch, kj, kj)
    values = np.exp(1j * phase - damp)
    estimate, stderr = _mean_with_jackknife(values)
    return CFProbe(k=k, estimate=estimate, stderr=stderr)


def frequency_panel(dim: int, norms=(0.5, 1.0, 2.0)) -> list[np.ndarray]:
    """Axis-aligned plus one diagonal direction at each requested norm."""
    directions = [np.eye(dim)[i] for i in range(dim)]
    if dim > 1:
        directions.append(np.ones(dim) / math.sqrt(dim))
    return [r * d for d in directions for r in norms]


def joint_frequency_panel(ensemble: PathEnsemble, norms=(0.5, 1.0, 2.0)):
    """Labeled frequency vectors probing each q/z block plus one mixed probe."""
    panel = []
    for j in range(ensemble.n_times):
        t = float(ensemble.sample_times[j])
        for block, name in ((ensemble.z_block(j), "z"), (ensemble.q_block(j), "q")):
            for vec in frequency_panel(ensemble.dim, norms):
                k = np.zeros(ensemble.joint_width)
                k[block] = vec
                panel.append((f"{name}[t={t:g}] k={np.round(vec, 3).tolist()}", k))
    mixed = np.zeros(ensemble.joint_width)
    mixed[ensemble.q_block(0)] = 1.0 / math.sqrt(ensemble.dim)
    mixed[ensemble.z_block(0)] = 1.0 / math.sqrt(ensemble.dim)
    panel.append((f"q+z[t={float(ensemble.sample_times[0]):g}] mixed", mixed))
    if ensemble.has_observable:
        k = np.zeros(ensemble.joint_width)
        k[0] = 1.0
        panel.append(("observable k=1", k))
    return panel


# ---------------------------------------------------------------------------
# verdict helpers


def decreasing_within_slack(values, stderrs, sigmas=SLACK_SIGMAS) -> bool:
    """True when each step down the ladder decreases up to statistical slack."""
    values = np.asarray(values, dtype=float)
    stderrs = np.asarray(stderrs, dtype=float)
    for i in range(values.size - 1):
        if values[i + 1] > values[i] + sigmas * (stderrs[i] + stderrs[i + 1]):
            return False
    return True


def covariance_with_stderr(x: np.ndarray, y: np.ndarray | None = None):
    """Cross-covariance of trajectory rows with per-entry standard errors."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = x if y is None else np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise InvalidInputError("need matching sample counts of at least two")
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cov = xc.T @ yc / n
    second = np.einsum("ni,nj->ij", xc**2, yc**2) / n
    stderr = np.sqrt(np.clip(second - cov**2, 0.0, None) / n)
    return cov, stderr


def _ladder_request(mass, horizon, steps_per_mass, n_traj, seed, **kw):
    n_steps = max(1, int(round(horizon / (mass / steps_per_mass))))
    return EnsembleRequest(
        mass=mass,
        horizon=horizon,
        n_steps=n_steps,
        n_trajectories=n_traj,
        master_seed=seed,
        **kw,
    )


# ---------------------------------------------------------------------------
# weak convergence of the joint law


@dataclass
class WeakConvergenceReport:
    name: str
    masses: list
    discrepancies: list  # max over the panel, per mass
    stderrs: list  # combined stderr at the maximizing frequency
    worst_frequencies: list
    bias_allowance: float
    covariance_effect: float  # max-entry |Cov(z) - mean M| at final mass
    covariance_stderr: float
    cross_time_effect: float | None
    cross_time_stderr: float | None
    decreasing: bool
    final_ok: bool
    covariance_ok: bool
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "masses": list(map(float, self.masses)),
            "cf_discrepancy": list(map(float, self.discrepancies)),
            "cf_stderr": list(map(float, self.stderrs)),
            "worst_frequency": list(self.worst_frequencies),
            "bias_allowance": float(self.bias_allowance),
            "covariance_effect": float(self.covariance_effect),
            "covariance_stderr": float(self.covariance_stderr),
            "cross_time_effect": self.cross_time_effect,
            "cross_time_stderr": self.cross_time_stderr,
            "decreasing": self.decreasing,
            "final_ok": self.final_ok,
            "covariance_ok": self.covariance_ok,
        }


def _cf_discrepancy(spec, ensemble, panel):
    worst = (None, -1.0, 0.0)
    for label, k in panel:
        emp = empirical_cf(ensemble, k)
        pred = predicted_cf(ensemble, k, spec)
        d = abs(emp.estimate - pred.estimate)
        if d > worst[1]:
            worst = (label, d, emp.stderr + pred.stderr)
    return worst


def weak_convergence_test(
    model,
    mass_ladder=DEFAULT_MASS_LADDER,
    times=(1.0,),
    n_trajectories=20_000,
    master_seed=2025,
    norms=(0.5, 1.0, 2.0),
    steps_per_mass=DEFAULT_STEPS_PER_MASS,
    workers=1,
    observable=None,
    q0=None,
    u0=None,
    request_options=None,
) -> WeakConvergenceReport:
    """Characteristic-function comparison of the joint law down a mass ladder.

    Per mass: max over the frequency panel of |empirical - predicted|.  The
    verdict asks that the discrepancy decrease within slack, that the final
    value sit within three combined stderrs plus an h-halving bias allowance,
    and that the final-mass covariance of z match the local-equilibrium
    target entrywise.
    """
    from .integrators import _resolve_model

    spec, _ = _resolve_model(model)
    horizon = max(times)
    masses, discs, errs, labels = [], [], [], []
    ensembles = {}
    for mass in mass_ladder:
        req = _ladder_request(
            mass,
            horizon,
            steps_per_mass,
            n_trajectories,
            master_seed,
            sample_times=tuple(times),
            couple=True,
            observable=observable,
            q0=q0,
            u0=u0,
            **(request_options or {}),
        )
        ensemble = PathEnsemble.from_result(spec, run_ensemble(model, req, workers))
        ensembles[mass] = ensemble
        panel = joint_frequency_panel(ensemble, norms)
        label, d, err = _cf_discrepancy(spec, ensemble, panel)
        masses.append(mass)
        discs.append(d)
        errs.append(err)
        labels.append(label)
    # discretization-bias allowance: re-run the largest mass at half the step
    mass0 = mass_ladder[0]
    req_half = _ladder_request(
        mass0,
        horizon,
        2 * steps_per_mass,
        n_trajectories,
        master_seed,
        sample_times=tuple(times),
        couple=True,
        observable=observable,
        q0=q0,
        u0=u0,
        **(request_options or {}),
    )
    half = PathEnsemble.from_result(spec, run_ensemble(model, req_half, workers))
    panel = joint_frequency_panel(half, norms)
    bias = 0.0
    for label, k in panel:
        e_half = empirical_cf(half, k).estimate
        e_full = empirical_cf(ensembles[mass0], k).estimate
        bias = max(bias, abs(e_half - e_full))

    final = ensembles[mass_ladder[-1]]
    z_final = final.z_samples[-1]
    cov, cov_se = covariance_with_stderr(z_final)
    m_target = local_equilibrium_covariance(
        spec, float(final.sample_times[-1]), final.limit_q_samples[-1]
    ).mean(axis=0)
    cov_effect = float(np.abs(cov - m_target).max())
    cov_stderr = float(cov_se.flat[np.abs(cov - m_target).argmax()])
    covariance_ok = bool(np.all(np.abs(cov - m_target) <= SLACK_SIGMAS * cov_se))

    cross_effect = cross_se_val = None
    if final.n_times >= 2:
        c, cse = covariance_with_stderr(final.z_samples[0], final.z_samples[-1])
        cross_effect = float(np.abs(c).max())
        cross_se_val = float(cse.flat[np.abs(c).argmax()])

    decreasing = decreasing_within_slack(discs, errs)
    final_ok = discs[-1] <= SLACK_SIGMAS * (errs[-1] + bias)
    return WeakConvergenceReport(
        name="weak-convergence",
        masses=masses,
        discrepancies=discs,
        stderrs=errs,
        worst_frequencies=labels,
        bias_allowance=float(bias),
        covariance_effect=cov_effect,
        covariance_stderr=cov_stderr,
        cross_time_effect=cross_effect,
        cross_time_stderr=cross_se_val,
        decreasing=decreasing,
        final_ok=bool(final_ok),
        covariance_ok=covariance_ok,
        passed=bool(decreasing and final_ok and covariance_ok),
    )


# ---------------------------------------------------------------------------
# conditional local equilibrium


@dataclass
class ConditionalCovarianceReport:
    name: str
    bin_centers: list
    bin_counts: list
    effects: list  # max-entry |Cov(z | bin) - M(t, center)|
    stderrs: list
    allowances: list  # target variation across the bin
    flagged: list  # under-filled bins (excluded from the verdict)
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "bin_centers": list(map(float, self.bin_centers)),
            "bin_counts": list(map(int, self.bin_counts)),
            "effect": list(map(float, self.effects)),
            "stderr": list(map(float, self.stderrs)),
            "allowance": list(map(float, self.allowances)),
            "flagged": list(map(bool, self.flagged)),
        }

    def table(self):
        header = ["bin_center", "count", "effect", "stderr", "allowance", "flagged"]
        rows = list(
            zip(
                self.bin_centers,
                self.bin_counts,
                self.effects,
                self.stderrs,
                self.allowances,
                self.flagged,
            )
        )
        return header, rows


def conditional_covariance_test(
    ensemble: PathEnsemble,
    spec: SystemSpec,
    time_index: int = -1,
    n_bins: int = 8,
    min_bin_count: int = 500,
) -> ConditionalCovarianceReport:
    """Binned covariance of z against the local-equilibrium target.

    Bins are equal-count along the first position coordinate; each filled
    bin must match M(t, bin center) entrywise within three binned stderrs
    plus the variation of the target across the bin.  Under-filled bins are
    flagged and excluded rather than failed.
    """
    t = float(ensemble.sample_times[time_index])
    q = ensemble.q_samples[time_index]
    z = ensemble.z_samples[time_index]
    coord = q[:, 0]
    edges = np.quantile(coord, np.linspace(0.0, 1.0, n_bins + 1))
    edges[0] -= 1.0
    edges[-1] += 1.0
    centers, counts, effects, stderrs, allowances, flagged = [], [], [], [], [], []
    passed = True
    for b in range(n_bins):
        mask = (coord >= edges[b]) & (coord < edges[b + 1])
        count = int(mask.sum())
        center_q = q[mask].mean(axis=0) if count else np.zeros(ensemble.dim)
        centers.append(float(center_q[0]) if count else math.nan)
        counts.append(count)
        if count < max(2, min_bin_count):
            effects.append(math.nan)
            stderrs.append(math.nan)
            allowances.append(math.nan)
            flagged.append(True)
            continue
        cov, cov_se = covariance_with_stderr(z[mask])
        target = local_equilibrium_covariance(spec, t, center_q[None, :])[0]
        lo = center_q.copy()
        hi = center_q.copy()
        lo[0], hi[0] = edges[b], edges[b + 1]
        spread = np.abs(
            local_equilibrium_covariance(spec, t, lo[None, :])[0]
            - local_equilibrium_covariance(spec, t, hi[None, :])[0]
        )
        diff = np.abs(cov - target)
        worst = diff.argmax()
        effects.append(float(diff.flat[worst]))
        stderrs.append(float(cov_se.flat[worst]))
        allowances.append(float(spread.flat[worst]))
        flagged.append(False)
        if np.any(diff > SLACK_SIGMAS * cov_se + spread):
            passed = False
    if all(flagged):
        raise InvalidInputError("every bin is under-filled; increase the ensemble")
    return ConditionalCovarianceReport(
        name="conditional-covariance",
        bin_centers=centers,
        bin_counts=counts,
        effects=effects,
        stderrs=stderrs,
        allowances=allowances,
        flagged=flagged,
        passed=passed,
    )


# ---------------------------------------------------------------------------
# convergence-rate fits


@dataclass(frozen=True)
class RateFit:
    """Log-log least-squares fit of an error statistic against mass."""

    masses: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    stderr: float
    slope_ci: tuple

    def to_dict(self) -> dict:
        return {
            "masses": self.masses.tolist(),
            "errors": self.errors.tolist(),
            "slope": self.slope,
            "intercept": self.intercept,
            "stderr": self.stderr,
            "slope_ci": list(self.slope_ci),
        }


def rate_fit(masses, errors) -> RateFit:
    masses = np.asarray(masses, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if masses.size < 4:
        raise InvalidInputError("rate fits need at least four ladder points")
    if np.any(np.diff(masses) >= 0.0):
        raise InvalidInputError("mass ladder must be strictly decreasing")
    if masses.max() / masses.min() < 100.0 * (1.0 - 1e-12):
        raise InvalidInputError("mass ladder must span at least two decades")
    if np.any(errors <= 0.0):
        raise InvalidInputError("error statistics must be positive")
    fit = linregress(np.log(masses), np.log(errors))
    return RateFit(
        masses=masses,
        errors=errors,
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        stderr=float(fit.stderr),
        slope_ci=(
            float(fit.slope - 2.0 * fit.stderr),
            float(fit.slope + 2.0 * fit.stderr),
        ),
    )


@dataclass
class CouplingRateReport:
    name: str
    masses: list
    sup_errors: list
    sup_stderrs: list
    final_errors: list
    sup_fit: RateFit
    final_fit: RateFit
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "masses": list(map(float, self.masses)),
            "sup_error": list(map(float, self.sup_errors)),
            "sup_stderr": list(map(float, self.sup_stderrs)),
            "final_error": list(map(float, self.final_errors)),
            "sup_fit": self.sup_fit.to_dict(),
            "final_fit": self.final_fit.to_dict(),
        }

    def table(self):
        header = ["mass", "sup_error", "sup_stderr", "final_error"]
        rows = list(
            zip(self.masses, self.sup_errors, self.sup_stderrs, self.final_errors)
        )
        return header, rows


def coupling_rate_test(
    model,
    mass_ladder=DEFAULT_MASS_LADDER,
    horizon=1.0,
    n_trajectories=5_000,
    master_seed=2025,
    steps_per_mass=DEFAULT_STEPS_PER_MASS,
    slope_range=(0.4, 0.6),
    workers=1,
    q0=None,
    u0=None,
    request_options=None,
) -> CouplingRateReport:
    """Pathwise coupling error against mass, fitted on a log-log scale.

    The error statistic is the ensemble mean of sup over the grid of
    |q_inertial - q_limit| per mass (both paths share increments); its
    fitted exponent should straddle the square-root rate.
    """
    from .integrators import _resolve_model

    spec, _ = _resolve_model(model)
    sups, sup_ses, finals = [], [], []
    for mass in mass_ladder:
        req = _ladder_request(
            mass,
            horizon,
            steps_per_mass,
            n_trajectories,
            master_seed,
            couple=True,
            track_sup_difference=True,
            q0=q0,
            u0=u0,
            **(request_options or {}),
        )
        res = run_ensemble(model, req, workers)
        sup = res.sup_difference
        sups.append(float(sup.mean()))
        sup_ses.append(float(sup.std(ddof=1) / math.sqrt(sup.size)))
        diff = res.q_final - res.q_limit_final
        finals.append(float(np.sqrt((diff**2).sum(axis=1)).mean()))
    sup_fit = rate_fit(mass_ladder, sups)
    final_fit = rate_fit(mass_ladder, finals)
    passed = slope_range[0] <= sup_fit.slope <= slope_range[1]
    return CouplingRateReport(
        name="coupling-rate",
        masses=list(mass_ladder),
        sup_errors=sups,
        sup_stderrs=sup_ses,
        final_errors=finals,
        sup_fit=sup_fit,
        final_fit=final_fit,
        passed=bool(passed),
    )


# ---------------------------------------------------------------------------
# observable limits via Gauss-Hermite mixtures


def gauss_hermite_expectation(h, j_values, q_rows, m_batch, order=8):
    """E[h(J, q, Z)] with Z ~ N(0, M, per row) by tensor Gauss-Hermite.

    ``h`` maps (J, q, z) arrays with leading sample axis to one value per
    sample; the quadrature supplies z = sqrt(2) L xi at each node.
    """
    q_rows = np.atleast_2d(q_rows)
    n, dim = q_rows.shape
    nodes, weights = hermgauss(order)
    grids = np.meshgrid(*([nodes] * dim), indexing="ij")
    xi = np.stack([g.ravel() for g in grids], axis=1)  # (order^dim, dim)
    w_grids = np.meshgrid(*([weights] * dim), indexing="ij")
    w = np.prod(np.stack([g.ravel() for g in w_grids], axis=1), axis=1)
    w = w / math.pi ** (dim / 2.0)
    m_batch = np.asarray(m_batch, dtype=float)
    if m_batch.ndim == 2:
        m_batch = np.broadcast_to(m_batch, (n, dim, dim))
    try:
        roots = np.linalg.cholesky(m_batch)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(m_batch)
        roots = vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]
    out = np.zeros(n)
    for node_w, node_xi in zip(w, xi):
        z = math.sqrt(2.0) * np.einsum("nab,b->na", roots, node_xi)
        out += node_w * np.asarray(h(j_values, q_rows, z), dtype=float)
    return out


@dataclass
class ObservableLimitReport:
    name: str
    masses: list
    empirical: list
    empirical_stderrs: list
    target: float
    target_stderr: float
    discrepancies: list
    bias_allowance: float
    decreasing: bool
    final_ok: bool
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "masses": list(map(float, self.masses)),
            "empirical": list(map(float, self.empirical)),
            "empirical_stderr": list(map(float, self.empirical_stderrs)),
            "target": float(self.target),
            "target_stderr": float(self.target_stderr),
            "discrepancy": list(map(float, self.discrepancies)),
            "bias_allowance": float(self.bias_allowance),
            "decreasing": self.decreasing,
            "final_ok": self.final_ok,
        }

    def table(self):
        header = ["mass", "empirical", "stderr", "discrepancy"]
        rows = list(
            zip(self.masses, self.empirical, self.empirical_stderrs, self.discrepancies)
        )
        return header, rows


def observable_limit_test(
    model,
    h_observable,
    mass_ladder=DEFAULT_MASS_LADDER,
    t=1.0,
    n_trajectories=20_000,
    master_seed=2025,
    steps_per_mass=DEFAULT_STEPS_PER_MASS,
    order=8,
    observable=None,
    workers=1,
    q0=None,
    u0=None,
    request_options=None,
) -> ObservableLimitReport:
    """Ensemble averages of h(J, q, z) against the Gaussian-mixture target.

    The target integrates the z-argument against N(0, M(t, q)) by
    Gauss-Hermite quadrature over the limiting ensemble of the smallest
    mass; quadrature convergence is certified by comparing two orders.
    """
    from .integrators import _resolve_model

    spec, _ = _resolve_model(model)
    results = {}
    for mass in mass_ladder:
        req = _ladder_request(
            mass,
            t,
            steps_per_mass,
            n_trajectories,
            master_seed,
            sample_times=(t,),
            couple=True,
            observable=observable,
            q0=q0,
            u0=u0,
            **(request_options or {}),
        )
        results[mass] = run_ensemble(model, req, workers)

    def empirical_mean(res):
        j_vals = res.observable if res.observable is not None else np.zeros(
            res.q_samples.shape[1]
        )
        vals = np.asarray(
            h_observable(j_vals, res.q_samples[-1], res.u_samples[-1] / math.sqrt(res.mass)),
            dtype=float,
        )
        return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))

    empirical, emp_ses = [], []
    for mass in mass_ladder:
        mean, se = empirical_mean(results[mass])
        empirical.append(mean)
        emp_ses.append(se)

    smallest = results[mass_ladder[-1]]
    q_limit = smallest.q_limit_samples[-1]
    j_limit = (
        smallest.observable_limit
        if smallest.observable_limit is not None
        else np.zeros(q_limit.shape[0])
    )
    m_batch = local_equilibrium_covariance(spec, t, q_limit)
    target_vals = gauss_hermite_expectation(h_observable, j_limit, q_limit, m_batch, order)
    check_vals = gauss_hermite_expectation(
        h_observable, j_limit, q_limit, m_batch, order + 4
    )
    drift = float(np.abs(target_vals - check_vals).mean())
    if drift > 1e-8 * (1.0 + float(np.abs(target_vals).mean())):
        raise ResolutionError(
            f"Gauss-Hermite order {order} has not converged (order bump moves "
            f"the target by {drift:.3e}); raise the order"
        )
    target = float(target_vals.mean())
    target_se = float(target_vals.std(ddof=1) / math.sqrt(target_vals.size))

    # h-halving bias allowance at the largest mass
    mass0 = mass_ladder[0]
    req_half = _ladder_request(
        mass0,
        t,
        2 * steps_per_mass,
        n_trajectories,
        master_seed,
        sample_times=(t,),
        couple=True,
        observable=observable,
        q0=q0,
        u0=u0,
        **(request_options or {}),
    )
    half_mean, _ = empirical_mean(run_ensemble(model, req_half, workers))
    bias = abs(half_mean - empirical[0])

    discrepancies = [abs(e - target) for e in empirical]
    ses = [se + target_se for se in emp_ses]
    decreasing = decreasing_within_slack(discrepancies, ses)
    final_ok = discrepancies[-1] <= SLACK_SIGMAS * ses[-1] + bias
    return ObservableLimitReport(
        name="observable-limit",
        masses=list(mass_ladder),
        empirical=empirical,
        empirical_stderrs=emp_ses,
        target=target,
        target_stderr=target_se,
        discrepancies=discrepancies,
        bias_allowance=float(bias),
        decreasing=decreasing,
        final_ok=bool(final_ok),
        passed=bool(decreasing and final_ok),
    )


# ---------------------------------------------------------------------------
# velocity divergence


@dataclass
class VelocityDivergenceReport:
    name: str
    masses: list
    thresholds: list
    probabilities: list
    stderrs: list
    exact: list  # Gaussian-law probabilities where available, else None
    decreasing: bool
    cdf_consistent: bool
    final_probability: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "masses": list(map(float, self.masses)),
            "threshold": list(map(float, self.thresholds)),
            "probability": list(map(float, self.probabilities)),
            "stderr": list(map(float, self.stderrs)),
            "exact": [None if e is None else float(e) for e in self.exact],
            "decreasing": self.decreasing,
            "cdf_consistent": self.cdf_consistent,
            "final_probability": float(self.final_probability),
        }

    def table(self):
        header = ["mass", "threshold", "probability", "stderr", "exact"]
        rows = list(
            zip(self.masses, self.thresholds, self.probabilities, self.stderrs, self.exact)
        )
        return header, rows


def velocity_divergence_test(
    model,
    t=1.0,
    radius=1.0,
    exponent=0.25,
    mass_ladder=DEFAULT_MASS_LADDER,
    n_trajectories=10_000,
    master_seed=2025,
    steps_per_mass=DEFAULT_STEPS_PER_MASS,
    workers=1,
    q0=None,
    u0=None,
    request_options=None,
) -> VelocityDivergenceReport:
    """P(|velocity| <= radius / mass^exponent) down the mass ladder.

    The velocity scales like mass^{-1/2}, so for exponents strictly inside
    (0, 1/2) the probability of staying under the threshold must vanish.
    For constant scalar models the exact Gaussian law of the velocity at
    time t cross-checks every empirical point.
    """
    if not 0.0 < exponent < 0.5:
        raise InvalidInputError(
            f"exponent must lie strictly inside (0, 1/2), got {exponent}"
        )
    from .integrators import _resolve_model

    spec, _ = _resolve_model(model)
    probs, ses, exacts, thresholds = [], [], [], []
    for mass in mass_ladder:
        req = _ladder_request(
            mass,
            t,
            steps_per_mass,
            n_trajectories,
            master_seed,
            couple=False,
            q0=q0,
            u0=u0,
            **(request_options or {}),
        )
        res = run_ensemble(model, req, workers)
        velocity = res.u_final / mass
        speeds = np.sqrt((velocity**2).sum(axis=1))
        threshold = radius * mass ** (-exponent)
        p = float((speeds <= threshold).mean())
        n = speeds.size
        probs.append(p)
        ses.append(max(math.sqrt(p * (1.0 - p) / n), 1.0 / n))
        thresholds.append(threshold)
        rest_start = u0 is None or tuple(u0) == (0.0,)
        if spec.constant_coefficients and spec.dim == 1 and rest_start:
            g = effective_drag(spec, 0.0, np.zeros(1))
            s = diffusion_covariance(spec, 0.0, np.zeros(1))
            z_var = float(finite_time_covariance(g, s, t, mass)[0, 0])
            sd_v = math.sqrt(mass * z_var) / mass
            exacts.append(math.erf(threshold / (sd_v * math.sqrt(2.0))))
        else:
            exacts.append(None)
    decreasing = decreasing_within_slack(probs, ses)
    cdf_consistent = all(
        e is None or abs(p - e) <= 4.0 * se + 2.0 / n_trajectories
        for p, se, e in zip(probs, ses, exacts)
    )
    return VelocityDivergenceReport(
        name="velocity-divergence",
        masses=list(mass_ladder),
        thresholds=thresholds,
        probabilities=probs,
        stderrs=ses,
        exact=exacts,
        decreasing=decreasing,
        cdf_consistent=cdf_consistent,
        final_probability=probs[-1],
        passed=bool(decreasing and cdf_consistent),
    )


# ---------------------------------------------------------------------------
# two-time independence


@dataclass
class TwoTimeReport:
    name: str
    times: list
    effect: float  # max-entry |cross-covariance|
    stderr: float
    analytic_bound: float
    variances: list  # per-time max-entry |Cov(z) - M|
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "times": list(map(float, self.times)),
            "effect": float(self.effect),
            "stderr": float(self.stderr),
            "analytic_bound": float(self.analytic_bound),
            "variance_effects": list(map(float, self.variances)),
        }


def two_time_independence_test(
    model,
    times=(0.5, 1.0),
    mass=1e-3,
    n_trajectories=20_000,
    master_seed=2025,
    steps_per_mass=DEFAULT_STEPS_PER_MASS,
    workers=1,
    q0=None,
    u0=None,
    request_options=None,
) -> TwoTimeReport:
    """Cross-covariance of z at two separated times, which must vanish.

    The correlation time of z is O(m), so with a gap of order one the
    analytic cross term is exponentially negligible; the verdict is the
    entrywise three-stderr band around zero.
    """
    if len(times) != 2 or not times[0] < times[1]:
        raise InvalidInputError("need two increasing sample times")
    from .integrators import _resolve_model

    spec, _ = _resolve_model(model)
    req = _ladder_request(
        mass,
        times[1],
        steps_per_mass,
        n_trajectories,
        master_seed,
        sample_times=tuple(times),
        couple=False,
        q0=q0,
        u0=u0,
        **(request_options or {}),
    )
    res = run_ensemble(model, req, workers)
    scale = 1.0 / math.sqrt(mass)
    z1 = res.u_samples[0] * scale
    z2 = res.u_samples[1] * scale
    cross, cross_se = covariance_with_stderr(z1, z2)
    effect = float(np.abs(cross).max())
    stderr = float(cross_se.flat[np.abs(cross).argmax()])
    variances = []
    for idx, (zj, tj) in enumerate(((z1, times[0]), (z2, times[1]))):
        cov, _ = covariance_with_stderr(zj)
        target = local_equilibrium_covariance(
            spec, float(tj), res.q_samples[idx]
        ).mean(axis=0)
        variances.append(float(np.abs(cov - target).max()))
    gap = times[1] - times[0]
    q_ref = np.zeros(spec.dim) if q0 is None else np.asarray(q0, dtype=float)
    g_ref = effective_drag(spec, 0.0, q_ref)
    lam = float(np.linalg.eigvalsh(0.5 * (g_ref + g_ref.T)).min())
    bound = math.exp(-lam * gap / mass)
    passed = bool(np.all(np.abs(cross) <= SLACK_SIGMAS * cross_se + bound))
    return TwoTimeReport(
        name="two-time-independence",
        times=list(times),
        effect=effect,
        stderr=stderr,
        analytic_bound=bound,
        variances=variances,
        passed=passed,
    )


# ---------------------------------------------------------------------------
# Wiener-integral Gaussianity


@dataclass
class WienerIntegralReport:
    name: str
    mean_effect: float
    mean_stderr: float
    variance: float
    variance_stderr: float
    variance_target: float
    cf_effects: list
    cf_stderrs: list
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "mean_effect": float(self.mean_effect),
            "mean_stderr": float(self.mean_stderr),
            "variance": float(self.variance),
            "variance_stderr": float(self.variance_stderr),
            "variance_target": float(self.variance_target),
            "cf_effect": list(map(float, self.cf_effects)),
            "cf_stderr": list(map(float, self.cf_stderrs)),
        }


def wiener_integral_gaussianity_test(
    a_field,
    t=1.0,
    n_trajectories=100_000,
    n_steps=2_000,
    master_seed=2025,
    norms=(0.5, 1.0, 2.0),
    chunk_size=20_000,
) -> WienerIntegralReport:
    """Distribution of the scalar integral of a deterministic weight in dW.

    Simulated by the explicit left-endpoint sum; the limit is Gaussian with
    covariance given by the time quadrature of the squared weight.  Checks
    mean, variance, and a characteristic-function panel of the standardized
    samples against the standard normal.
    """
    from .integrators import trajectory_rng

    grid = np.linspace(0.0, t, n_steps + 1)
    h = t / n_steps
    weights = np.array([float(a_field(s)) for s in grid[:-1]])
    dense = np.linspace(0.0, t, 20_001)
    target = float(np.trapezoid([float(a_field(s)) ** 2 for s in dense], dense))
    samples = np.empty(n_trajectories)
    scaled = weights * math.sqrt(h)
    for start in range(0, n_trajectories, chunk_size):
        count = min(chunk_size, n_trajectories - start)
        block = np.empty((count, n_steps))
        for j in range(count):
            block[j] = trajectory_rng(master_seed, start + j).standard_normal(n_steps)
        samples[start : start + count] = block @ scaled
    n = n_trajectories
    mean = float(samples.mean())
    mean_se = float(samples.std(ddof=1) / math.sqrt(n))
    var = float(samples.var(ddof=1))
    centered = samples - mean
    var_se = float(
        math.sqrt(max((centered**4).mean() - var**2, 0.0) / n)
    )
    std = samples / math.sqrt(var)
    cf_effects, cf_ses = [], []
    for k in norms:
        vals = np.exp(1j * k * std)
        est, se = _mean_with_jackknife(vals)
        cf_effects.append(abs(est - math.exp(-0.5 * k * k)))
        cf_ses.append(se)
    passed = (
        abs(mean) <= SLACK_SIGMAS * mean_se
        and abs(var - target) <= SLACK_SIGMAS * var_se
        and all(
            d <= SLACK_SIGMAS * se + 1e-3 for d, se in zip(cf_effects, cf_ses)
        )
    )
    return WienerIntegralReport(
        name="wiener-integral-gaussianity",
        mean_effect=abs(mean),
        mean_stderr=mean_se,
        variance=var,
        variance_stderr=var_se,
        variance_target=target,
        cf_effects=cf_effects,
        cf_stderrs=cf_ses,
        passed=bool(passed),
    )
