"""Kernel-level tests: closed-form oracles, dual-route cross-checks, certificates."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homogenize.errors import InvalidInputError, StabilityError
from homogenize.kernels import (
    LYAPUNOV_RTOL,
    Propagator,
    SpectralBounds,
    covariance_quadrature,
    equilibrium_covariance,
    exponential_integrals,
    finite_time_covariance,
    matrix_exponential,
    noise_covariance_integral,
    propagate_step,
    solve_lyapunov,
    symmetric_part_bounds,
)


def random_admissible_pair(rng, dim):
    """Random effective drag (SPD + antisymmetric part) and SPD noise covariance."""
    basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    drag = basis @ np.diag(rng.uniform(0.5, 3.0, dim)) @ basis.T
    skew = rng.uniform(-1.0, 1.0, (dim, dim))
    gamma_tilde = drag + 0.5 * (skew - skew.T)
    root = rng.standard_normal((dim, dim)) * 0.6 + np.eye(dim)
    noise = root @ root.T + 0.25 * np.eye(dim)
    return gamma_tilde, noise


class TestMatrixExponential:
    def test_nilpotent_exact(self):
        out = matrix_exponential([[0.0, 1.0], [0.0, 0.0]])
        assert np.array_equal(out, [[1.0, 1.0], [0.0, 1.0]])

    def test_rotation_block(self):
        theta = 0.7
        out = matrix_exponential([[0.0, -theta], [theta, 0.0]])
        expected = np.array(
            [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
        )
        assert np.abs(out - expected).max() < 1e-14

    def test_rejects_non_square(self):
        with pytest.raises(InvalidInputError):
            matrix_exponential(np.ones((2, 3)))

    def test_rejects_nan(self):
        with pytest.raises(InvalidInputError):
            matrix_exponential([[np.nan]])


class TestSymmetricPartBounds:
    def test_antisymmetric_part_drops_out(self):
        lo, hi = symmetric_part_bounds([[2.0, -1.0], [1.0, 2.0]])
        assert lo == pytest.approx(2.0, abs=1e-14)
        assert hi == pytest.approx(2.0, abs=1e-14)

    def test_scalar(self):
        assert symmetric_part_bounds([[3.5]]) == (3.5, 3.5)


class TestSolveLyapunov:
    def test_scalar_closed_form(self):
        # 2x + 2x = 8  ->  x = 2
        out = solve_lyapunov([[2.0]], [[8.0]])
        assert out[0, 0] == pytest.approx(2.0, rel=1e-14)

    def test_residual_certificate(self):
        rng = np.random.default_rng(3)
        a, q = random_admissible_pair(rng, 4)
        x = solve_lyapunov(a, q)
        res = np.linalg.norm(a @ x + x @ a.T - q, 2)
        scale = np.linalg.norm(a, 2) * np.linalg.norm(x, 2) + np.linalg.norm(q, 2)
        assert res <= LYAPUNOV_RTOL * scale

    def test_symmetric_rhs_gives_symmetric_solution(self):
        rng = np.random.default_rng(7)
        a, q = random_admissible_pair(rng, 3)
        x = solve_lyapunov(a, q)
        assert np.array_equal(x, x.T)

    def test_non_normal_but_stable_accepted(self):
        # symmetric part is indefinite, spectrum is {1, 1}: still admissible
        a = np.array([[1.0, 5.0], [0.0, 1.0]])
        x = solve_lyapunov(a, np.eye(2))
        res = np.abs(a @ x + x @ a.T - np.eye(2)).max()
        assert res < 1e-12 * max(1.0, np.abs(x).max())

    def test_rejects_unstable(self):
        with pytest.raises(StabilityError):
            solve_lyapunov([[-1.0]], [[1.0]])

    def test_rejects_zero_spectrum(self):
        with pytest.raises(StabilityError):
            solve_lyapunov([[0.0]], [[1.0]])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            solve_lyapunov(np.eye(2), np.eye(3))


class TestEquilibriumCovariance:
    def test_scalar(self):
        assert equilibrium_covariance([[2.0]], [[8.0]])[0, 0] == pytest.approx(2.0)

    def test_fluctuation_dissipation_collapse(self):
        # noise_cov = 2 kT * drag  =>  covariance = kT * identity, even with a
        # magnetic (antisymmetric) drag contribution.
        rng = np.random.default_rng(11)
        kt = 0.7
        for dim in (1, 2, 3, 4):
            basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
            drag = basis @ np.diag(rng.uniform(0.5, 3.0, dim)) @ basis.T
            skew = rng.standard_normal((dim, dim))
            gamma_tilde = drag + 0.5 * (skew - skew.T)
            cov = equilibrium_covariance(gamma_tilde, 2.0 * kt * drag)
            assert np.abs(cov - kt * np.eye(dim)).max() < 1e-12

    def test_agrees_with_quadrature(self):
        rng = np.random.default_rng(5)
        for dim in (1, 2, 3, 4):
            gamma_tilde, noise = random_admissible_pair(rng, dim)
            direct = equilibrium_covariance(gamma_tilde, noise)
            quad = covariance_quadrature(gamma_tilde, noise)
            scale = max(1.0, np.abs(direct).max())
            assert np.abs(direct - quad).max() < 1e-8 * scale

    def test_rejects_asymmetric_noise(self):
        with pytest.raises(InvalidInputError):
            equilibrium_covariance(np.eye(2), [[1.0, 0.5], [0.0, 1.0]])

    def test_rejects_indefinite_noise(self):
        with pytest.raises(InvalidInputError):
            equilibrium_covariance(np.eye(2), [[1.0, 0.0], [0.0, -1.0]])


class TestFiniteTimeCovariance:
    def test_scalar_closed_form(self):
        # gamma = 1, noise = 2: cov(t) = 1 - exp(-2 t / m)
        t, mass = 0.05, 1.0
        out = finite_time_covariance([[1.0]], [[2.0]], t, mass)
        assert out[0, 0] == pytest.approx(1.0 - math.exp(-2.0 * t / mass), rel=1e-13)

    def test_zero_time(self):
        out = finite_time_covariance(np.eye(3), np.eye(3), 0.0, 0.01)
        assert np.array_equal(out, np.zeros((3, 3)))

    def test_matches_van_loan_route(self):
        # int_0^h exp(-G s/m) S exp(-G^T s/m) ds == m * finite_time_covariance
        rng = np.random.default_rng(17)
        gamma_tilde, noise = random_admissible_pair(rng, 3)
        h, mass = 0.08, 0.02
        _, accumulated = noise_covariance_integral(-gamma_tilde / mass, noise, h)
        lyap = mass * finite_time_covariance(gamma_tilde, noise, h, mass)
        assert np.abs(accumulated - lyap).max() < 1e-12 * max(1.0, np.abs(lyap).max())

    def test_equilibration_gap_bound(self):
        rng = np.random.default_rng(23)
        gamma_tilde, noise = random_admissible_pair(rng, 2)
        stationary = equilibrium_covariance(gamma_tilde, noise)
        lam = symmetric_part_bounds(gamma_tilde)[0]
        bounds = SpectralBounds(
            drag_floor=lam,
            noise_floor=float(np.linalg.eigvalsh(noise)[0]),
            drag_norm=float(np.linalg.norm(gamma_tilde, 2)),
            noise_norm=float(np.linalg.norm(noise, 2)),
        )
        for t_over_m in (0.5, 2.0, 5.0):
            finite = finite_time_covariance(gamma_tilde, noise, t_over_m, 1.0)
            gap = np.linalg.norm(finite - stationary, 2)
            assert gap <= bounds.equilibration_gap(t_over_m, 1.0) * (1 + 1e-9)


class TestExponentialIntegrals:
    def test_scalar_closed_form(self):
        a, h = -2.0, 0.3
        prop, integral = exponential_integrals([[a]], h)
        assert prop[0, 0] == pytest.approx(math.exp(a * h), rel=1e-14)
        assert integral[0, 0] == pytest.approx((math.exp(a * h) - 1.0) / a, rel=1e-13)

    def test_zero_interval(self):
        prop, integral = exponential_integrals(np.eye(2), 0.0)
        assert np.array_equal(prop, np.eye(2))
        assert np.array_equal(integral, np.zeros((2, 2)))


class TestPropagateStep:
    def test_scalar_time_varying_oracle(self):
        # dPhi/dt = -(2 + sin t) Phi  =>  Phi(T) = exp(-(2T + 1 - cos T))
        t_end = 1.5
        exact = math.exp(-(2.0 * t_end + 1.0 - math.cos(t_end)))

        def field(t):
            return [[-(2.0 + math.sin(t))]]

        coarse = propagate_step(field, 0.0, t_end, substeps=600)
        fine = propagate_step(field, 0.0, t_end, substeps=1200)
        err_coarse = abs(coarse.step_matrix[0, 0] - exact)
        err_fine = abs(fine.step_matrix[0, 0] - exact)
        assert err_coarse / exact < 2e-3
        # left-endpoint freezing is first order: halving the substep roughly halves the error
        assert 1.7 < err_coarse / err_fine < 2.3

    def test_decay_certificate(self):
        rng = np.random.default_rng(31)
        mass = 0.05
        for _ in range(10):
            gamma_tilde, _ = random_admissible_pair(rng, 3)
            amp = rng.uniform(0.1, 0.3)

            def field(t, base=gamma_tilde, amp=amp):
                return -(base + amp * math.sin(3.0 * t) * np.eye(3)) / mass

            prop = propagate_step(field, 0.2, 0.45, substeps=40, mass=mass)
            assert prop.satisfies_decay()
            assert np.linalg.norm(prop.step_matrix, 2) < 1.0

    def test_difference_bound_against_perturbed_field(self):
        # |Phi_1(t) - Phi_2(t)| <= int |B_1 - B_2| ds * exp(lambda_up t) where
        # lambda_up bounds the symmetric-part eigenvalues of both fields above.
        rng = np.random.default_rng(37)
        t_end, substeps = 0.8, 1600
        for _ in range(5):
            base, _ = random_admissible_pair(rng, 2)
            bump = rng.standard_normal((2, 2)) * 0.1

            def field_one(t, b=base):
                return -(b + math.sin(2.0 * t) * 0.2 * np.eye(2))

            def field_two(t, b=base, d=bump):
                return -(b + math.sin(2.0 * t) * 0.2 * np.eye(2)) + d * math.cos(t)

            prop_one = propagate_step(field_one, 0.0, t_end, substeps)
            prop_two = propagate_step(field_two, 0.0, t_end, substeps)
            grid = np.linspace(0.0, t_end, 4001)
            gap = np.trapezoid(
                [np.linalg.norm(field_one(t) - field_two(t), 2) for t in grid], grid
            )
            lam_up = max(
                max(symmetric_part_bounds(field_one(t))[1] for t in grid),
                max(symmetric_part_bounds(field_two(t))[1] for t in grid),
            )
            diff = np.linalg.norm(prop_one.step_matrix - prop_two.step_matrix, 2)
            assert diff <= gap * math.exp(lam_up * t_end) * (1 + 1e-3) + 1e-10

    def test_memoryless_composition(self):
        # freezing at substep starts makes [0, t] equal the composition over halves
        def field(t):
            return np.array([[-2.0, 0.3 * t], [-0.3 * t, -1.0]])

        whole = propagate_step(field, 0.0, 0.4, substeps=8)
        first = propagate_step(field, 0.0, 0.2, substeps=4)
        second = propagate_step(field, 0.2, 0.4, substeps=4)
        assert np.abs(second.step_matrix @ first.step_matrix - whole.step_matrix).max() < 1e-14

    def test_rejects_bad_interval(self):
        with pytest.raises(InvalidInputError):
            propagate_step(lambda t: [[-1.0]], 1.0, 0.5, 4)


class TestConvolutionDecomposition:
    def test_summation_by_parts_identity(self):
        # For the fundamental solution Phi of dPhi/dt = -G(t) Phi (mass 1) and a
        # fixed discrete Wiener path, the stochastic convolution satisfies
        #   sum_k Phi_t Phi_{s_k}^{-1} s dW_k
        #     = Phi_t s W_t + sum_k (G_k - G_{k-1}) s (W_t - W_{s_k}),
        # with G_k = Phi_t Phi_{s_k}^{-1}; exact Abel summation, no truncation.
        rng = np.random.default_rng(41)
        steps, t_end = 256, 0.5
        h = t_end / steps
        times = np.arange(steps + 1) * h

        def drag(t):
            return np.array([[2.0 + 0.5 * math.sin(t), 0.3], [0.3, 1.5]])

        factors = [matrix_exponential(-drag(times[k]) * h) for k in range(steps)]
        # suffix[k] = Phi_t Phi_{s_k}^{-1} (product of factors k..end), no inversions
        suffix = [np.eye(2)] * (steps + 1)
        for k in range(steps - 1, -1, -1):
            suffix[k] = suffix[k + 1] @ factors[k]
        sigma = np.array([[0.8, 0.1], [0.0, 1.1]])
        increments = rng.standard_normal((steps, 2)) * math.sqrt(h)
        w_total = increments.sum(axis=0)
        remaining = w_total - np.vstack([np.zeros(2), np.cumsum(increments, axis=0)])

        lhs = sum(suffix[k] @ sigma @ increments[k] for k in range(steps))
        rhs = suffix[0] @ sigma @ w_total + sum(
            (suffix[k] - suffix[k - 1]) @ sigma @ remaining[k] for k in range(1, steps)
        )
        assert np.abs(lhs - rhs).max() < 1e-13

        # replacing the exact differences by the generator derivative recovers
        # the integral form up to O(h)
        rhs_deriv = suffix[0] @ sigma @ w_total + h * sum(
            suffix[k] @ drag(times[k]) @ sigma @ remaining[k] for k in range(1, steps)
        )
        assert np.abs(lhs - rhs_deriv).max() < 0.05


class TestSpectralBounds:
    def test_window_contains_stationary_covariance(self):
        rng = np.random.default_rng(43)
        for dim in (1, 2, 3):
            gamma_tilde, noise = random_admissible_pair(rng, dim)
            cov = equilibrium_covariance(gamma_tilde, noise)
            bounds = SpectralBounds(
                drag_floor=symmetric_part_bounds(gamma_tilde)[0],
                noise_floor=float(np.linalg.eigvalsh(noise)[0]),
                drag_norm=float(np.linalg.norm(gamma_tilde, 2)),
                noise_norm=float(np.linalg.norm(noise, 2)),
            )
            assert bounds.contains_covariance(cov)

    def test_rejects_nonpositive_floor(self):
        with pytest.raises(InvalidInputError):
            SpectralBounds(0.0, 1.0, 1.0, 1.0)

    def test_rejects_norm_below_floor(self):
        with pytest.raises(InvalidInputError):
            SpectralBounds(2.0, 1.0, 1.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(dim=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_lyapunov_solution_properties(dim, seed):
    rng = np.random.default_rng(seed)
    gamma_tilde, noise = random_admissible_pair(rng, dim)
    cov = equilibrium_covariance(gamma_tilde, noise)
    residual = np.abs(gamma_tilde @ cov + cov @ gamma_tilde.T - noise).max()
    assert residual <= 1e-11 * max(1.0, np.abs(noise).max(), np.abs(cov).max())
    assert np.array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov)[0] > 0.0
    bounds = SpectralBounds(
        drag_floor=symmetric_part_bounds(gamma_tilde)[0],
        noise_floor=float(np.linalg.eigvalsh(noise)[0]),
        drag_norm=float(np.linalg.norm(gamma_tilde, 2)),
        noise_norm=float(np.linalg.norm(noise, 2)),
    )
    assert bounds.contains_covariance(cov)


@settings(max_examples=25, deadline=None)
@given(
    dim=st.integers(1, 3),
    seed=st.integers(0, 2**31 - 1),
    t_over_m=st.floats(0.1, 8.0),
)
def test_finite_time_covariance_is_monotone_and_bounded(dim, seed, t_over_m):
    rng = np.random.default_rng(seed)
    gamma_tilde, noise = random_admissible_pair(rng, dim)
    stationary = equilibrium_covariance(gamma_tilde, noise)
    finite = finite_time_covariance(gamma_tilde, noise, t_over_m, 1.0)
    assert np.array_equal(finite, finite.T)
    assert np.linalg.eigvalsh(finite)[0] >= -1e-12
    lam = symmetric_part_bounds(gamma_tilde)[0]
    gap = np.linalg.norm(finite - stationary, 2)
    bound = np.linalg.norm(noise, 2) / (2.0 * lam) * math.exp(-2.0 * lam * t_over_m)
    assert gap <= bound * (1 + 1e-9) + 1e-13
