"""Field-level oracles: effective drag, forces, noise-induced drift, audit."""
import math

import numpy as np
import pytest

from homogenize.errors import ConfigurationError, InvalidInputError
from homogenize.kernels import equilibrium_covariance
from homogenize.library import BUILTIN_MODELS, build_model, from_expressions, model_catalog
from homogenize.model import (
    SystemSpec,
    audit_assumptions,
    diffusion_covariance,
    effective_drag,
    limiting_diffusion,
    limiting_drift,
    noise_induced_drift,
    noise_induced_drift_oracle,
    total_force,
)


def smooth_random_spec(rng, dim, with_potential_terms=True):
    """Random smooth drag/noise fields with a guaranteed spectral floor.

    All derivatives are left to finite differences on purpose: this is the
    adversarial input for the analytic-identity route.
    """
    basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    base = basis @ np.diag(rng.uniform(1.5, 3.0, dim)) @ basis.T
    mod = rng.standard_normal((dim, dim)) * 0.2
    mod = mod + mod.T
    phases = rng.uniform(0, 2 * np.pi, dim)
    sig_base = np.eye(dim) + 0.2 * rng.standard_normal((dim, dim))
    psi_mat = rng.standard_normal((dim, dim)) * 0.4 if with_potential_terms else None

    def drag(t, q):
        return base + mod * np.sin(q + phases).sum()

    def sigma(t, q):
        return sig_base + 0.1 * np.cos(q).sum() * np.eye(dim)

    vector_potential = None
    if psi_mat is not None:

        def vector_potential(t, q):
            return psi_mat @ np.sin(q)

    return SystemSpec(
        name="random-smooth",
        dim=dim,
        drag=drag,
        sigma=sigma,
        noise_dim=dim,
        vector_potential=vector_potential,
    )


class TestEffectiveDrag:
    def test_magnetic_block_frozen_value(self):
        spec = build_model({"builtin": "magnetic-2d"})
        out = effective_drag(spec, 0.0, [0.3, -1.2])
        assert np.abs(out - np.array([[2.0, -1.0], [1.0, 2.0]])).max() < 1e-12

    def test_reduces_to_drag_without_vector_potential(self):
        spec = build_model({"builtin": "drag-1d-sin"})
        assert effective_drag(spec, 0.0, [0.5])[0, 0] == pytest.approx(
            2.0 + math.sin(0.5)
        )

    def test_antisymmetric_part_from_fd_jacobian(self):
        # same magnetic model but with the analytic jacobian dropped: FD must agree
        spec = build_model({"builtin": "magnetic-2d"}).without_analytic_derivatives()
        out = effective_drag(spec, 0.0, [0.3, -1.2])
        assert np.abs(out - np.array([[2.0, -1.0], [1.0, 2.0]])).max() < 1e-9

    def test_rejects_asymmetric_drag(self):
        spec = SystemSpec(
            name="bad",
            dim=2,
            drag=lambda t, q: np.array([[1.0, 0.5], [0.0, 1.0]]),
            sigma=lambda t, q: np.eye(2),
            noise_dim=2,
        )
        with pytest.raises(InvalidInputError, match="symmetric"):
            effective_drag(spec, 0.0, [0.0, 0.0])

    def test_rejects_wrong_state_shape(self):
        spec = build_model({"builtin": "drag-1d-sin"})
        with pytest.raises(InvalidInputError):
            effective_drag(spec, 0.0, [0.0, 1.0])


class TestTotalForce:
    def test_zero_by_default(self):
        spec = build_model({"builtin": "drag-1d-sin"})
        assert np.array_equal(total_force(spec, 0.0, [0.4], [0.0]), np.zeros(1))

    def test_potential_gradient_analytic_and_fd_agree(self):
        def potential(t, q):
            return 0.5 * (q[0] ** 2 + 2.0 * q[1] ** 2) + 0.3 * q[0] * q[1]

        def gradient(t, q):
            return np.array([q[0] + 0.3 * q[1], 2.0 * q[1] + 0.3 * q[0]])

        base = dict(
            name="v",
            dim=2,
            drag=lambda t, q: np.eye(2),
            sigma=lambda t, q: np.eye(2),
            noise_dim=2,
            potential=potential,
        )
        with_analytic = SystemSpec(**base, potential_gradient=gradient)
        with_fd = SystemSpec(**base)
        q = [0.7, -0.2]
        expected = -gradient(0.0, np.asarray(q))
        assert np.abs(total_force(with_analytic, 0.0, q, [0, 0]) - expected).max() == 0.0
        assert np.abs(total_force(with_fd, 0.0, q, [0, 0]) - expected).max() < 1e-9

    def test_time_dependent_vector_potential_contributes(self):
        spec = SystemSpec(
            name="ramp",
            dim=1,
            drag=lambda t, q: np.array([[1.0]]),
            sigma=lambda t, q: np.array([[1.0]]),
            noise_dim=1,
            vector_potential=lambda t, q: np.array([0.4 * t * q[0]]),
        )
        out = total_force(spec, 1.0, [2.0], [0.0])
        assert out[0] == pytest.approx(-0.8, rel=1e-8)

    def test_tail_force_receives_momentum(self):
        spec = SystemSpec(
            name="fp",
            dim=1,
            drag=lambda t, q: np.array([[1.0]]),
            sigma=lambda t, q: np.array([[1.0]]),
            noise_dim=1,
            tail_force=lambda t, q, p: np.array([3.0 * p[0]]),
        )
        assert total_force(spec, 0.0, [0.0], [2.0])[0] == pytest.approx(6.0)


class TestNoiseInducedDrift:
    def test_scalar_closed_form_at_origin(self):
        spec = build_model({"builtin": "drag-1d-sin"})
        # -sigma^2 gamma' / (2 gamma^3) = -2 * 1 / (2 * 8) at q = 0
        assert noise_induced_drift(spec, 0.0, [0.0])[0] == pytest.approx(
            -0.125, abs=1e-10
        )

    def test_scalar_closed_form_vanishes_at_extremum(self):
        spec = build_model({"builtin": "drag-1d-sin"})
        assert abs(noise_induced_drift(spec, 0.0, [0.5 * math.pi])[0]) < 1e-10

    def test_scalar_closed_form_on_grid(self):
        spec = build_model({"builtin": "drag-1d-sin"})
        for q in np.linspace(-3.0, 3.0, 25):
            expected = -math.cos(q) / (2.0 + math.sin(q)) ** 3
            got = noise_induced_drift(spec, 0.0, [q])[0]
            assert got == pytest.approx(expected, abs=1e-9)

    def test_temperature_gradient_closed_form(self):
        spec = build_model({"builtin": "fd-temperature-gradient"})
        for q in (-1.3, 0.0, 0.8):
            expected = (
                -math.cos(q)
                * (1.0 + 0.5 * math.tanh(q))
                / (2.0 + math.sin(q)) ** 2
            )
            assert noise_induced_drift(spec, 0.0, [q])[0] == pytest.approx(
                expected, abs=1e-9
            )

    def test_vanishes_for_constant_coefficients(self):
        for name in ("ou-constant", "magnetic-2d"):
            spec = build_model({"builtin": name})
            out = noise_induced_drift(spec, 0.0, np.zeros(spec.dim))
            assert np.abs(out).max() < 1e-12

    @pytest.mark.parametrize("dim", [1, 2, 3])
    def test_oracle_equivalence_on_random_smooth_fields(self, dim):
        rng = np.random.default_rng(100 + dim)
        for _ in range(3):
            spec = smooth_random_spec(rng, dim)
            t = rng.uniform(0.0, 1.0)
            q = rng.uniform(-1.5, 1.5, dim)
            direct = noise_induced_drift(spec, t, q)
            oracle = noise_induced_drift_oracle(spec, t, q)
            assert np.abs(direct - oracle).max() < 1e-6

    def test_analytic_and_fd_derivative_paths_agree(self):
        spec = build_model({"builtin": "drag-1d-sin"})
        fd_spec = spec.without_analytic_derivatives()
        for q in (-2.0, 0.3, 1.7):
            a = noise_induced_drift(spec, 0.0, [q])[0]
            b = noise_induced_drift(fd_spec, 0.0, [q])[0]
            assert a == pytest.approx(b, abs=1e-9)


class TestLimitingFields:
    def test_drift_is_pure_noise_correction_without_force(self):
        spec = build_model({"builtin": "drag-1d-sin"})
        q = [0.9]
        assert limiting_drift(spec, 0.0, q)[0] == pytest.approx(
            noise_induced_drift(spec, 0.0, q)[0], rel=1e-12
        )

    def test_magnetic_diffusion_uses_effective_inverse(self):
        spec = build_model({"builtin": "magnetic-2d"})
        out = limiting_diffusion(spec, 0.0, [0.0, 0.0])
        inverse = np.array([[2.0, 1.0], [-1.0, 2.0]]) / 5.0
        assert np.abs(out - math.sqrt(2.0) * inverse).max() < 1e-12

    def test_drift_balances_linear_force(self):
        spec = from_expressions(
            "pinned", 1, {"gamma": "2.0", "sigma": "sqrt(2)", "potential": "q1**2"}
        )
        # gamma^{-1} F = -(2 q)/2 = -q; constant drag means no extra drift
        assert limiting_drift(spec, 0.0, [0.75])[0] == pytest.approx(-0.75, rel=1e-7)


class TestAudit:
    def test_drag_1d_sin_passes_with_expected_floor(self):
        spec = build_model({"builtin": "drag-1d-sin"})
        report = audit_assumptions(spec, [(-4.0, 4.0)], resolution=65)
        assert report.passed
        assert report.drag_floor == pytest.approx(1.0, abs=0.01)
        assert report.noise_floor == pytest.approx(2.0, abs=1e-12)
        assert report.drag_lipschitz == pytest.approx(1.0, abs=0.05)
        bounds = report.spectral_bounds()
        cov = equilibrium_covariance(
            effective_drag(spec, 0.0, [0.0]), diffusion_covariance(spec, 0.0, [0.0])
        )
        assert bounds is not None and bounds.contains_covariance(cov)

    def test_degenerate_drag_fails(self):
        spec = SystemSpec(
            name="degenerate",
            dim=1,
            drag=lambda t, q: np.array([[math.sin(q[0])]]),
            sigma=lambda t, q: np.array([[1.0]]),
            noise_dim=1,
        )
        report = audit_assumptions(spec, [(-2.0, 2.0)], resolution=21)
        assert not report.passed
        assert not report.flags["drag_floor_positive"]

    def test_asymmetric_drag_flagged(self):
        spec = SystemSpec(
            name="asym",
            dim=2,
            drag=lambda t, q: np.array([[2.0, 0.5], [0.0, 2.0]]),
            sigma=lambda t, q: np.eye(2),
            noise_dim=2,
        )
        report = audit_assumptions(spec, [(-1.0, 1.0), (-1.0, 1.0)], resolution=5)
        assert not report.passed
        assert not report.flags["drag_symmetric"]

    def test_report_round_trips_to_dict(self):
        spec = build_model({"builtin": "ou-constant"})
        report = audit_assumptions(spec, [(-1.0, 1.0)], resolution=5)
        data = report.to_dict()
        assert data["passed"] is True
        assert set(data["flags"]) == {
            "drag_symmetric",
            "fields_finite",
            "drag_floor_positive",
            "noise_floor_positive",
            "lipschitz_finite",
        }

    def test_rejects_bad_box(self):
        spec = build_model({"builtin": "ou-constant"})
        with pytest.raises(InvalidInputError):
            audit_assumptions(spec, [(1.0, -1.0)])


class TestLibrary:
    def test_catalog_is_stable_and_complete(self):
        catalog = model_catalog()
        assert [entry["name"] for entry in catalog] == sorted(BUILTIN_MODELS)
        assert all(entry["description"] for entry in catalog)

    def test_expression_clone_matches_builtin(self):
        clone = from_expressions(
            "clone", 1, {"gamma": "2 + sin(q1)", "sigma": "sqrt(2)"}
        )
        builtin = build_model({"builtin": "drag-1d-sin"})
        for q in np.linspace(-2.0, 2.0, 9):
            assert effective_drag(clone, 0.0, [q])[0, 0] == pytest.approx(
                effective_drag(builtin, 0.0, [q])[0, 0], rel=1e-12
            )
            assert noise_induced_drift(clone, 0.0, [q])[0] == pytest.approx(
                noise_induced_drift(builtin, 0.0, [q])[0], abs=1e-8
            )

    def test_expression_model_constant_detection(self):
        const = from_expressions("c", 1, {"gamma": "4.0", "sigma": "2*sqrt(2)"})
        assert const.constant_coefficients and const.zero_force
        varying = from_expressions("v", 1, {"gamma": "2 + sin(q1)", "sigma": "1"})
        assert not varying.constant_coefficients
        forced = from_expressions(
            "f", 1, {"gamma": "1", "sigma": "1", "potential": "q1**2"}
        )
        assert forced.constant_coefficients and not forced.zero_force

    def test_expression_matrix_fields(self):
        spec = from_expressions(
            "aniso",
            2,
            {
                "gamma": [["2 + sin(q1)", "0.1"], ["0.1", "3"]],
                "sigma": [["1", "0"], ["0", "sqrt(2)"]],
            },
        )
        out = effective_drag(spec, 0.0, [0.5, 0.0])
        assert out[0, 0] == pytest.approx(2 + math.sin(0.5))
        assert out[0, 1] == pytest.approx(0.1)
        cov = diffusion_covariance(spec, 0.0, [0.0, 0.0])
        assert np.abs(cov - np.diag([1.0, 2.0])).max() < 1e-12

    def test_expression_psi_matches_builtin_magnetic(self):
        clone = from_expressions(
            "mag",
            2,
            {
                "gamma": "2.0",
                "sigma": "sqrt(2)",
                "psi": ["-q2/2", "q1/2"],
            },
        )
        out = effective_drag(clone, 0.0, [1.0, -0.5])
        assert np.abs(out - np.array([[2.0, -1.0], [1.0, 2.0]])).max() < 1e-8

    def test_batched_fields_match_pointwise(self):
        spec = build_model({"builtin": "fd-temperature-gradient"})
        q = np.linspace(-2.0, 2.0, 11)
        batched_sigma = spec.batched.sigma(0.0, q)
        for i, qi in enumerate(q):
            assert batched_sigma[i] == pytest.approx(
                spec.sigma(0.0, np.array([qi]))[0, 0], rel=1e-12
            )

    def test_build_model_errors(self):
        with pytest.raises(ConfigurationError, match="unknown builtin"):
            build_model({"builtin": "nope"})
        with pytest.raises(ConfigurationError):
            build_model({"fields": {"gamma": "1", "sigma": "1"}})
        with pytest.raises(ConfigurationError):
            build_model({"builtin": "ou-constant", "dim": 1})
        with pytest.raises(ConfigurationError, match="gamma and sigma"):
            build_model({"dim": 1, "fields": {"gamma": "1"}})
