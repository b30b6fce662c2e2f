"""Built-in model catalog and the expression-based model builder.

Models are identified by a picklable config mapping — either
``{"builtin": <name>}`` or ``{"name": ..., "dim": n, "fields": {...}}`` with
inline expressions — so worker processes can rebuild the exact same
:class:`~homogenize.model.SystemSpec` from the config alone.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, FieldError, InvalidInputError
from .expressions import compile_field, state_variables
from .model import BatchedFields, SystemSpec

_SQRT2 = math.sqrt(2.0)


def _ou_constant() -> SystemSpec:
    return SystemSpec(
        name="ou-constant",
        dim=1,
        drag=lambda t, q: np.array([[1.0]]),
        sigma=lambda t, q: np.array([[_SQRT2]]),
        noise_dim=1,
        effective_drag_gradient=lambda t, q: np.zeros((1, 1, 1)),
        constant_coefficients=True,
        zero_force=True,
        batched=BatchedFields(
            drag=lambda t, q: np.ones_like(q),
            drag_derivative=lambda t, q: np.zeros_like(q),
            sigma=lambda t, q: np.full_like(q, _SQRT2),
        ),
        description="Constant scalar drag 1 and noise sqrt(2); pure velocity relaxation.",
        notes={
            "stationary_covariance": "sigma**2 / (2*gamma) = 1",
            "noise_induced_drift": "0",
        },
    )


def _drag_1d_sin() -> SystemSpec:
    return SystemSpec(
        name="drag-1d-sin",
        dim=1,
        drag=lambda t, q: np.array([[2.0 + math.sin(q[0])]]),
        sigma=lambda t, q: np.array([[_SQRT2]]),
        noise_dim=1,
        effective_drag_gradient=lambda t, q: np.array([[[math.cos(q[0])]]]),
        zero_force=True,
        batched=BatchedFields(
            drag=lambda t, q: 2.0 + np.sin(q),
            drag_derivative=lambda t, q: np.cos(q),
            sigma=lambda t, q: np.full_like(q, _SQRT2),
        ),
        description="Scalar drag 2 + sin(q) with constant noise sqrt(2).",
        notes={
            "stationary_covariance": "1 / (2 + sin(q))",
            "noise_induced_drift": "-cos(q) / (2 + sin(q))**3",
        },
    )


def _magnetic_2d() -> SystemSpec:
    half_curl = np.array([[0.0, 0.5], [-0.5, 0.0]])  # J[i, k] = d psi_k / d q_i
    return SystemSpec(
        name="magnetic-2d",
        dim=2,
        drag=lambda t, q: 2.0 * np.eye(2),
        sigma=lambda t, q: _SQRT2 * np.eye(2),
        noise_dim=2,
        vector_potential=lambda t, q: np.array([-0.5 * q[1], 0.5 * q[0]]),
        vector_potential_jacobian=lambda t, q: half_curl,
        vector_potential_time_derivative=lambda t, q: np.zeros(2),
        effective_drag_gradient=lambda t, q: np.zeros((2, 2, 2)),
        constant_coefficients=True,
        zero_force=True,
        description=(
            "Isotropic drag 2 with a plane-rotation vector potential; the "
            "effective drag picks up the antisymmetric block [[2,-1],[1,2]]."
        ),
        notes={
            "effective_drag": "[[2, -1], [1, 2]]",
            "stationary_covariance": "identity / 2",
            "noise_induced_drift": "0",
        },
    )


def _fd_temperature_gradient() -> SystemSpec:
    def temperature(q):
        return 1.0 + 0.5 * np.tanh(q)

    return SystemSpec(
        name="fd-temperature-gradient",
        dim=1,
        drag=lambda t, q: np.array([[2.0 + math.sin(q[0])]]),
        sigma=lambda t, q: np.array(
            [[math.sqrt(2.0 * (1.0 + 0.5 * math.tanh(q[0])) * (2.0 + math.sin(q[0])))]]
        ),
        noise_dim=1,
        effective_drag_gradient=lambda t, q: np.array([[[math.cos(q[0])]]]),
        zero_force=True,
        batched=BatchedFields(
            drag=lambda t, q: 2.0 + np.sin(q),
            drag_derivative=lambda t, q: np.cos(q),
            sigma=lambda t, q: np.sqrt(2.0 * temperature(q) * (2.0 + np.sin(q))),
        ),
        description=(
            "Locally fluctuation-dissipation-balanced noise with a position-"
            "dependent temperature 1 + tanh(q)/2 over drag 2 + sin(q)."
        ),
        notes={
            "stationary_covariance": "T(q) = 1 + tanh(q)/2",
            "noise_induced_drift": "-cos(q) * (1 + tanh(q)/2) / (2 + sin(q))**2",
        },
    )


BUILTIN_MODELS = {
    "ou-constant": _ou_constant,
    "drag-1d-sin": _drag_1d_sin,
    "magnetic-2d": _magnetic_2d,
    "fd-temperature-gradient": _fd_temperature_gradient,
}


def model_catalog() -> list[dict]:
    """Stable-order description of every built-in model."""
    out = []
    for name in sorted(BUILTIN_MODELS):
        spec = BUILTIN_MODELS[name]()
        out.append(
            {
                "name": name,
                "dim": spec.dim,
                "description": spec.description,
                "notes": dict(sorted(spec.notes.items())),
            }
        )
    return out


def _expression_matrix(raw, dim: int, variables, label: str):
    """Compile a scalar-or-matrix field entry into a grid of expressions."""
    if isinstance(raw, str):
        expr = compile_field(raw, variables)
        return [[expr if i == j else None for j in range(dim)] for i in range(dim)], dim
    if isinstance(raw, (list, tuple)):
        rows = list(raw)
        if len(rows) != dim or any(not isinstance(r, (list, tuple)) for r in rows):
            raise InvalidInputError(
                f"{label} must be a scalar expression or a {dim}-row matrix of expressions"
            )
        cols = len(rows[0])
        if cols < 1 or any(len(r) != cols for r in rows):
            raise InvalidInputError(f"{label} rows must all have the same length")
        grid = [[compile_field(entry, variables) for entry in row] for row in rows]
        return grid, cols
    raise InvalidInputError(f"{label} must be an expression or matrix of expressions")


def _grid_tokens(grid) -> frozenset:
    deps = frozenset()
    for row in grid:
        for entry in row:
            if entry is not None:
                deps |= entry.depends_on
    return deps


def _eval_grid(grid, dim, cols, env):
    out = np.zeros((dim, cols))
    for i in range(dim):
        for j in range(cols):
            if grid[i][j] is not None:
                out[i, j] = float(grid[i][j](**env))
    return out


def from_expressions(name: str, dim: int, fields: dict) -> SystemSpec:
    """Build a model from inline field expressions.

    ``fields`` accepts: ``gamma`` (scalar expression for an isotropic drag, or
    an n x n matrix of expressions), ``sigma`` (scalar or n x k matrix),
    optional ``potential`` (scalar), ``psi`` (list of n expressions), and
    ``force`` (list of n expressions, which may also reference p1..pn).
    """
    if not isinstance(dim, int) or dim < 1:
        raise InvalidInputError(f"dim must be a positive integer, got {dim!r}")
    known = {"gamma", "sigma", "potential", "psi", "force"}
    unknown = set(fields) - known
    if unknown:
        raise ConfigurationError(f"unknown model fields {sorted(unknown)}")
    if "gamma" not in fields or "sigma" not in fields:
        raise ConfigurationError("model fields must define gamma and sigma")

    base_vars = state_variables(dim)
    force_vars = state_variables(dim, prefixes=("q", "p"))
    q_names = [f"q{i + 1}" for i in range(dim)]

    gamma_grid, gamma_cols = _expression_matrix(fields["gamma"], dim, base_vars, "gamma")
    if gamma_cols != dim:
        raise InvalidInputError("gamma must be square")
    sigma_grid, noise_dim = _expression_matrix(fields["sigma"], dim, base_vars, "sigma")

    def env_at(t, q):
        env = {"t": t}
        for i, nm in enumerate(q_names):
            env[nm] = q[i]
        return env

    def drag(t, q):
        return _eval_grid(gamma_grid, dim, dim, env_at(t, q))

    def sigma(t, q):
        return _eval_grid(sigma_grid, dim, noise_dim, env_at(t, q))

    potential = None
    if "potential" in fields:
        v_expr = compile_field(fields["potential"], base_vars)

        def potential(t, q, _expr=v_expr):
            return float(_expr(**env_at(t, q)))

    vector_potential = None
    psi_exprs = None
    if "psi" in fields:
        raw = fields["psi"]
        if not isinstance(raw, (list, tuple)) or len(raw) != dim:
            raise InvalidInputError(f"psi must be a list of {dim} expressions")
        psi_exprs = [compile_field(entry, base_vars) for entry in raw]

        def vector_potential(t, q, _exprs=psi_exprs):
            env = env_at(t, q)
            return np.array([float(e(**env)) for e in _exprs])

    tail_force = None
    force_exprs = None
    if "force" in fields:
        raw = fields["force"]
        if not isinstance(raw, (list, tuple)) or len(raw) != dim:
            raise InvalidInputError(f"force must be a list of {dim} expressions")
        force_exprs = [compile_field(entry, force_vars) for entry in raw]

        def tail_force(t, q, p, _exprs=force_exprs):
            env = env_at(t, q)
            for i in range(dim):
                env[f"p{i + 1}"] = p[i]
            return np.array([float(e(**env)) for e in _exprs])

    field_tokens = _grid_tokens(gamma_grid) | _grid_tokens(sigma_grid)
    constant = not field_tokens
    psi_time_dependent = psi_exprs is not None and any(
        "t" in e.depends_on for e in psi_exprs
    )
    zero_force = potential is None and tail_force is None and not psi_time_dependent

    batched = None
    if dim == 1:
        gamma_expr = gamma_grid[0][0]
        sigma_expr = sigma_grid[0][0]

        def batched_drag(t, q, _e=gamma_expr):
            return np.broadcast_to(np.asarray(_e(t=t, q1=q)), np.shape(q)).copy()

        def batched_sigma(t, q, _e=sigma_expr):
            return np.broadcast_to(np.asarray(_e(t=t, q1=q)), np.shape(q)).copy()

        def batched_drag_derivative(t, q, _e=gamma_expr):
            h = np.maximum(1.0, np.abs(q)) * (np.finfo(float).eps ** (1.0 / 3.0))
            hi = np.broadcast_to(np.asarray(_e(t=t, q1=q + h)), np.shape(q))
            lo = np.broadcast_to(np.asarray(_e(t=t, q1=q - h)), np.shape(q))
            return (hi - lo) / (2.0 * h)

        batched_force = None
        batched_limiting_force = None
        if not zero_force:

            def _force_parts(t, q, p):
                total = np.zeros_like(q)
                if psi_exprs is not None and psi_time_dependent:
                    ht = (np.finfo(float).eps ** (1.0 / 3.0)) * max(1.0, abs(t))
                    hi = np.asarray(psi_exprs[0](t=t + ht, q1=q))
                    lo = np.asarray(psi_exprs[0](t=t - ht, q1=q))
                    total = total - (hi - lo) / (2.0 * ht)
                if potential is not None:
                    h = np.maximum(1.0, np.abs(q)) * (np.finfo(float).eps ** (1.0 / 3.0))
                    hi = np.asarray(v_expr(t=t, q1=q + h))
                    lo = np.asarray(v_expr(t=t, q1=q - h))
                    total = total - (hi - lo) / (2.0 * h)
                if force_exprs is not None:
                    total = total + np.broadcast_to(
                        np.asarray(force_exprs[0](t=t, q1=q, p1=p)), np.shape(q)
                    )
                return total

            def batched_force(t, q, u):
                psi_val = (
                    np.asarray(psi_exprs[0](t=t, q1=q)) if psi_exprs is not None else 0.0
                )
                return _force_parts(t, q, u + psi_val)

            def batched_limiting_force(t, q):
                psi_val = (
                    np.asarray(psi_exprs[0](t=t, q1=q)) if psi_exprs is not None else 0.0
                )
                return _force_parts(t, q, np.zeros_like(q) + psi_val)

        batched = BatchedFields(
            drag=batched_drag,
            drag_derivative=batched_drag_derivative,
            sigma=batched_sigma,
            force=batched_force,
            limiting_force=batched_limiting_force,
        )

    return SystemSpec(
        name=name,
        dim=dim,
        drag=drag,
        sigma=sigma,
        noise_dim=noise_dim,
        vector_potential=vector_potential,
        potential=potential,
        tail_force=tail_force,
        constant_coefficients=constant,
        zero_force=zero_force,
        batched=batched,
        description=f"expression-defined model ({dim}-dimensional)",
        notes={},
    )


def build_model(config) -> SystemSpec:
    """Construct a SystemSpec from a picklable model config mapping."""
    if isinstance(config, SystemSpec):
        return config
    if not isinstance(config, dict):
        raise ConfigurationError(f"model config must be a mapping, got {type(config)}")
    if "builtin" in config:
        name = config["builtin"]
        extras = set(config) - {"builtin"}
        if extras:
            raise ConfigurationError(
                f"builtin model config accepts no extra keys, got {sorted(extras)}"
            )
        try:
            return BUILTIN_MODELS[name]()
        except KeyError:
            raise ConfigurationError(
                f"unknown builtin model {name!r}; available: {sorted(BUILTIN_MODELS)}"
            ) from None
    if "fields" in config:
        missing = {"dim"} - set(config)
        if missing:
            raise ConfigurationError(f"expression model config needs {sorted(missing)}")
        extras = set(config) - {"dim", "fields", "name"}
        if extras:
            raise ConfigurationError(f"unknown model config keys {sorted(extras)}")
        try:
            return from_expressions(
                config.get("name", "custom"), config["dim"], dict(config["fields"])
            )
        except FieldError:
            raise
    raise ConfigurationError(
        "model config must contain either 'builtin' or 'dim' + 'fields'"
    )
