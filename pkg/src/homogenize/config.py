"""Experiment configuration: TOML in, validated + fully-defaulted dict out.

The grammar is plain TOML restricted to strings, booleans, integers, floats,
arrays, and nested tables.  ``resolve`` rejects unknown keys, applies every
default explicitly, and returns a dict that re-runs to the same report;
``dumps_toml`` writes that dict back out so a run can be reproduced from its
own resolved-config echo.
"""

import json
import math

try:
    import tomllib as tomli
except ModuleNotFoundError:  # python < 3.11
    import tomli

from .errors import ConfigurationError
from .library import build_model
from .statistics import DEFAULT_MASS_LADDER, DEFAULT_STEPS_PER_MASS

EXPERIMENTS = (
    "audit",
    "simulate",
    "weak-convergence",
    "rate",
    "observable-limit",
    "velocity-divergence",
    "diagnostics",
)

#: Experiments that consume a mass ladder; for these the key is required.
LADDER_EXPERIMENTS = tuple(e for e in EXPERIMENTS if e != "audit")

#: The documented standard ladder (paste into configs; never implicit).
STANDARD_MASS_LADDER = DEFAULT_MASS_LADDER

_DEFAULT_N = {
    "simulate": 1_000,
    "weak-convergence": 20_000,
    "rate": 5_000,
    "observable-limit": 20_000,
    "velocity-divergence": 10_000,
    "diagnostics": 20_000,
}

_TOP_KEYS = {
    "experiment",
    "master_seed",
    "n_trajectories",
    "mass_ladder",
    "times",
    "workers",
    "output_dir",
    "model",
    "integrator",
    "initial",
    "audit",
    "weak_convergence",
    "rate",
    "observable_limit",
    "velocity_divergence",
    "diagnostics",
}

# Experiment table name as it appears in the config file, per experiment.
_TABLE_FOR = {
    "weak-convergence": "weak_convergence",
    "rate": "rate",
    "observable-limit": "observable_limit",
    "velocity-divergence": "velocity_divergence",
    "diagnostics": "diagnostics",
}


def load_config(path) -> dict:
    """Parse a TOML config file; decode errors keep tomli's line anchor."""
    try:
        with open(path, "rb") as handle:
            return tomli.load(handle)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from None


def apply_override(raw: dict, spec: str) -> None:
    """Apply one ``dotted.key=value`` override in place.

    The value is parsed with the TOML value grammar (so ``[1e-2, 1e-3]``
    becomes a float array); anything that does not parse is kept as a bare
    string for convenience.
    """
    key, sep, text = spec.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigurationError(f"override {spec!r} must look like key=value")
    try:
        value = tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {spec!r}: {part!r} is not a table")
    node[parts[-1]] = value


def _reject_unknown(table: dict, allowed, where: str) -> None:
    extras = sorted(set(table) - set(allowed))
    if extras:
        raise ConfigurationError(f"unknown {where} keys: {extras}")


def _get_int(table, key, default, where, minimum):
    value = table.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(f"{where}.{key} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigurationError(f"{where}.{key} must be >= {minimum}, got {value}")
    return value


def _get_float(table, key, default, where, positive=True):
    value = table.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"{where}.{key} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value) or (positive and value <= 0.0):
        raise ConfigurationError(f"{where}.{key} must be finite and positive")
    return value


def _get_str(table, key, default, where):
    value = table.get(key, default)
    if not isinstance(value, str):
        raise ConfigurationError(f"{where}.{key} must be a string, got {value!r}")
    return value


def _float_list(value, where, length=None):
    if not isinstance(value, list) or not value:
        raise ConfigurationError(f"{where} must be a non-empty array of numbers")
    out = []
    for entry in value:
        if isinstance(entry, bool) or not isinstance(entry, (int, float)):
            raise ConfigurationError(f"{where} must contain only numbers")
        entry = float(entry)
        if not math.isfinite(entry):
            raise ConfigurationError(f"{where} must contain only finite numbers")
        out.append(entry)
    if length is not None and len(out) != length:
        raise ConfigurationError(f"{where} must have {length} entries, got {len(out)}")
    return out


def _resolve_integrator(raw: dict) -> dict:
    table = raw.get("integrator", {})
    if not isinstance(table, dict):
        raise ConfigurationError("integrator must be a table")
    _reject_unknown(table, {"scheme", "steps_per_mass", "substeps", "chunk_size"},
                    "integrator")
    scheme = _get_str(table, "scheme", "exponential", "integrator")
    if scheme not in ("exponential", "euler-maruyama"):
        raise ConfigurationError(f"integrator.scheme must be exponential or "
                                 f"euler-maruyama, got {scheme!r}")
    return {
        "scheme": scheme,
        "steps_per_mass": _get_int(table, "steps_per_mass", DEFAULT_STEPS_PER_MASS,
                                   "integrator", 1),
        "substeps": _get_int(table, "substeps", 1, "integrator", 1),
        "chunk_size": _get_int(table, "chunk_size", 16384, "integrator", 1),
    }


def _resolve_initial(raw: dict, dim: int) -> dict:
    table = raw.get("initial", {})
    if not isinstance(table, dict):
        raise ConfigurationError("initial must be a table")
    _reject_unknown(table, {"position", "momentum"}, "initial")
    out = {}
    for key in ("position", "momentum"):
        if key in table:
            out[key] = _float_list(table[key], f"initial.{key}", length=dim)
        else:
            out[key] = [0.0] * dim
    return out


def _resolve_audit(raw: dict) -> dict:
    table = raw.get("audit", {})
    if not isinstance(table, dict):
        raise ConfigurationError("audit must be a table")
    _reject_unknown(table, {"box_halfwidth", "resolution", "times"}, "audit")
    times = table.get("times", [0.0])
    if not isinstance(times, list) or not times:
        raise ConfigurationError("audit.times must be a non-empty array")
    for t in times:
        if isinstance(t, bool) or not isinstance(t, (int, float)) or not math.isfinite(t):
            raise ConfigurationError("audit.times must contain only finite numbers")
    return {
        "box_halfwidth": _get_float(table, "box_halfwidth", 5.0, "audit"),
        "resolution": _get_int(table, "resolution", 21, "audit", 2),
        "times": [float(t) for t in times],
    }


def _resolve_experiment_table(raw: dict, experiment: str, dim: int) -> dict | None:
    # every known table is schema-checked when present; only the active
    # experiment's table is echoed into the resolved config
    known = {
        "weak_convergence": lambda t: {
            "norms": _float_list(t.get("norms", [0.5, 1.0, 2.0]),
                                 "weak_convergence.norms"),
        },
        "rate": lambda t: {
            "slope_min": _get_float(t, "slope_min", 0.4, "rate"),
            "slope_max": _get_float(t, "slope_max", 0.6, "rate"),
        },
        "observable_limit": lambda t: {
            "h": _get_str(t, "h", " + ".join(f"z{i + 1}**2" for i in range(dim)),
                          "observable_limit"),
            "order": _get_int(t, "order", 8, "observable_limit", 2),
            "integrand": _get_str(t, "integrand", "", "observable_limit"),
        },
        "velocity_divergence": lambda t: {
            "radius": _get_float(t, "radius", 1.0, "velocity_divergence"),
            "exponent": _get_float(t, "exponent", 0.25, "velocity_divergence"),
        },
        "diagnostics": lambda t: {
            "kappa": _get_float(t, "kappa", 0.75, "diagnostics"),
            "weight": _get_str(t, "weight", "s", "diagnostics"),
            "wiener_steps": _get_int(t, "wiener_steps", 2_000, "diagnostics", 2),
            "wiener_trajectories": _get_int(t, "wiener_trajectories", 100_000,
                                            "diagnostics", 100),
        },
    }
    resolved_active = None
    for name, resolver in known.items():
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigurationError(f"{name} must be a table")
        _reject_unknown(table, resolver({}).keys(), name)
        resolved = resolver(table)
        if _TABLE_FOR.get(experiment) == name:
            resolved_active = resolved
    return resolved_active


def resolve(raw: dict) -> dict:
    """Validate a parsed config and return it with every default applied.

    The model is built once here so structural and expression errors surface
    before any simulation starts; the resolved dict keeps the original
    (picklable) model mapping.
    """
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a table at the top level")
    _reject_unknown(raw, _TOP_KEYS, "config")

    experiment = raw.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigurationError(
            f"experiment must be one of {list(EXPERIMENTS)}, got {experiment!r}"
        )

    if "model" not in raw:
        raise ConfigurationError("config needs a [model] table")
    model = raw["model"]
    spec = build_model(model)  # validates builtin names and field expressions

    resolved = {
        "experiment": experiment,
        "master_seed": _get_int(raw, "master_seed", 2025, "config", 0),
        "workers": _get_int(raw, "workers", 1, "config", 1),
        "output_dir": _get_str(raw, "output_dir", "homogenize-out", "config"),
    }

    times = _float_list(raw.get("times", [1.0]), "times")
    if any(t <= 0.0 for t in times) or any(
        b <= a for a, b in zip(times, times[1:])
    ):
        raise ConfigurationError("times must be positive and strictly increasing")
    resolved["times"] = times

    if experiment in LADDER_EXPERIMENTS:
        if "mass_ladder" not in raw:
            raise ConfigurationError(
                f"experiment={experiment!r} needs mass_ladder (the standard "
                f"ladder is {list(STANDARD_MASS_LADDER)})"
            )
        ladder = _float_list(raw["mass_ladder"], "mass_ladder")
        if any(m <= 0.0 for m in ladder) or any(
            b >= a for a, b in zip(ladder, ladder[1:])
        ):
            raise ConfigurationError(
                "mass_ladder must be positive and strictly decreasing"
            )
        if experiment == "rate" and len(ladder) < 4:
            raise ConfigurationError("rate needs a mass_ladder with >= 4 masses")
        resolved["mass_ladder"] = ladder
        resolved["n_trajectories"] = _get_int(
            raw, "n_trajectories", _DEFAULT_N[experiment], "config", 2
        )
    # audit ignores mass_ladder / n_trajectories when present, so the same
    # config file can be audited and run

    resolved["model"] = model
    resolved["integrator"] = _resolve_integrator(raw)
    resolved["initial"] = _resolve_initial(raw, spec.dim)
    resolved["audit"] = _resolve_audit(raw)
    active = _resolve_experiment_table(raw, experiment, spec.dim)
    if active is not None:
        resolved[_TABLE_FOR[experiment]] = active
    return resolved


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return repr(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ConfigurationError("cannot serialize non-finite numbers")
        text = repr(value)
        return text if any(c in text for c in ".e") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)  # JSON string escaping is valid TOML
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigurationError(f"cannot serialize {type(value).__name__} to TOML")


def _emit_table(name: str, table: dict, lines: list) -> None:
    lines.append("")
    lines.append(f"[{name}]")
    nested = []
    for key, value in table.items():
        if isinstance(value, dict):
            nested.append((f"{name}.{key}", value))
        else:
            lines.append(f"{key} = {_toml_value(value)}")
    for sub_name, sub_table in nested:
        _emit_table(sub_name, sub_table, lines)


def dumps_toml(config: dict) -> str:
    """Serialize a resolved config back to TOML (round-trips through tomli)."""
    lines = []
    for key, value in config.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in config.items():
        if isinstance(value, dict):
            _emit_table(key, value, lines)
    return "\n".join(lines) + "\n"
