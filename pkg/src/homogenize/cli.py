"""Experiment driver: config file in, deterministic report files out.

Every run audits the model assumptions first, then dispatches on the
``experiment`` key.  Exit codes: 0 when every verdict passes, 2 when the
audit or a verdict fails, 1 on execution errors (unparseable config, schema
violation, bad expression, ...).
"""

import argparse
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import reporting
from . import statistics as stats
from .errors import HomogenizeError
from .expressions import compile_field
from .integrators import EnsembleRequest, run_ensemble, simulate_coupled, z7_ensemble
from .library import build_model, model_catalog
from .model import audit_assumptions

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_FAIL = 2


# ---------------------------------------------------------------------------
# shared plumbing


def _request_options(resolved: dict) -> dict:
    integ = resolved["integrator"]
    return {
        "scheme": integ["scheme"],
        "substeps": integ["substeps"],
        "chunk_size": integ["chunk_size"],
    }


def _common_kwargs(resolved: dict) -> dict:
    return {
        "mass_ladder": tuple(resolved["mass_ladder"]),
        "n_trajectories": resolved["n_trajectories"],
        "master_seed": resolved["master_seed"],
        "steps_per_mass": resolved["integrator"]["steps_per_mass"],
        "workers": resolved["workers"],
        "q0": tuple(resolved["initial"]["position"]),
        "u0": tuple(resolved["initial"]["momentum"]),
        "request_options": _request_options(resolved),
    }


def _compile_h(source: str, dim: int):
    """Observable h(J, q, z) from an expression over j, q1..qn, z1..zn."""
    names = ("j",) + tuple(f"q{i + 1}" for i in range(dim)) + tuple(
        f"z{i + 1}" for i in range(dim)
    )
    expr = compile_field(source, names)

    def h(j_values, q_rows, z_rows):
        j_values = np.asarray(j_values, dtype=float)
        q_rows = np.asarray(q_rows, dtype=float)
        z_rows = np.asarray(z_rows, dtype=float)
        env = {"j": j_values}
        for i in range(dim):
            env[f"q{i + 1}"] = q_rows[..., i]
            env[f"z{i + 1}"] = z_rows[..., i]
        out = np.asarray(expr(**env), dtype=float)
        return np.broadcast_to(out, j_values.shape)

    return h


# ---------------------------------------------------------------------------
# experiment dispatchers: resolved config -> (verdicts, tables, paths, passed)


def _run_weak_convergence(resolved, spec):
    table = resolved["weak_convergence"]
    rep = stats.weak_convergence_test(
        resolved["model"],
        times=tuple(resolved["times"]),
        norms=tuple(table["norms"]),
        **_common_kwargs(resolved),
    )
    d = rep.to_dict()
    rows = list(
        zip(d["masses"], d["cf_discrepancy"], d["cf_stderr"], d["worst_frequency"])
    )
    header = ["mass", "cf_discrepancy", "stderr", "worst_frequency"]
    return {"weak_convergence": d}, {"cf_discrepancy": (header, rows)}, {}, rep.passed


def _run_rate(resolved, spec):
    table = resolved["rate"]
    rep = stats.coupling_rate_test(
        resolved["model"],
        horizon=max(resolved["times"]),
        slope_range=(table["slope_min"], table["slope_max"]),
        **_common_kwargs(resolved),
    )
    return (
        {"coupling_rate": rep.to_dict()},
        {"coupling_error": rep.table()},
        {},
        rep.passed,
    )


def _run_observable_limit(resolved, spec):
    table = resolved["observable_limit"]
    rep = stats.observable_limit_test(
        resolved["model"],
        _compile_h(table["h"], spec.dim),
        t=max(resolved["times"]),
        order=table["order"],
        observable=table["integrand"] or None,
        **_common_kwargs(resolved),
    )
    return (
        {"observable_limit": rep.to_dict()},
        {"observable_limit": rep.table()},
        {},
        rep.passed,
    )


def _run_velocity_divergence(resolved, spec):
    table = resolved["velocity_divergence"]
    rep = stats.velocity_divergence_test(
        resolved["model"],
        t=max(resolved["times"]),
        radius=table["radius"],
        exponent=table["exponent"],
        **_common_kwargs(resolved),
    )
    return (
        {"velocity_divergence": rep.to_dict()},
        {"velocity_divergence": rep.table()},
        {},
        rep.passed,
    )


def _run_diagnostics(resolved, spec):
    """Window velocity readout down the ladder, two-time independence at the
    smallest mass, and the Gaussianity of a pure Wiener integral."""
    table = resolved["diagnostics"]
    common = _common_kwargs(resolved)
    horizon = max(resolved["times"])
    kappa = table["kappa"]

    rows = []
    for mass in common["mass_ladder"]:
        n_steps = max(1, int(round(horizon / (mass / common["steps_per_mass"]))))
        req = EnsembleRequest(
            mass=mass,
            horizon=horizon,
            n_steps=n_steps,
            n_trajectories=common["n_trajectories"],
            master_seed=common["master_seed"],
            q0=common["q0"],
            u0=common["u0"],
            couple=False,
            window=mass**kappa,
            **common["request_options"],
        )
        res = run_ensemble(resolved["model"], req, common["workers"])
        readout = z7_ensemble(spec, res, mass, kappa=kappa)
        square = (readout**2).sum(axis=1)
        m_rows = stats.local_equilibrium_covariance(spec, horizon, res.q_final)
        target = float(np.trace(m_rows.mean(axis=0)))
        rows.append(
            (
                mass,
                float(square.mean()),
                float(square.std(ddof=1) / np.sqrt(square.size)),
                target,
            )
        )
    readout_block = {
        "masses": [r[0] for r in rows],
        "mean_square": [r[1] for r in rows],
        "stderr": [r[2] for r in rows],
        "target_trace": [r[3] for r in rows],
    }

    times = resolved["times"]
    pair = (times[0], times[-1]) if len(times) >= 2 else (horizon / 2.0, horizon)
    two_time = stats.two_time_independence_test(
        resolved["model"],
        times=pair,
        mass=common["mass_ladder"][-1],
        n_trajectories=common["n_trajectories"],
        master_seed=common["master_seed"],
        steps_per_mass=common["steps_per_mass"],
        workers=common["workers"],
        q0=common["q0"],
        u0=common["u0"],
        request_options=common["request_options"],
    )

    weight = compile_field(table["weight"], ("s",))
    wiener = stats.wiener_integral_gaussianity_test(
        lambda s: float(weight(s=s)),
        t=horizon,
        n_trajectories=table["wiener_trajectories"],
        n_steps=table["wiener_steps"],
        master_seed=common["master_seed"],
        chunk_size=resolved["integrator"]["chunk_size"],
    )

    verdicts = {
        "window_readout": readout_block,
        "two_time_independence": two_time.to_dict(),
        "wiener_integral": wiener.to_dict(),
    }
    tables = {
        "window_readout": (["mass", "mean_square", "stderr", "target_trace"], rows)
    }
    return verdicts, tables, {}, two_time.passed and wiener.passed


def _run_simulate(resolved, spec):
    """One coupled ensemble at the smallest ladder mass; moments + sample paths."""
    common = _common_kwargs(resolved)
    mass = common["mass_ladder"][-1]
    horizon = max(resolved["times"])
    n_steps = max(1, int(round(horizon / (mass / common["steps_per_mass"]))))
    req = EnsembleRequest(
        mass=mass,
        horizon=horizon,
        n_steps=n_steps,
        n_trajectories=common["n_trajectories"],
        master_seed=common["master_seed"],
        q0=common["q0"],
        u0=common["u0"],
        sample_times=tuple(resolved["times"]),
        couple=True,
        track_sup_difference=True,
        **common["request_options"],
    )
    res = run_ensemble(resolved["model"], req, common["workers"])

    header = ["time"]
    for label in ("mean_q", "var_q", "mean_z", "var_z"):
        header += [f"{label}{i + 1}" for i in range(spec.dim)]
    rows = []
    for idx, t in enumerate(res.sample_times):
        q = res.q_samples[idx]
        z = res.z_at(idx)
        rows.append(
            (float(t),)
            + tuple(q.mean(axis=0))
            + tuple(q.var(axis=0, ddof=1))
            + tuple(z.mean(axis=0))
            + tuple(z.var(axis=0, ddof=1))
        )

    sup = res.sup_difference
    verdict = {
        "simulate": {
            "mass": mass,
            "n_steps": n_steps,
            "coupling_sup_mean": float(sup.mean()),
            "coupling_sup_stderr": float(sup.std(ddof=1) / np.sqrt(sup.size)),
        }
    }

    paths = {}
    for j in range(min(3, common["n_trajectories"])):
        inertial, limit, _ = simulate_coupled(
            resolved["model"],
            mass,
            common["q0"],
            common["u0"],
            horizon,
            n_steps,
            common["master_seed"],
            j,
            scheme=common["request_options"]["scheme"],
            substeps=common["request_options"]["substeps"],
        )
        p_header = ["time"]
        for label in ("q", "u", "limit_q"):
            p_header += [f"{label}{i + 1}" for i in range(spec.dim)]
        p_rows = [
            (float(t),) + tuple(inertial.q[k]) + tuple(inertial.u[k]) + tuple(limit.q[k])
            for k, t in enumerate(inertial.times)
        ]
        paths[f"trajectory_{j}"] = (p_header, p_rows)

    return verdict, {"moments": (header, rows)}, paths, True


def _run_audit_only(resolved, spec):
    return {}, {}, {}, True  # the shared audit step is the whole experiment


_DISPATCH = {
    "audit": _run_audit_only,
    "simulate": _run_simulate,
    "weak-convergence": _run_weak_convergence,
    "rate": _run_rate,
    "observable-limit": _run_observable_limit,
    "velocity-divergence": _run_velocity_divergence,
    "diagnostics": _run_diagnostics,
}


# ---------------------------------------------------------------------------
# report assembly


def _audit_model(resolved: dict, spec):
    table = resolved["audit"]
    halfwidth = table["box_halfwidth"]
    box = [(-halfwidth, halfwidth)] * spec.dim
    return audit_assumptions(
        spec, box, times=tuple(table["times"]), resolution=table["resolution"]
    )


def _assemble_report(resolved, audit, verdicts, tables, paths, passed, started):
    echo = {k: v for k, v in resolved.items() if k not in ("workers", "output_dir")}
    return {
        "schema": "homogenize-report-v1",
        "experiment": resolved["experiment"],
        "config": echo,
        "audit": audit.to_dict(),
        "verdicts": verdicts,
        "passed": bool(audit.passed and passed),
        "artifacts": {
            "report": "report.json",
            "resolved_config": "resolved-config.toml",
            "tables": sorted(f"tables/{name}.csv" for name in tables),
            "paths": sorted(f"paths/{name}.csv" for name in paths),
        },
        "runtime": {
            "elapsed_seconds": round(time.monotonic() - started, 3),
            "workers": resolved["workers"],
            "output_dir": resolved["output_dir"],
            "timestamp": datetime.now(timezone.utc).isoformat(),
        },
    }


def run_experiment(resolved: dict, outdir: Path) -> tuple[dict, int]:
    """Audit, run, and persist one experiment; returns (report, exit code)."""
    started = time.monotonic()
    spec = build_model(resolved["model"])
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "resolved-config.toml").write_text(
        config_mod.dumps_toml(resolved), encoding="utf-8"
    )

    audit = _audit_model(resolved, spec)
    if not audit.passed:
        report = _assemble_report(resolved, audit, {}, {}, {}, False, started)
        reporting.write_report(outdir, report)
        return report, EXIT_FAIL

    verdicts, tables, paths, passed = _DISPATCH[resolved["experiment"]](resolved, spec)
    for name, (header, rows) in sorted(tables.items()):
        reporting.write_table(outdir, name, header, rows)
    for name, (header, rows) in sorted(paths.items()):
        reporting.write_path_table(outdir, name, header, rows)
    report = _assemble_report(resolved, audit, verdicts, tables, paths, passed, started)
    reporting.write_report(outdir, report)
    return report, EXIT_PASS if report["passed"] else EXIT_FAIL


# ---------------------------------------------------------------------------
# text rendering


_NOTE_LABELS = {
    "stationary_covariance": "M",
    "noise_induced_drift": "S",
    "effective_drag": "effective drag",
}


def render_model_table() -> str:
    """Stable text listing of the built-in models with analytic annotations."""
    lines = []
    for entry in model_catalog():
        lines.append(f"{entry['name']}  (dim {entry['dim']})")
        lines.append(f"    {entry['description']}")
        for key, value in entry["notes"].items():
            lines.append(f"    {_NOTE_LABELS.get(key, key)} = {value}")
        lines.append("")
    return "\n".join(lines)


def _render_audit(audit) -> str:
    status = "PASS" if audit.passed else "FAIL"
    lines = [
        f"audit {audit.model}: {status}",
        f"    drag floor (lambda) = {audit.drag_floor!r}",
        f"    noise floor (mu)    = {audit.noise_floor!r}",
        f"    drag norm           = {audit.drag_norm!r}",
        f"    noise norm          = {audit.noise_norm!r}",
        f"    drag Lipschitz est. = {audit.drag_lipschitz!r}",
        f"    sigma Lipschitz est.= {audit.sigma_lipschitz!r}",
    ]
    for name, ok in sorted(audit.flags.items()):
        lines.append(f"    [{'ok' if ok else 'VIOLATED'}] {name}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="homogenize",
        description="Small-mass limit laboratory: audits, simulations, verdicts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the experiment described by a config")
    run_p.add_argument("config", type=Path, help="TOML config file")
    run_p.add_argument("--seed", type=int, help="override master_seed")
    run_p.add_argument("--workers", type=int, help="override worker count")
    run_p.add_argument("--out", type=Path, help="override output directory")
    run_p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-key config override (repeatable)",
    )

    sub.add_parser("list-models", help="list built-in models and annotations")

    audit_p = sub.add_parser("audit", help="audit model assumptions only")
    audit_p.add_argument("config", type=Path, help="TOML config file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list-models":
            sys.stdout.write(render_model_table())
            return EXIT_PASS

        if args.command == "audit":
            raw = config_mod.load_config(args.config)
            raw.setdefault("experiment", "audit")
            resolved = config_mod.resolve(raw)
            spec = build_model(resolved["model"])
            audit = _audit_model(resolved, spec)
            sys.stdout.write(_render_audit(audit))
            return EXIT_PASS if audit.passed else EXIT_FAIL

        raw = config_mod.load_config(args.config)
        for entry in args.override:
            config_mod.apply_override(raw, entry)
        if args.seed is not None:
            raw["master_seed"] = args.seed
        if args.workers is not None:
            raw["workers"] = args.workers
        if args.out is not None:
            raw["output_dir"] = str(args.out)
        resolved = config_mod.resolve(raw)
        report, code = run_experiment(resolved, Path(resolved["output_dir"]))
        status = "PASS" if report["passed"] else "FAIL"
        print(f"{resolved['experiment']}: {status} ({resolved['output_dir']}/report.json)")
        return code
    except HomogenizeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
