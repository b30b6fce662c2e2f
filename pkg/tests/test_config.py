"""Config schema, report files, and the command-line driver."""

import csv
import json
import math

import numpy as np
import pytest

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from homogenize import reporting
from homogenize.cli import main as cli_main
from homogenize.cli import render_model_table
from homogenize.config import (
    STANDARD_MASS_LADDER,
    apply_override,
    dumps_toml,
    load_config,
    resolve,
)
from homogenize.errors import ConfigurationError


def _rate_config(**top):
    cfg = {
        "experiment": "rate",
        "master_seed": 7,
        "n_trajectories": 200,
        "mass_ladder": [1e-1, 3e-2, 1e-2, 1e-3],
        "model": {"builtin": "ou-constant"},
    }
    cfg.update(top)
    return cfg


class TestSchema:
    def test_defaults_are_explicit(self):
        resolved = resolve(_rate_config())
        assert resolved["workers"] == 1
        assert resolved["times"] == [1.0]
        assert resolved["output_dir"] == "homogenize-out"
        assert resolved["integrator"] == {
            "scheme": "exponential",
            "steps_per_mass": 20,
            "substeps": 1,
            "chunk_size": 16384,
        }
        assert resolved["initial"] == {"position": [0.0], "momentum": [0.0]}
        assert resolved["audit"] == {
            "box_halfwidth": 5.0,
            "resolution": 21,
            "times": [0.0],
        }
        assert resolved["rate"] == {"slope_min": 0.4, "slope_max": 0.6}

    def test_missing_mass_ladder_is_a_schema_error(self):
        cfg = _rate_config()
        del cfg["mass_ladder"]
        with pytest.raises(ConfigurationError, match="mass_ladder"):
            resolve(cfg)

    def test_experiment_enum(self):
        with pytest.raises(ConfigurationError, match="experiment"):
            resolve(_rate_config(experiment="frobnicate"))

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigurationError, match="typo"):
            resolve(_rate_config(typo=1))
        with pytest.raises(ConfigurationError, match="integrator"):
            resolve(_rate_config(integrator={"stepsize": 0.1}))

    def test_model_required(self):
        cfg = _rate_config()
        del cfg["model"]
        with pytest.raises(ConfigurationError, match="model"):
            resolve(cfg)

    def test_ladder_must_decrease(self):
        with pytest.raises(ConfigurationError, match="decreasing"):
            resolve(_rate_config(mass_ladder=[1e-3, 1e-2, 1e-1, 1.0]))

    def test_rate_needs_four_masses(self):
        with pytest.raises(ConfigurationError, match="4"):
            resolve(_rate_config(mass_ladder=[1e-1, 1e-2, 1e-3]))

    def test_times_must_increase(self):
        with pytest.raises(ConfigurationError, match="times"):
            resolve(_rate_config(times=[1.0, 0.5]))
        with pytest.raises(ConfigurationError, match="times"):
            resolve(_rate_config(times=[-1.0]))

    def test_initial_data_must_match_dimension(self):
        cfg = _rate_config(
            model={"builtin": "magnetic-2d"}, initial={"position": [0.0]}
        )
        with pytest.raises(ConfigurationError, match="2 entries"):
            resolve(cfg)

    def test_default_observable_tracks_dimension(self):
        cfg = _rate_config(experiment="observable-limit")
        cfg["model"] = {"builtin": "magnetic-2d"}
        resolved = resolve(cfg)
        assert resolved["observable_limit"]["h"] == "z1**2 + z2**2"

    def test_bad_scheme(self):
        with pytest.raises(ConfigurationError, match="scheme"):
            resolve(_rate_config(integrator={"scheme": "milstein"}))

    def test_inline_expression_model_is_validated_early(self):
        cfg = _rate_config(
            model={"dim": 1, "fields": {"gamma": "2 + spin(q1)", "sigma": "1.0"}}
        )
        with pytest.raises(Exception, match="spin"):
            resolve(cfg)

    def test_audit_experiment_ignores_ladder(self):
        cfg = _rate_config(experiment="audit")
        resolved = resolve(cfg)
        assert "mass_ladder" not in resolved
        assert "n_trajectories" not in resolved


class TestOverrides:
    def test_dotted_key_with_toml_value(self):
        cfg = _rate_config()
        apply_override(cfg, "integrator.scheme=\"euler-maruyama\"")
        apply_override(cfg, "mass_ladder=[1e-1, 1e-2, 5e-3, 1e-3]")
        apply_override(cfg, "master_seed=99")
        resolved = resolve(cfg)
        assert resolved["integrator"]["scheme"] == "euler-maruyama"
        assert resolved["mass_ladder"] == [0.1, 0.01, 0.005, 0.001]
        assert resolved["master_seed"] == 99

    def test_bare_string_fallback(self):
        cfg = _rate_config()
        apply_override(cfg, "experiment=velocity-divergence")
        assert cfg["experiment"] == "velocity-divergence"

    def test_malformed_override(self):
        with pytest.raises(ConfigurationError, match="key=value"):
            apply_override({}, "no-equals-sign")

    def test_override_through_a_scalar(self):
        cfg = _rate_config()
        with pytest.raises(ConfigurationError, match="not a table"):
            apply_override(cfg, "master_seed.sub=1")


class TestTomlEcho:
    def test_round_trip_through_tomli(self):
        resolved = resolve(_rate_config(times=[0.5, 1.0], workers=3))
        assert tomli.loads(dumps_toml(resolved)) == resolved

    def test_round_trip_with_inline_model(self):
        cfg = _rate_config(
            model={
                "dim": 1,
                "fields": {"gamma": "2 + sin(q1)", "sigma": "sqrt(2)"},
            }
        )
        resolved = resolve(cfg)
        echoed = tomli.loads(dumps_toml(resolved))
        assert echoed == resolved
        assert echoed["model"]["fields"]["gamma"] == "2 + sin(q1)"

    def test_floats_stay_floats(self):
        text = dumps_toml({"a": 1.0, "b": 1, "c": [2.5, 1e-05]})
        parsed = tomli.loads(text)
        assert isinstance(parsed["a"], float) and isinstance(parsed["b"], int)
        assert parsed["c"] == [2.5, 1e-05]

    def test_standard_ladder_constant(self):
        assert list(STANDARD_MASS_LADDER) == [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]

    def test_line_anchored_parse_error(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text('experiment = "rate"\n[model\n')
        with pytest.raises(ConfigurationError, match="line 2"):
            load_config(bad)


class TestReporting:
    def test_key_order_is_stable(self):
        a = {"b": 1, "a": {"y": 2.0, "x": [1, 2]}}
        b = {"a": {"x": [1, 2], "y": 2.0}, "b": 1}
        assert reporting.report_bytes(a) == reporting.report_bytes(b)

    def test_non_finite_values_become_null(self):
        blob = reporting.report_bytes({"v": [float("nan"), float("inf"), 1.0]})
        assert json.loads(blob) == {"v": [None, None, 1.0]}

    def test_numpy_scalars_serialize(self):
        blob = reporting.report_bytes(
            {"f": np.float64(0.5), "i": np.int64(3), "b": np.bool_(True)}
        )
        assert json.loads(blob) == {"f": 0.5, "i": 3, "b": True}

    def test_reports_match_ignores_runtime(self):
        a = {"passed": True, "runtime": {"elapsed_seconds": 1.0}}
        b = {"passed": True, "runtime": {"elapsed_seconds": 9.9, "workers": 4}}
        assert reporting.reports_match(a, b)
        assert not reporting.reports_match(a, {"passed": False, "runtime": {}})

    def test_csv_is_rfc4180(self, tmp_path):
        path = reporting.write_table(
            tmp_path, "t", ["name", "value"], [('quote " and, comma', 0.1)]
        )
        raw = path.read_bytes()
        assert b"\r\n" in raw
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["name", "value"]
        assert rows[1] == ['quote " and, comma', "0.1"]

    def test_report_file_round_trip(self, tmp_path):
        report = {"x": 1, "nested": {"y": [0.25, 0.5]}}
        path = reporting.write_report(tmp_path, report)
        assert reporting.load_report(path) == report


@pytest.fixture
def rate_config_file(tmp_path):
    path = tmp_path / "rate.toml"
    path.write_text(
        "\n".join(
            [
                'experiment = "rate"',
                "master_seed = 11",
                "n_trajectories = 200",
                "mass_ladder = [1e-1, 3e-2, 1e-2, 1e-3]",
                "[model]",
                'builtin = "ou-constant"',
                "[rate]",
                "slope_min = 0.3",
                "slope_max = 0.7",
                "",
            ]
        )
    )
    return path


class TestCommandLine:
    def test_list_models_is_stable_and_annotated(self, capsys):
        assert cli_main(["list-models"]) == 0
        first = capsys.readouterr().out
        assert cli_main(["list-models"]) == 0
        assert capsys.readouterr().out == first
        assert "ou-constant" in first and "sigma**2 / (2*gamma)" in first
        assert "drag-1d-sin" in first and "-cos(q) / (2 + sin(q))**3" in first
        assert first == render_model_table()

    def test_run_writes_report_and_tables(self, rate_config_file, tmp_path):
        out = tmp_path / "out"
        assert cli_main(["run", str(rate_config_file), "--out", str(out)]) == 0
        report = reporting.load_report(out / "report.json")
        assert report["passed"] is True
        assert report["experiment"] == "rate"
        assert 0.3 < report["verdicts"]["coupling_rate"]["sup_fit"]["slope"] < 0.7
        assert (out / "tables" / "coupling_error.csv").exists()
        # the config echo carries no execution knobs
        assert "workers" not in report["config"]
        assert report["runtime"]["workers"] == 1

    def test_resolved_config_reproduces_the_run(self, rate_config_file, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli_main(["run", str(rate_config_file), "--out", str(out1)]) == 0
        resolved = out1 / "resolved-config.toml"
        assert cli_main(["run", str(resolved), "--out", str(out2)]) == 0
        assert reporting.reports_match(
            reporting.load_report(out1 / "report.json"),
            reporting.load_report(out2 / "report.json"),
        )

    def test_worker_count_does_not_change_the_report(self, rate_config_file, tmp_path):
        out1, out2 = tmp_path / "w1", tmp_path / "w2"
        args = ["run", str(rate_config_file)]
        assert cli_main(args + ["--out", str(out1), "--workers", "1"]) == 0
        assert cli_main(args + ["--out", str(out2), "--workers", "2"]) == 0
        a = reporting.load_report(out1 / "report.json")
        b = reporting.load_report(out2 / "report.json")
        assert reporting.reports_match(a, b)
        assert (a["runtime"]["workers"], b["runtime"]["workers"]) == (1, 2)

    def test_seed_flag_changes_the_run(self, rate_config_file, tmp_path):
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        cli_main(["run", str(rate_config_file), "--out", str(out1), "--seed", "1"])
        cli_main(["run", str(rate_config_file), "--out", str(out2), "--seed", "2"])
        a = reporting.load_report(out1 / "report.json")
        b = reporting.load_report(out2 / "report.json")
        assert a["config"]["master_seed"] == 1
        assert not reporting.reports_match(a, b)

    def test_exit_two_on_verdict_failure(self, rate_config_file, tmp_path):
        code = cli_main(
            [
                "run",
                str(rate_config_file),
                "--out",
                str(tmp_path / "f"),
                "--override",
                "rate.slope_min=0.55",
            ]
        )
        assert code == 2
        report = reporting.load_report(tmp_path / "f" / "report.json")
        assert report["passed"] is False

    def test_exit_two_on_audit_failure_before_simulation(self, tmp_path):
        cfg = tmp_path / "degenerate.toml"
        cfg.write_text(
            "\n".join(
                [
                    'experiment = "simulate"',
                    "n_trajectories = 50",
                    "mass_ladder = [1e-2]",
                    "[model]",
                    "dim = 1",
                    "[model.fields]",
                    'gamma = "1 + q1**2"',
                    'sigma = "0.0"',
                    "",
                ]
            )
        )
        out = tmp_path / "out"
        assert cli_main(["run", str(cfg), "--out", str(out)]) == 2
        report = reporting.load_report(out / "report.json")
        assert report["audit"]["passed"] is False
        assert report["verdicts"] == {}  # nothing ran after the audit

    def test_exit_one_on_bad_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text('experiment = "rate"\n[model\n')
        assert cli_main(["run", str(bad)]) == 1
        assert "line 2" in capsys.readouterr().err

    def test_exit_one_on_missing_ladder(self, tmp_path, capsys):
        cfg = tmp_path / "noladder.toml"
        cfg.write_text('experiment = "rate"\n[model]\nbuiltin = "ou-constant"\n')
        assert cli_main(["run", str(cfg)]) == 1
        assert "mass_ladder" in capsys.readouterr().err

    def test_audit_subcommand(self, rate_config_file, capsys):
        assert cli_main(["audit", str(rate_config_file)]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "drag floor" in out and "noise floor" in out

    def test_simulate_writes_paths_and_moments(self, tmp_path):
        cfg = tmp_path / "sim.toml"
        cfg.write_text(
            "\n".join(
                [
                    'experiment = "simulate"',
                    "n_trajectories = 40",
                    "mass_ladder = [1e-2]",
                    "times = [0.5, 1.0]",
                    "[model]",
                    'builtin = "magnetic-2d"',
                    "",
                ]
            )
        )
        out = tmp_path / "out"
        assert cli_main(["run", str(cfg), "--out", str(out)]) == 0
        with open(out / "tables" / "moments.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0][:3] == ["time", "mean_q1", "mean_q2"]
        assert len(rows) == 3  # header + two sample times
        for j in range(3):
            with open(out / "paths" / f"trajectory_{j}.csv", newline="") as handle:
                path_rows = list(csv.reader(handle))
            assert path_rows[0] == [
                "time", "q1", "q2", "u1", "u2", "limit_q1", "limit_q2",
            ]
            assert math.isclose(float(path_rows[-1][0]), 1.0)

    def test_velocity_divergence_cli_round_trip(self, tmp_path):
        cfg = tmp_path / "vel.toml"
        cfg.write_text(
            "\n".join(
                [
                    'experiment = "velocity-divergence"',
                    "n_trajectories = 400",
                    "mass_ladder = [1e-1, 1e-2, 1e-3]",
                    "[model]",
                    'builtin = "ou-constant"',
                    "[velocity_divergence]",
                    "radius = 1.0",
                    "exponent = 0.25",
                    "",
                ]
            )
        )
        out = tmp_path / "out"
        assert cli_main(["run", str(cfg), "--out", str(out)]) == 0
        report = reporting.load_report(out / "report.json")
        probs = report["verdicts"]["velocity_divergence"]["probability"]
        assert probs == sorted(probs, reverse=True)
