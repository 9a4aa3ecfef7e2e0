import json
import os

import numpy as np
import pytest

from fundspan.cli import main
from fundspan.market import AffineField, ConstantField, OUDriftField
from fundspan.scenario import (PRESETS, ScenarioError, parse_scenario,
                               preset_bundle)

CONSTANT_UTILITY_SCENARIO = """\
[market]
stocks = 2
constraint_level = 1.0
horizon = 0.5
initial_wealth = 1.0
domain = positive

[rate]
kind = constant
value = 0.02

[appreciation]
kind = constant
value = 0.08, 0.05

[volatility]
kind = constant
value = 0.2, 0.0; 0.0, 0.3

[utility]
family = capped_linear_quadratic
lam = 0.25
cap = 0.5

[grid]
x_nodes = 31
x_lo = -0.3
x_hi = 0.3
t_steps = auto

[mc]
steps = 20
paths = 200
seed = 7
"""


class TestParsing:
    def test_presets_all_parse(self):
        for name in PRESETS:
            b = preset_bundle(name)
            assert b.spec.n >= 2

    def test_factor_span_structure(self):
        b = preset_bundle("factor_span")
        assert (b.spec.n, b.spec.m, b.spec.M) == (4, 1, 0)
        assert b.spec.mu == 2
        assert isinstance(b.spec.appreciation, AffineField)
        assert isinstance(b.spec.eta_drift, OUDriftField)
        assert isinstance(b.spec.volatility, ConstantField)

    def test_matrix_and_vector_values(self):
        b = preset_bundle("merton_log")
        np.testing.assert_array_equal(b.spec.appreciation.value,
                                      [0.10, 0.06])
        np.testing.assert_array_equal(b.spec.volatility.value,
                                      [[0.20, 0.0], [0.0, 0.25]])

    def test_unknown_key_rejected_with_line(self):
        text = PRESETS["merton_log"].replace("[mc]", "[mc]\nbogus_key = 3")
        with pytest.raises(ScenarioError, match=r"line \d+.*bogus_key"):
            parse_scenario(text)

    def test_unknown_section_rejected(self):
        text = PRESETS["merton_log"] + "\n[mystery]\nx = 1\n"
        with pytest.raises(ScenarioError, match="unknown section"):
            parse_scenario(text)

    def test_wrong_shape_rejected(self):
        text = PRESETS["merton_log"].replace("value = 0.10, 0.06",
                                             "value = 0.10, 0.06, 0.01")
        with pytest.raises(ScenarioError, match="shape"):
            parse_scenario(text)

    def test_disallowed_kind_rejected(self):
        text = PRESETS["merton_log"].replace(
            "[volatility]\nkind = constant",
            "[volatility]\nkind = affine")
        with pytest.raises(ScenarioError, match="cannot use kind"):
            parse_scenario(text)

    def test_mismatched_utility_domain(self):
        text = PRESETS["merton_log"].replace("domain = positive",
                                             "domain = reals")
        with pytest.raises(ScenarioError):
            parse_scenario(text)

    def test_grid_overrides(self):
        b = parse_scenario(CONSTANT_UTILITY_SCENARIO)
        g = b.build_grid()
        assert g.x_nodes == 31
        assert (g.x_lo, g.x_hi) == (-0.3, 0.3)
        assert b.mc.paths == 200


class TestCli:
    @pytest.fixture()
    def preset_dir(self, tmp_path):
        out = tmp_path / "presets"
        assert main(["presets", "--out", str(out)]) == 0
        return out

    def test_validate_ok(self, preset_dir, tmp_path, capsys):
        rc = main(["validate", "--scenario",
                   str(preset_dir / "merton_log.ini"),
                   "--out", str(tmp_path / "v")])
        assert rc == 0
        assert "PASS" in capsys.readouterr().out
        manifest = json.loads((tmp_path / "v" / "manifest.json").read_text())
        assert manifest["subcommand"] == "validate"
        assert all(os.path.exists(p) for p in manifest["outputs"])

    def test_validate_singular_volatility(self, preset_dir, tmp_path,
                                          capsys):
        text = (preset_dir / "merton_log.ini").read_text().replace(
            "value = 0.20, 0.00; 0.00, 0.25",
            "value = 0.20, 0.00; 0.00, 0.00")
        bad = tmp_path / "singular.ini"
        bad.write_text(text)
        rc = main(["validate", "--scenario", str(bad),
                   "--out", str(tmp_path / "v2")])
        assert rc == 1
        assert "volatility not invertible" in capsys.readouterr().out

    def test_validate_negative_rate(self, preset_dir, tmp_path, capsys):
        text = (preset_dir / "merton_log.ini").read_text().replace(
            "kind = constant\nvalue = 0.02",
            "kind = constant\nvalue = -0.01", 1)
        bad = tmp_path / "negrate.ini"
        bad.write_text(text)
        rc = main(["validate", "--scenario", str(bad),
                   "--out", str(tmp_path / "v3")])
        assert rc == 1
        out = capsys.readouterr().out
        assert "r =" in out and "< 0" in out

    def test_solve_merton_and_reproducible(self, preset_dir, tmp_path,
                                           capsys):
        scen = str(preset_dir / "merton_log.ini")
        rc = main(["solve", "--scenario", scen,
                   "--out", str(tmp_path / "s1"), "--grid", "51,0,0,0"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "max span residual" in out
        rc = main(["solve", "--scenario", scen,
                   "--out", str(tmp_path / "s2"), "--grid", "51,0,0,0"])
        assert rc == 0
        csv1 = (tmp_path / "s1" / "policy_t0.csv").read_bytes()
        csv2 = (tmp_path / "s2" / "policy_t0.csv").read_bytes()
        assert csv1 == csv2

    def test_solve_factor_span_reports_two_funds(self, preset_dir, tmp_path,
                                                 capsys):
        rc = main(["solve", "--scenario",
                   str(preset_dir / "factor_span.ini"),
                   "--out", str(tmp_path / "fs"),
                   "--grid", "31,15,0,0"])
        assert rc == 0
        assert "funds used (mu): 2" in capsys.readouterr().out

    def test_solve_constant_utility_zero_policy(self, tmp_path, capsys):
        scen = tmp_path / "const.ini"
        scen.write_text(CONSTANT_UTILITY_SCENARIO)
        rc = main(["solve", "--scenario", str(scen),
                   "--out", str(tmp_path / "c")])
        assert rc == 0
        lines = (tmp_path / "c" / "policy_t0.csv").read_text().splitlines()
        head = lines[0].split(",")
        u_cols = [i for i, h in enumerate(head) if h in ("u1", "u2")]
        for row in lines[1:]:
            vals = row.split(",")
            assert all(float(vals[i]) == 0.0 for i in u_cols)

    def test_simulate_and_evaluate(self, preset_dir, tmp_path, capsys):
        scen = str(preset_dir / "merton_log.ini")
        rc = main(["simulate", "--scenario", scen,
                   "--out", str(tmp_path / "sim"),
                   "--paths", "3", "--steps", "5", "--strategy", "zero"])
        assert rc == 0
        lines = (tmp_path / "sim" / "paths.csv").read_text().splitlines()
        assert len(lines) == 1 + 3 * 6
        rc = main(["evaluate", "--scenario", scen,
                   "--out", str(tmp_path / "ev"),
                   "--paths", "500", "--steps", "20",
                   "--strategy", "oracle"])
        assert rc == 0
        assert "mean=" in capsys.readouterr().out

    def test_report_passes(self, preset_dir, tmp_path, capsys):
        rc = main(["report", "--scenario",
                   str(preset_dir / "merton_log.ini"),
                   "--out", str(tmp_path / "rep"),
                   "--paths", "4000", "--steps", "60",
                   "--grid", "51,0,0,0"])
        assert rc == 0
        text = (tmp_path / "rep" / "report.txt").read_text()
        assert "overall: PASS" in text
        assert (tmp_path / "rep" / "report.csv").exists()

    def test_missing_scenario_file(self, tmp_path, capsys):
        rc = main(["validate", "--scenario", str(tmp_path / "nope.ini"),
                   "--out", str(tmp_path / "x")])
        assert rc == 1

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 2

    def test_argmax_check_command(self, preset_dir, tmp_path, capsys):
        rc = main(["argmax-check", "--scenario",
                   str(preset_dir / "merton_log.ini"),
                   "--out", str(tmp_path / "am"),
                   "--grid", "51,0,0,0", "--samples", "25"])
        assert rc == 0
        assert "within tolerance" in capsys.readouterr().out
