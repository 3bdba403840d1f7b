import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

import nonumeraire
from nonumeraire.cli import main, merge_config, run_command
from nonumeraire.report import emit_report
from nonumeraire.specfile import parse_market_file

FIXTURES = Path(nonumeraire.__file__).parent / "fixtures"
SCHEMA = json.loads((Path(__file__).parents[1] / "docs" / "report_schema.json").read_text())
M1 = str(FIXTURES / "m1.yaml")

BROKEN = "atoms:\n  - [a, 0.6]\n  - [b, 0.5]\ntimes: [0, 1]\nfiltration: trivial\n" \
         "generators: [{name: X, rows: [[1, 1], [1, 1]]}]\n"


def run(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr().out


def machine(argv, capsys):
    code, out = run(argv + ["--format", "machine"], capsys)
    return code, out, json.loads(out)


class TestExitCodes:
    def test_deflate_pass(self, capsys):
        code, out = run(["deflate", M1], capsys)
        assert code == 0
        assert "verdict: pass" in out and "max_ratio" in out

    def test_validate_broken_file(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text(BROKEN)
        code, out = run(["validate", str(p)], capsys)
        assert code == 2
        assert "probabilities sum to 1.1" in out

    def test_missing_file(self, capsys):
        code, _ = run(["deflate", "/nonexistent.yaml"], capsys)
        assert code == 2

    def test_verify_needs_deflator(self, capsys):
        code, _ = run(["verify", M1], capsys)
        assert code == 2

    def test_verify_bad_deflator_fails(self, tmp_path, capsys):
        p = tmp_path / "z.yaml"
        p.write_text("z:\n  - [1, 0.9, 1]\n  - [1, 1, 1]\n")
        code, _, rep = machine(["verify", M1, "--deflator", str(p)], capsys)
        assert code == 1 and rep["verdicts"]["verdict"] == "fail"

    def test_divergent_market_refused(self, capsys):
        code, _, rep = machine(["deflate", str(FIXTURES / "example_2_8.yaml")], capsys)
        assert code == 1 and rep["status"] == "refused"
        assert rep["outputs"]["refusal"]["stage"] == "nupbr"

    def test_clock_without_stanza(self, capsys):
        code, _ = run(["clock", M1], capsys)
        assert code == 2

    def test_diagnostics_complete(self, capsys):
        for cmd in ("validate", "nupbr", "crash", "hull"):
            code, _ = run([cmd, M1], capsys)
            assert code == 0, cmd


class TestReports:
    def test_m1_deflator(self, capsys):
        _, _, rep = machine(["deflate", M1], capsys)
        rows = rep["outputs"]["z"]["rows"]
        np.testing.assert_allclose([r[1:] for r in rows], [[1, 0.5, 1], [1, 1, 1]])
        assert rep["outputs"]["tau"]["per_atom"] == {"w0": "2", "w1": "1"}

    @pytest.mark.parametrize("cmd", ["validate", "deflate", "nupbr", "crash", "hull"])
    def test_schema(self, cmd, capsys):
        _, _, rep = machine([cmd, M1], capsys)
        jsonschema.validate(rep, SCHEMA)

    def test_schema_dyadic_and_clock(self, capsys):
        for argv in (["dyadic", str(FIXTURES / "clock_toy.yaml"), "--max-level", "4"],
                     ["clock", str(FIXTURES / "clock_toy.yaml"), "--max-level", "4"]):
            code, _, rep = machine(argv, capsys)
            jsonschema.validate(rep, SCHEMA)
            assert code == 0

    def test_error_report_schema(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text(BROKEN)
        _, _, rep = machine(["validate", str(p)], capsys)
        jsonschema.validate(rep, SCHEMA)
        assert rep["status"] == "input-error"

    def test_verify_round_trip(self, tmp_path, capsys):
        out = tmp_path / "r.json"
        assert main(["deflate", M1, "--format", "machine", "--out", str(out)]) == 0
        code, _, rep = machine(["verify", M1, "--deflator", str(out)], capsys)
        assert code == 0 and rep["verdicts"]["max_ratio"] <= 1 + 1e-9

    def test_floats_round_trip(self, capsys):
        doc = parse_market_file(M1)
        rep = run_command(doc, "deflate")
        tree = json.loads(emit_report(rep, "machine"))
        assert tree["tolerance"] == doc.config["tolerance"]

    def test_timing_only_in_human_output(self, capsys):
        _, out = run(["deflate", M1], capsys)
        assert "timing:" in out
        _, raw, rep = machine(["deflate", M1], capsys)
        assert "timing" not in rep


class TestDeterminism:
    @pytest.mark.parametrize("argv", [
        ["deflate", M1],
        ["hull", M1, "--seed", "3"],
        ["dyadic", str(FIXTURES / "clock_toy.yaml"), "--max-level", "4"],
    ])
    def test_byte_identical(self, argv, capsys):
        _, a, _ = machine(argv, capsys)
        _, b, _ = machine(argv, capsys)
        assert a == b


class TestConfig:
    def test_precedence(self):
        cfg = merge_config({"n_cap": 10, "seed": 4}, {"seed": 9, "tolerance": None})
        assert cfg["n_cap"] == 10 and cfg["seed"] == 9 and cfg["tolerance"] == 1e-9

    def test_cli_override_reaches_report(self, capsys):
        _, _, rep = machine(["deflate", M1, "--tol", "1e-7", "--n-cap", "5"], capsys)
        assert rep["config"]["tolerance"] == 1e-7
        assert rep["config"]["n_cap"] == 5
        assert rep["config"]["seed"] == 7


class TestExample:
    def test_demonstration(self, capsys):
        code, _, rep = machine(["example"], capsys)
        out = rep["outputs"]
        assert code == 0
        assert out["terminal"]["value_set_is_zero"]
        assert out["half"]["verdict"] == "divergent"
        assert out["half"]["max_value"] == 1000
        assert out["deflator"]["refused"]
