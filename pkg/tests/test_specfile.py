import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

import nonumeraire
from nonumeraire.specfile import SpecError, load_matrix_file, parse_market_file, parse_number

FIXTURES = Path(nonumeraire.__file__).parent / "fixtures"

BROKEN = """\
version: 1
atoms:
  - [a, 0.6]
  - [b, 0.5]
times: [0, 1]
filtration:
  - [[a], [b]]
  - [[a, b]]
generators:
  - name: X
    rows:
      - [2, 1]
      - [1, 1]
"""


class TestNumbers:
    @pytest.mark.parametrize("raw, want", [
        (3, Fraction(3)), ("1/3", Fraction(1, 3)), (0.25, Fraction(1, 4)),
        ("1e-3", Fraction(1, 1000)), ("inf", math.inf),
    ])
    def test_parse(self, raw, want):
        assert parse_number(raw) == want

    def test_boolean_rejected(self):
        with pytest.raises(ValueError):
            parse_number(True)


class TestFixtures:
    def test_m1(self):
        doc = parse_market_file(FIXTURES / "m1.yaml")
        assert doc.n_atoms == 2 and doc.n_times == 3
        assert len(doc.market.generators) == 1
        np.testing.assert_array_equal(doc.market.generators[0].values, [[1, 2, 0], [1, 0, 0]])
        assert doc.config["seed"] == 7

    def test_example_family(self):
        doc = parse_market_file(FIXTURES / "example_2_8.yaml")
        fam = doc.market.families[0]
        assert fam.kind == "example_2_8" and (fam.n_min, fam.n_max) == (1, 1000)
        assert doc.n_times == 101

    def test_clock_stanza(self):
        doc = parse_market_file(FIXTURES / "clock_toy.yaml")
        assert doc.clock.times == (Fraction(1), Fraction(2))
        assert doc.independence_claimed

    def test_digest_stable(self):
        a = parse_market_file(FIXTURES / "m1.yaml")
        b = parse_market_file((FIXTURES / "m1.yaml").read_text())
        assert a.digest == b.digest


class TestErrors:
    def test_every_problem_listed_with_lines(self):
        with pytest.raises(SpecError) as info:
            parse_market_file(BROKEN)
        errs = info.value.errors
        # anchors point at the value node: the atom list and the rows list
        assert "line 3: atoms: probabilities sum to 1.1" in errs
        assert "line 7: filtration: refinement fails at step 1" in errs
        assert "line 12: generators.0.rows: X: initial value not 1" in errs

    def test_syntax_error(self):
        with pytest.raises(SpecError) as info:
            parse_market_file("atoms: [a, 1\n")
        assert "syntax error" in info.value.errors[0]

    def test_unknown_keys(self):
        text = (FIXTURES / "m1.yaml").read_text() + "bogus: 1\n"
        with pytest.raises(SpecError, match="unknown key"):
            parse_market_file(text)

    def test_missing_file(self):
        with pytest.raises(SpecError, match="no such file"):
            parse_market_file("/nonexistent/market.yaml")

    def test_bad_config(self):
        text = (FIXTURES / "m1.yaml").read_text().replace("tolerance: 1e-9", "tolerance: -1")
        with pytest.raises(SpecError, match="must be positive"):
            parse_market_file(text)

    def test_example_family_needs_one_atom(self):
        text = (FIXTURES / "example_2_8.yaml").read_text().replace(
            "  - [w0, 1]", "  - [w0, 1/2]\n  - [w1, 1/2]")
        with pytest.raises(SpecError, match="single atom"):
            parse_market_file(text)


class TestGrids:
    def test_dyadic_times(self):
        text = "atoms: [[a, 1]]\ntimes: {dyadic: 3, T: 2}\nfiltration: trivial\n" \
               "generators: [{name: X, rows: [[1, 1, 1, 1, 1, 1, 1, 1, 1]]}]\n"
        doc = parse_market_file(text)
        assert doc.market.times[1] == Fraction(1, 4)
        assert doc.market.times[-1] == 2


class TestMatrixFile:
    def test_bare_rows(self, tmp_path):
        p = tmp_path / "z.yaml"
        p.write_text("- [1, 1/2, 1]\n- [1, 1, 1]\n")
        np.testing.assert_array_equal(load_matrix_file(p), [[1, 0.5, 1], [1, 1, 1]])

    def test_mapping(self, tmp_path):
        p = tmp_path / "z.json"
        p.write_text('{"z": [[1, 0.5], [1, 1]]}')
        np.testing.assert_array_equal(load_matrix_file(p), [[1, 0.5], [1, 1]])
