from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from market_factory import random_market
from nonumeraire import (Filtration, InputError, Market, SampleSpace, convex_combine,
                         example_2_8_market, find_generalized_numeraire, fork_combine,
                         hull_exhaustive, hull_sample, make_wealth_process, process_crash_time,
                         value_set)
from nonumeraire.market import INF, example_2_8_value, is_adapted

ATOL = 1e-12


def two_atom_market():
    space = SampleSpace(("w0", "w1"), np.array([0.5, 0.5]))
    filt = Filtration((0, 1, 2), ([[0, 1]], [[0], [1]], [[0], [1]]))
    x = make_wealth_process("X", [[1, 2, 0], [1, 0, 0]])
    y = make_wealth_process("Y", [[1, 1, 1], [1, 3, 3]])
    return Market(space, filt, (x, y))


def _is_absorbed(values):
    dead = np.logical_or.accumulate(values == 0, axis=1)
    return not np.any(dead[:, :-1] & (values[:, 1:] > 0))


class TestWealthProcess:
    def test_rejects_rebound(self):
        with pytest.raises(InputError, match="rebound"):
            make_wealth_process("X", [[1, 0, 1]])

    def test_rejects_initial_value(self):
        with pytest.raises(InputError, match="initial value"):
            make_wealth_process("X", [[2, 1]])

    def test_rejects_negative(self):
        with pytest.raises(InputError, match="negative"):
            make_wealth_process("X", [[1, -1]])

    def test_values_are_read_only(self):
        x = make_wealth_process("X", [[1, 2]])
        with pytest.raises(ValueError):
            x.values[0, 1] = 5.0


class TestMarket:
    def test_shape_checks(self):
        space = SampleSpace.uniform(2)
        filt = Filtration.discrete([0, 1], 2)
        with pytest.raises(InputError):
            Market(space, filt, (make_wealth_process("X", [[1, 1, 1], [1, 1, 1]]),))

    def test_adapted_flag(self):
        assert two_atom_market().adapted_flag
        space = SampleSpace.uniform(2)
        filt = Filtration((0, 1), ([[0, 1]], [[0, 1]]))
        m = Market(space, filt, (make_wealth_process("X", [[1, 2], [1, 0]]),))
        assert not m.adapted_flag

    def test_is_adapted_on_discrete_filtration(self):
        f = Filtration.discrete([0, 1], 2)
        assert is_adapted(np.array([[1.0, 2.0], [1.0, 0.5]]), f)

    def test_value_set(self):
        vs = value_set(two_atom_market(), 1)
        assert len(vs) == 2
        np.testing.assert_array_equal(vs[0], [2.0, 0.0])


class TestCombinators:
    def test_fork_switches_on_event(self):
        m = two_atom_market()
        x, y = m.generators
        z = fork_combine(y, x, y, 1, [0], m.filtration)
        # on w0 hold Y up to time 1 (value 1) then switch into X: 1 * 0/2 = 0
        np.testing.assert_allclose(z.values, [[1, 1, 0], [1, 3, 3]], atol=ATOL)

    def test_fork_into_dead_asset_keeps_position(self):
        m = two_atom_market()
        x, y = m.generators
        z = fork_combine(y, x, x, 1, [0, 1], m.filtration)
        # X is dead on w1 at time 1, so w1 stays in Y
        np.testing.assert_allclose(z.values[1], [1, 3, 3], atol=ATOL)

    def test_fork_rejects_unmeasurable_event(self):
        m = two_atom_market()
        x, y = m.generators
        with pytest.raises(InputError, match="not measurable"):
            fork_combine(x, y, x, 0, [0], m.filtration)

    def test_convex_combination(self):
        m = two_atom_market()
        x, y = m.generators
        c = convex_combine(0.25, x, y)
        np.testing.assert_allclose(c.values, 0.25 * x.values + 0.75 * y.values)

    def test_convex_weight_range(self):
        x, y = two_atom_market().generators
        with pytest.raises(InputError):
            convex_combine(1.5, x, y)

    def test_exhaustive_hull_contains_generators(self):
        m = two_atom_market()
        hull = hull_exhaustive(m, rounds=1)
        keys = {np.round(h.values, 12).tobytes() for h in hull}
        for g in m.generators:
            assert np.round(g.values, 12).tobytes() in keys
        assert len(hull) > 2

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_hull_samples_are_wealth_processes(self, seed):
        m = random_market(np.random.default_rng(seed))
        for h in hull_sample(m, 3, seed, count=5):
            assert np.all(h.values >= 0)
            np.testing.assert_allclose(h.values[:, 0], 1.0)
            assert _is_absorbed(h.values)

    def test_hull_sample_deterministic(self):
        m = random_market(np.random.default_rng(3))
        a = hull_sample(m, 3, 11, count=8)
        b = hull_sample(m, 3, 11, count=8)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u.values, v.values)


class TestCrashTime:
    def test_debut_at_zero(self):
        prof = process_crash_time(np.array([[1, 2, 0], [1, 0, 0], [1, 1, 1]]), (0, 1, 2),
                                  np.full(3, 1 / 3))
        assert prof.times == (Fraction(2), Fraction(1), INF)

    def test_distribution_and_charged(self):
        prof = process_crash_time(np.array([[1, 0], [1, 0], [1, 1]]), (0, 1), np.array([0.2, 0.3, 0.5]))
        assert prof.distribution[Fraction(1)] == pytest.approx(0.5)
        assert prof.distribution[INF] == pytest.approx(0.5)
        assert prof.charged() == [Fraction(1), INF]
        np.testing.assert_array_equal(prof.in_interval(0, 1), [True, True, False])


class TestGeneralizedNumeraire:
    def test_surviving_generator_found(self):
        m = two_atom_market()
        cert = find_generalized_numeraire(m)
        assert cert.index == 1

    def test_none_when_each_dies_alone(self):
        space = SampleSpace.uniform(2)
        filt = Filtration.discrete([0, 1], 2)
        x = make_wealth_process("X", [[1, 0], [1, 1]])
        y = make_wealth_process("Y", [[1, 1], [1, 0]])
        cert = find_generalized_numeraire(Market(space, filt, (x, y)))
        assert cert.index is None and cert.counterexample is not None


class TestExampleFamily:
    def test_peak_value_at_half(self):
        for n in (1, 2, 17, 1000):
            assert example_2_8_value(n, Fraction(1, 2)) == n

    def test_terminal_value_zero(self):
        assert example_2_8_value(5, Fraction(1)) == 0.0

    def test_market_values(self):
        m = example_2_8_market()
        stack = m.members(1000)
        assert stack.shape == (1000, 1, 101)
        np.testing.assert_array_equal(stack[:, 0, 50], np.arange(1, 1001))
        assert np.all(stack[:, 0, -1] == 0)
        assert np.all(stack[:, 0, 0] == 1)
