from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from market_factory import random_market
from nonumeraire import (Filtration, InputError, Market, SampleSpace, StageError, adapt_deflator,
                         build_discrete_deflator, example_2_8_market, make_deflator,
                         make_wealth_process, market_crash_time, nupbr_check, verify_deflator)
from nonumeraire.deflator import crash_measures, ratio_table
from nonumeraire.market import INF, hull_exhaustive
from oracles import discrete_supermartingale_ratio

RATIO_TOL = 1e-8
ATOL = 1e-12

# hand computation for M1: under Q_2 = delta_{w0} the time-1 static deflator is 2
M1_Z = np.array([[1.0, 0.5, 1.0], [1.0, 1.0, 1.0]])


def m1():
    space = SampleSpace(("w0", "w1"), np.array([0.5, 0.5]))
    filt = Filtration((0, 1, 2), ([[0, 1]], [[0], [1]], [[0], [1]]))
    return Market(space, filt, (make_wealth_process("X", [[1, 2, 0], [1, 0, 0]]),), name="M1")


class TestM1:
    def test_crash_time(self):
        tau, static = market_crash_time(m1())
        assert tau.times == (Fraction(2), Fraction(1))
        np.testing.assert_allclose(static[1].f_hat, [2.0, 0.0])

    def test_deflator_values(self):
        res = build_discrete_deflator(m1())
        np.testing.assert_allclose(res.z.values, M1_Z, atol=ATOL)
        assert res.passed
        assert res.report.max_ratio <= 1 + 1e-9

    def test_adapted_projection(self):
        res = build_discrete_deflator(m1())
        np.testing.assert_allclose(res.z_adapted.values, M1_Z, atol=ATOL)
        assert res.report_adapted.passed

    def test_ratio_under_each_measure(self):
        res = build_discrete_deflator(m1())
        by = res.report.max_by_measure()
        assert set(by) == {"P", "Q[tau=1]", "Q[tau=2]"}
        assert by["Q[tau=2]"] == pytest.approx(1.0)
        assert by["P"] == pytest.approx(0.5)


class TestVerifier:
    def test_passes_under_p_only(self):
        # under P the dead atom averages the ratio down to 0.5 * 1.8
        m = m1()
        z = make_deflator([[1.0, 0.9, 1.0], [1.0, 1.0, 1.0]], m)
        rep = verify_deflator(m, z, [m.space.measure()])
        assert rep.verdict == "pass"
        assert rep.max_ratio == pytest.approx(0.9)

    def test_rejects_too_large_deflator(self):
        m = m1()
        z = make_deflator([[1.0, 1.2, 1.0], [1.0, 1.0, 1.0]], m)
        rep = verify_deflator(m, z, [m.space.measure()])
        assert rep.verdict == "fail"
        assert rep.max_ratio == pytest.approx(0.5 * 2 * 1.2)

    def test_rejects_under_conditional_measure(self):
        m = m1()
        tau, _ = market_crash_time(m)
        z = make_deflator([[1.0, 0.9, 1.0], [1.0, 1.0, 1.0]], m)
        rep = verify_deflator(m, z, [("P", m.space.measure())] + crash_measures(m, tau))
        assert rep.max_by_measure()["Q[tau=2]"] == pytest.approx(1.8)
        assert not rep.passed

    def test_z0_above_one_fails(self):
        m = m1()
        z = make_deflator([[1.5, 0.5, 1.0], [1.5, 1.0, 1.0]], m)
        assert not verify_deflator(m, z, [m.space.measure()]).z0_ok

    def test_nonpositive_deflator_rejected(self):
        with pytest.raises(InputError):
            make_deflator([[1.0, 0.0]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            m = random_market(rng)
            z = rng.uniform(0.2, 1.0, (m.n_atoms, m.filtration.n_times))
            p = m.space.probs
            rep = verify_deflator(m, z, [m.space.measure()])
            want = max(discrete_supermartingale_ratio(g.values, z, m.filtration.partitions, p)
                       for g in m.generators)
            assert rep.max_ratio == pytest.approx(want, rel=1e-12, abs=1e-14)

    def test_ratio_table_skips_null_blocks(self):
        m = m1()
        q = np.array([1.0, 0.0])
        s, t, pr, bl, r = ratio_table(m.members(1), M1_Z, m.filtration, q)
        # at s = 1 only the block {w0} is charged
        assert set(bl[s == 1]) == {0}


class TestRandomMarkets:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_deflator_property(self, seed):
        m = random_market(np.random.default_rng(seed))
        res = build_discrete_deflator(m)
        z = res.z.values
        assert np.all(z > 0) and np.all(z[:, 0] <= 1 + 1e-12)
        assert res.report.max_ratio <= 1 + RATIO_TOL
        if m.adapted_flag:
            assert res.report_adapted.max_ratio <= 1 + RATIO_TOL
            assert res.z_adapted.adapted

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_loop_oracle_agrees_on_constructed_z(self, seed):
        m = random_market(np.random.default_rng(seed))
        res = build_discrete_deflator(m)
        for name, q in res.measures:
            if q.is_null:
                continue
            for g in m.generators:
                r = discrete_supermartingale_ratio(g.values, res.z.values, m.filtration.partitions, q.weights)
                assert r <= 1 + RATIO_TOL

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_hull_samples_pass(self, seed):
        m = random_market(np.random.default_rng(seed))
        res = build_discrete_deflator(m, hull_samples=30, seed=seed)
        assert res.report.max_ratio <= 1 + RATIO_TOL

    def test_exhaustive_hull_on_tiny_market(self):
        m = m1()
        res = build_discrete_deflator(m)
        hull = hull_exhaustive(m, rounds=2)
        rep = verify_deflator(m, res.z, [q for _, q in res.measures], extra=hull)
        assert rep.max_ratio <= 1 + RATIO_TOL

    def test_crash_time_kills_everything(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            m = random_market(rng)
            tau, _ = market_crash_time(m)
            members = m.members(256)
            for a, t in enumerate(tau.times):
                if t != INF:
                    i = m.filtration.time_index(t)
                    assert np.all(members[:, a, i:] == 0)


class TestAdaptedProjection:
    def test_requires_adapted_market(self):
        space = SampleSpace.uniform(2)
        filt = Filtration((0, 1), ([[0, 1]], [[0, 1]]))
        m = Market(space, filt, (make_wealth_process("X", [[1, 2], [1, 0]]),))
        res = build_discrete_deflator(m)
        assert res.z_adapted is None
        with pytest.raises(InputError):
            adapt_deflator(res.z, m)


class TestNUPBR:
    def test_example_refused_with_pointer(self):
        m = example_2_8_market()
        with pytest.raises(StageError) as info:
            build_discrete_deflator(m, n_cap=1000)
        assert info.value.kind == "precondition"
        assert info.value.stage == "nupbr"
        assert info.value.time > 0

    def test_finite_market_always_bounded(self):
        diags = nupbr_check(m1())
        assert all(d.verdict == "bounded" for _, d in diags)
