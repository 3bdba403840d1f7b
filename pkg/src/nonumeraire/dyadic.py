"""Dyadic-grid constructions: level deflators Z^k, their forward-convex limit,
uniform-boundedness tables, the independent-clock deflator and the
numéraire regularization.

A market on the dyadic grid D_L of [0, T] is its "native" grid. Levels
k > L see the market as a piecewise-constant process, so every level
deflator is computed on the native grid and restricted to D_k.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .deflator import (DEFAULT_M_SCHEDULE, DEFAULT_N_CAP, DeflatorProcess, HullNumeraire,
                       VerificationReport, make_deflator, market_crash_time, verify_deflator)
from .errors import InputError, StageError
from .market import INF, CrashTimeProfile, Market, WealthProcess
from .prob import (DEFAULT_TOL, BoundednessDiagnostic, Measure, boundedness_diagnostic,
                   condition_on_event, conditional_expectation, measurable_version)

DEFAULT_MAX_LEVEL = 8
DEFAULT_CHECK_LEVEL = 6
DEFAULT_LIMIT_TOL = 1e-6
INDEPENDENCE_TOL = 1e-12
UNIFORM_EVIDENCE = 1e-3


@dataclass(frozen=True)
class DyadicGrid:
    k: int
    T: Fraction
    points: tuple[Fraction, ...]
    parent: tuple[int, ...]  # index in this grid of every point of D_{k-1}

    def __contains__(self, t) -> bool:
        t = Fraction(t)
        return 0 <= t <= self.T and (t * 2**self.k / self.T).denominator == 1


def dyadic_grid(k: int, T=1) -> DyadicGrid:
    if k < 0:
        raise InputError("level must be nonnegative")
    T = Fraction(T)
    pts = tuple(Fraction(i, 2**k) * T for i in range(2**k + 1))
    parent = tuple(range(0, 2**k + 1, 2)) if k > 0 else ()
    return DyadicGrid(k, T, pts, parent)


def first_level(t, T=1) -> int:
    """Smallest k with t in D_k."""
    x = Fraction(t) / Fraction(T)
    return max(x.denominator.bit_length() - 1, 0)


def native_level(market: Market) -> int:
    times = market.filtration.times
    n = len(times) - 1
    L = n.bit_length() - 1
    if n < 1 or 2**L != n or times[0] != 0:
        raise InputError("market grid is not a dyadic grid D_L of [0, T]")
    T = times[-1]
    if any(t != Fraction(i, n) * T for i, t in enumerate(times)):
        raise InputError("market grid is not a dyadic grid D_L of [0, T]")
    return L


def level_conditional(p: Measure, tau: CrashTimeProfile, k: int, r, T=1,
                      restrict: np.ndarray | None = None) -> Measure:
    """Q^k_r = P[. | tau in (r, r + T/2^k]] (null measure when uncharged)."""
    r, T = Fraction(r), Fraction(T)
    if r >= T or r < 0:
        raise InputError("r must lie in D_k without T")
    event = tau.in_interval(r, r + T / 2**k)
    if restrict is not None:
        event = event & restrict
    return condition_on_event(p, event)


def interval_groups(tau: CrashTimeProfile, k: int, T, restrict: np.ndarray | None = None,
                    probs: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Map i -> atoms with crash time in (iT/2^k, (i+1)T/2^k], charged intervals only."""
    T = Fraction(T)
    groups: dict[int, list[int]] = {}
    for a, t in enumerate(tau.times):
        if t == INF or (restrict is not None and not restrict[a]):
            continue
        if probs is not None and probs[a] <= 0:
            continue
        x = t * 2**k / T
        i = math.ceil(x) - 1
        if i < 0:
            continue
        groups.setdefault(i, []).append(a)
    return {i: np.array(v) for i, v in sorted(groups.items())}


def _charged_conditionals(p: Measure, tau, k, T, restrict=None):
    """(r, Q^k_r) for the charged intervals of level k, in increasing r."""
    delta = Fraction(T) / 2**k
    out = []
    for i, atoms in interval_groups(tau, k, T, restrict, p.weights).items():
        mask = np.zeros(len(p.weights), dtype=bool)
        mask[atoms] = True
        out.append((delta * i, condition_on_event(p, mask)))
    return out


# --------------------------------------------------------------------------
# level deflators


@dataclass(frozen=True, eq=False)
class LevelDeflator:
    k: int
    indices: tuple[int, ...]  # native time indices of D_k
    z: DeflatorProcess
    z_native: np.ndarray
    conditionals: dict
    locals: dict  # r -> f̂^{(k,r)} on the native grid (zero from the first s > r)
    report: VerificationReport | None = None

    def column(self, t_index: int) -> np.ndarray:
        if t_index not in self.indices:
            raise InputError(f"native time index {t_index} is not in D_{self.k}")
        return self.z_native[:, t_index]


class DyadicContext:
    """Per-market data shared by every level build."""

    def __init__(self, market: Market, tau: CrashTimeProfile | None = None,
                 n_cap: int = DEFAULT_N_CAP, tol: float = DEFAULT_TOL):
        self.market = market
        self.L = native_level(market)
        self.T = market.filtration.horizon
        self.n_cap = n_cap
        self.tol = tol
        self.tau = tau if tau is not None else market_crash_time(market, n_cap, tol)[0]
        self.hull = HullNumeraire(market, n_cap, tol)
        self.p = market.space.measure()
        self._restricted: dict = {}

    def native_indices(self, k: int) -> tuple[int, ...]:
        step = 2 ** max(self.L - k, 0)
        return tuple(range(0, 2**self.L + 1, step))

    def floor_index(self, r: Fraction) -> int:
        return int(math.floor(r * 2**self.L / self.T))

    def restricted(self, k: int) -> Market:
        if k not in self._restricted:
            idx = self.native_indices(k)
            self._restricted[k] = self.market if len(idx) == self.market.filtration.n_times \
                else self.market.restrict_times(idx)
        return self._restricted[k]


def build_level_deflator(ctx: DyadicContext, k: int, check: bool | None = None,
                         tol: float | None = None, hull_samples: int = 0, seed: int = 0,
                         tau: CrashTimeProfile | None = None) -> LevelDeflator:
    """Z^k pasted from Y^{(k,r)} over the charged dyadic intervals of level k."""
    tau = tau if tau is not None else ctx.tau
    tol = ctx.tol if tol is None else tol
    if check is None:
        check = k <= DEFAULT_CHECK_LEVEL
    n_atoms, n_t = ctx.market.n_atoms, ctx.market.filtration.n_times
    delta = ctx.T / 2**k
    z = np.ones((n_atoms, n_t))
    conditionals, locals_ = {}, {}
    for r, q in _charged_conditionals(ctx.p, tau, k, ctx.T):
        conditionals[r] = q
        upto = ctx.floor_index(r)
        nv = ctx.hull.portfolio(q, upto)
        supp = q.weights > 0
        f_hat = np.zeros((n_atoms, n_t))
        f_hat[:, : upto + 1] = nv[:, : upto + 1]
        bad = supp[:, None] & ~(f_hat[:, : upto + 1] > 0)
        if bad.any():
            a, s = map(int, np.argwhere(bad)[0])
            raise StageError("level_deflator",
                             f"local positivity fails at k={k}, r={r}, s={ctx.market.times[s]} (atom {a})")
        locals_[r] = f_hat
        rows = np.flatnonzero(supp)
        z[np.ix_(rows, range(upto + 1))] = 1.0 / f_hat[np.ix_(rows, range(upto + 1))]
    never = np.array([t == INF for t in tau.times]) & (ctx.p.weights > 0)
    if never.any():
        q_inf = condition_on_event(ctx.p, never)
        conditionals[INF] = q_inf
        nv = ctx.hull.portfolio(q_inf)
        if np.any(nv[never] <= 0):
            raise StageError("level_deflator", f"local positivity fails at k={k} on {{tau = inf}}")
        locals_[INF] = nv
        z[never] = 1.0 / nv[never]
    idx = ctx.native_indices(k)
    sub = ctx.restricted(k)
    zk = make_deflator(z[:, idx], sub)
    report = None
    if check:
        measures = [("P", ctx.p)] + [(f"Q^{k}_{r}", q) for r, q in conditionals.items() if r != INF]
        report = verify_deflator(sub, zk, measures, hull_samples, tol, seed, ctx.n_cap)
    return LevelDeflator(k, idx, zk, z, conditionals, locals_, report)


def default_limit_depth(L: int, max_level: int = DEFAULT_MAX_LEVEL) -> int:
    return max(max_level, 2 * L + 2)


# --------------------------------------------------------------------------
# forward convex limits


@dataclass(frozen=True)
class ForwardConvexSchedule:
    mode: str = "cesaro_tail"
    tol: float = DEFAULT_LIMIT_TOL
    m_schedule: tuple = DEFAULT_M_SCHEDULE

    def __post_init__(self):
        if self.mode not in ("cesaro_tail", "komlos_subsequence"):
            raise InputError(f"unknown schedule mode {self.mode}")


@dataclass(frozen=True, eq=False)
class ForwardLimit:
    values: np.ndarray
    gaps: tuple[float, ...]
    converged: bool
    weights: dict  # final K -> {k: lambda}
    reciprocal: BoundednessDiagnostic | None


def cesaro_weights(ks: Sequence[int], K: int) -> dict[int, float]:
    m = max(1, math.ceil(K / 2))
    tail = [k for k in ks if K - m + 1 <= k <= K]
    return {k: 1.0 / len(tail) for k in tail}


def _sequence(levels, t_index):
    out = {}
    for lv in levels:
        if hasattr(lv, "column"):
            if t_index in lv.indices:
                out[lv.k] = lv.column(t_index)
        else:
            k, vals = lv
            out[k] = np.asarray(vals, dtype=float)
    return out


def forward_convex_limit(levels: Sequence, t_index: int,
                         schedule: ForwardConvexSchedule = ForwardConvexSchedule(),
                         q: Measure | None = None) -> ForwardLimit:
    """Forward convex combination of Z^k at one native time index.

    ``levels`` holds LevelDeflator objects or (k, values) pairs.
    """
    seq = _sequence(levels, t_index)
    if len(seq) < 2:
        raise InputError("forward_convex_limit needs at least two levels")
    ks = sorted(seq)
    if schedule.mode == "cesaro_tail":
        averages, weights = [], {}
        for K in ks[1:]:
            w = cesaro_weights(ks, K)
            averages.append(sum(lam * seq[k] for k, lam in w.items()))
            weights[K] = w
        gaps = [float(np.max(np.abs(b - a))) for a, b in zip(averages, averages[1:])]
        values = averages[-1]
        final = {ks[-1]: weights[ks[-1]]}
    else:
        chosen = [seq[ks[0]]]
        final = {}
        for j in range(1, len(ks)):
            cands = [(np.mean([seq[k] for k in ks[j:j + w + 1]], axis=0), w) for w in range(len(ks) - j)]
            best, w = min(cands, key=lambda c: float(np.max(np.abs(c[0] - chosen[-1]))))
            chosen.append(best)
            final = {ks[-1]: {k: 1.0 / (w + 1) for k in ks[j:j + w + 1]}}
        gaps = [float(np.max(np.abs(b - a))) for a, b in zip(chosen, chosen[1:])]
        values = chosen[-1]
    tail_gaps = tuple(gaps[-3:])
    converged = len(tail_gaps) > 0 and all(g < schedule.tol for g in tail_gaps)
    recip = None
    if q is not None:
        fam = [1.0 / seq[k] for k in ks]
        fam.append(np.mean(fam, axis=0))
        recip = boundedness_diagnostic(fam, q, schedule.m_schedule)
    return ForwardLimit(np.asarray(values, dtype=float), tail_gaps, converged, final, recip)


# --------------------------------------------------------------------------
# boundedness tables


@dataclass(frozen=True, eq=False)
class BoundednessTable:
    m_schedule: tuple[float, ...]
    rows: list  # (t, k, r, u, charged, sups per M or None)
    summary: dict  # t -> sup over charged rows per M
    verdicts: dict  # t -> bool

    @property
    def charged_rows(self):
        return [r for r in self.rows if r[4]]

    @property
    def null_rows(self) -> int:
        return sum(1 for r in self.rows if not r[4])


def _table_times(ctx: DyadicContext, table_level: int) -> list[int]:
    return list(ctx.native_indices(min(table_level, ctx.L)))


def _interval_measures(ctx: DyadicContext, tau, K: int, t: Fraction, restrict):
    """Every (k, r, u, Q^k_r) with r >= t up to level K; uncharged ones are null."""
    null = Measure.null(ctx.market.n_atoms)
    for k in range(K + 1):
        delta = ctx.T / 2**k
        charged = dict(_charged_conditionals(ctx.p, tau, k, ctx.T, restrict))
        first = math.ceil(t / delta)
        for i in range(first, 2**k):
            r = delta * i
            yield k, r, r + delta, charged.get(r, null)


def _tail_sups(values: np.ndarray, q: np.ndarray, ms) -> tuple[float, ...]:
    """values: (member, atom). For each M, sup over members of q[X >= M]."""
    return tuple(float(((values >= m) * q).sum(axis=1).max()) for m in ms)


def _finish_table(ms, rows) -> BoundednessTable:
    summary, verdicts = {}, {}
    for t, k, r, u, charged, sups in rows:
        if not charged:
            continue
        cur = summary.setdefault(t, [0.0] * len(ms))
        summary[t] = [max(a, b) for a, b in zip(cur, sups)]
    for t, sups in summary.items():
        verdicts[t] = bool(sups[-1] < UNIFORM_EVIDENCE and all(b <= a for a, b in zip(sups, sups[1:])))
    return BoundednessTable(tuple(ms), rows, {t: tuple(v) for t, v in summary.items()}, verdicts)


def atom_floor_mask(tau: CrashTimeProfile, atom_floor: float | None) -> np.ndarray | None:
    """Atoms whose crash time is 'diffuse' (mass below the floor)."""
    if atom_floor is None:
        return None
    dist = tau.distribution
    return np.array([t != INF and dist[t] < atom_floor for t in tau.times])


def uniform_boundedness_diag(ctx: DyadicContext, K: int = DEFAULT_MAX_LEVEL,
                             m_schedule: Sequence[float] = DEFAULT_M_SCHEDULE,
                             table_level: int = 3, extra: Sequence = (),
                             atom_floor: float | None = None,
                             tau: CrashTimeProfile | None = None) -> BoundednessTable:
    tau = tau if tau is not None else ctx.tau
    ms = tuple(float(m) for m in m_schedule)
    members = ctx.market.members(ctx.n_cap)
    if len(extra):
        members = np.concatenate([members, np.array([getattr(x, "values", x) for x in extra])])
    restrict = atom_floor_mask(tau, atom_floor)
    rows = []
    for ti in _table_times(ctx, table_level):
        t = ctx.market.times[ti]
        vals = members[:, :, ti]
        for k, r, u, q in _interval_measures(ctx, tau, K, t, restrict):
            if q.is_null:
                rows.append((t, k, r, u, False, None))
            else:
                rows.append((t, k, r, u, True, _tail_sups(vals, q.weights, ms)))
    return _finish_table(ms, rows)


def deflator_bound_diag(ctx: DyadicContext, z_inf: np.ndarray, K: int = DEFAULT_MAX_LEVEL,
                        m_schedule: Sequence[float] = DEFAULT_M_SCHEDULE, table_level: int = 3,
                        atom_floor: float | None = None,
                        tau: CrashTimeProfile | None = None) -> BoundednessTable:
    """Same table over 1/Z^∞_t; ``z_inf`` is given on the native grid."""
    tau = tau if tau is not None else ctx.tau
    z_inf = np.asarray(z_inf, dtype=float)
    if np.any(z_inf <= 0):
        raise InputError("Z^inf must be strictly positive")
    ms = tuple(float(m) for m in m_schedule)
    restrict = atom_floor_mask(tau, atom_floor)
    rows = []
    for ti in _table_times(ctx, table_level):
        t = ctx.market.times[ti]
        recip = (1.0 / z_inf[:, ti])[None, :]
        for k, r, u, q in _interval_measures(ctx, tau, K, t, restrict):
            if q.is_null:
                rows.append((t, k, r, u, False, None))
            else:
                rows.append((t, k, r, u, True, _tail_sups(recip, q.weights, ms)))
    return _finish_table(ms, rows)


def markov_chain_check(ctx: DyadicContext, table: BoundednessTable, z_inf: np.ndarray,
                       atom_floor: float | None = None, tau: CrashTimeProfile | None = None,
                       slack: float = 1e-12) -> list[tuple]:
    """Check Q[X_t >= M] <= 1/sqrt(M) + Q[1/Z_t >= sqrt(M)] on every charged row.

    Returns (t, k, r, M, lhs, rhs, ok) per charged row and threshold.
    """
    tau = tau if tau is not None else ctx.tau
    restrict = atom_floor_mask(tau, atom_floor)
    out = []
    for t, k, r, u, charged, sups in table.rows:
        if not charged:
            continue
        ti = ctx.market.filtration.time_index(t)
        q = level_conditional(ctx.p, tau, k, r, ctx.T, restrict)
        recip = 1.0 / z_inf[:, ti]
        for m, lhs in zip(table.m_schedule, sups):
            rhs = 1.0 / math.sqrt(m) + float(q.weights[recip >= math.sqrt(m)].sum())
            out.append((t, k, r, m, lhs, rhs, lhs <= rhs + slack))
    return out


# --------------------------------------------------------------------------
# the full dyadic pipeline


@dataclass(frozen=True, eq=False)
class GSPCheck:
    s: Fraction
    t: Fraction
    measure: str
    process: str
    ratio: float


@dataclass(frozen=True, eq=False)
class DyadicResult:
    levels: list
    limit_depth: int
    z_inf: DeflatorProcess
    limits: dict  # native index -> ForwardLimit
    converged: bool
    max_gap: float
    gsp: list
    gsp_max: float
    uniform: BoundednessTable
    deflator_table: BoundednessTable
    markov: list
    tol: float
    limit_tol: float

    @property
    def level_max_ratio(self) -> dict:
        return {lv.k: lv.report.max_ratio for lv in self.levels if lv.report is not None}

    @property
    def levels_pass(self) -> bool:
        return all(lv.report.passed for lv in self.levels if lv.report is not None)

    @property
    def gsp_pass(self) -> bool:
        return self.gsp_max <= 1 + self.limit_tol

    @property
    def markov_pass(self) -> bool:
        return all(row[-1] for row in self.markov)

    @property
    def passed(self) -> bool:
        return self.levels_pass and self.converged and self.gsp_pass and self.markov_pass


def gsp_checks(ctx: DyadicContext, z_inf: np.ndarray, grid_level: int = 3,
               max_level: int = DEFAULT_MAX_LEVEL, extra: Sequence = (),
               tau: CrashTimeProfile | None = None) -> list[GSPCheck]:
    """Unconditional ratios E_Q[X_t Z_t / (X_s Z_s)] on D_{grid_level} pairs.

    Q runs over P and every charged Q^{k0}_q with q > t, for levels k0 from
    the first level containing t up to ``max_level``.
    """
    tau = tau if tau is not None else ctx.tau
    members = ctx.market.members(ctx.n_cap)
    names = ctx.market.member_names(ctx.n_cap)
    if len(extra):
        members = np.concatenate([members, np.array([getattr(x, "values", x) for x in extra])])
        names = names + [getattr(x, "name", f"extra{i}") for i, x in enumerate(extra)]
    v = members * z_inf[None]
    idx = ctx.native_indices(min(grid_level, ctx.L))
    conditionals = {k: _charged_conditionals(ctx.p, tau, k, ctx.T) for k in range(max_level + 1)}
    out = []
    for a, si in enumerate(idx):
        for ti in idx[a + 1:]:
            s, t = ctx.market.times[si], ctx.market.times[ti]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(v[:, :, si] > 0, v[:, :, ti] / v[:, :, si], 0.0)
            measures = [("P", ctx.p)]
            k_t = first_level(t, ctx.T)
            for k0 in range(k_t, max_level + 1):
                measures += [(f"Q^{k0}_{r}", q) for r, q in conditionals[k0] if r > t]
            for name, q in measures:
                vals = ratio @ q.weights
                j = int(np.argmax(vals))
                out.append(GSPCheck(s, t, name, names[j], float(vals[j])))
    return out


def run_dyadic(market: Market, tau: CrashTimeProfile | None = None, max_level: int = DEFAULT_MAX_LEVEL,
               check_level: int = DEFAULT_CHECK_LEVEL, tol: float = DEFAULT_TOL,
               limit_tol: float = DEFAULT_LIMIT_TOL,
               m_schedule: Sequence[float] = DEFAULT_M_SCHEDULE, n_cap: int = DEFAULT_N_CAP,
               limit_depth: int | None = None, gsp_level: int = 3, hull_samples: int = 0,
               seed: int = 0, atom_floor: float | None = None,
               schedule_mode: str = "cesaro_tail") -> DyadicResult:
    ctx = DyadicContext(market, tau, n_cap, tol)
    depth = default_limit_depth(ctx.L, max_level) if limit_depth is None else limit_depth
    levels = [build_level_deflator(ctx, k, check=k <= check_level, hull_samples=hull_samples, seed=seed)
              for k in range(depth + 1)]
    schedule = ForwardConvexSchedule(schedule_mode, limit_tol, tuple(m_schedule))
    n_t = market.filtration.n_times
    limits = {}
    cols = []
    for ti in range(n_t):
        lim = forward_convex_limit(levels, ti, schedule, q=ctx.p if ti in ctx.native_indices(gsp_level) else None)
        limits[ti] = lim
        cols.append(lim.values)
    z_inf_vals = np.column_stack(cols)
    z_inf = make_deflator(z_inf_vals, market)
    gaps = [g for lim in limits.values() for g in lim.gaps]
    converged = all(lim.converged for lim in limits.values())
    extra = ()
    if hull_samples:
        from .market import hull_sample
        extra = hull_sample(market, 3, seed, count=hull_samples, n_cap=n_cap)
    gsp = gsp_checks(ctx, z_inf_vals, gsp_level, max_level, extra)
    uniform = uniform_boundedness_diag(ctx, max_level, m_schedule, gsp_level, extra, atom_floor)
    dtable = deflator_bound_diag(ctx, z_inf_vals, max_level, m_schedule, gsp_level, atom_floor)
    markov = markov_chain_check(ctx, uniform, z_inf_vals, atom_floor)
    return DyadicResult(levels, depth, z_inf, limits, converged, max(gaps) if gaps else 0.0, gsp,
                        max(g.ratio for g in gsp) if gsp else 0.0, uniform, dtable, markov,
                        tol, limit_tol)


# --------------------------------------------------------------------------
# independent clock


@dataclass(frozen=True, eq=False)
class ClockResult:
    z: DeflatorProcess
    report: VerificationReport
    jensen: list  # (k, t, max violation lhs - rhs, ok)
    levels: list
    limits: dict
    converged: bool

    @property
    def jensen_ok(self) -> bool:
        return all(row[-1] for row in self.jensen)

    @property
    def passed(self) -> bool:
        return self.report.passed and self.jensen_ok


def check_clock_independence(market: Market, clock: CrashTimeProfile,
                             tol: float = INDEPENDENCE_TOL) -> tuple | None:
    """First grid pair (s, t) whose interval event is dependent on F_s, else None."""
    p = market.space.probs
    times = market.filtration.times
    for si, s in enumerate(times):
        ind = market.filtration.indicator(si)
        pb = ind @ p
        for t in times[si + 1:]:
            ev = clock.in_interval(s, t).astype(float)
            pe = float(ev @ p)
            joint = ind @ (p * ev)
            if np.any(np.abs(joint - pe * pb) > tol):
                return (s, t)
    return None


def check_clock_condition(market: Market, clock: CrashTimeProfile, n_cap: int = DEFAULT_N_CAP
                          ) -> tuple | None:
    """Survival condition: on {clock in (s,t]} some member is alive at s and all vanish after t."""
    members = market.members(n_cap)
    times = market.filtration.times
    p = market.space.probs
    for si, s in enumerate(times):
        for ti in range(si + 1, len(times)):
            ev = clock.in_interval(s, times[ti]) & (p > 0)
            if not ev.any():
                continue
            if not np.all((members[:, ev, si] > 0).any(axis=0)):
                return (s, times[ti])
            if ti + 1 < len(times) and np.any(members[:, ev, ti + 1:] != 0):
                return (s, times[ti])
    return None


def independent_clock_deflator(market: Market, clock: CrashTimeProfile, K: int = 4,
                               tol: float = DEFAULT_TOL, n_cap: int = DEFAULT_N_CAP,
                               limit_tol: float = DEFAULT_LIMIT_TOL, limit_depth: int | None = None,
                               hull_samples: int = 0, seed: int = 0) -> ClockResult:
    pair = check_clock_independence(market, clock)
    if pair is not None:
        raise StageError("clock", f"clock interval ({pair[0]}, {pair[1]}] is not independent of F_{pair[0]}")
    pair = check_clock_condition(market, clock, n_cap)
    if pair is not None:
        raise StageError("clock", f"survival condition fails on the interval ({pair[0]}, {pair[1]}]")
    ctx = DyadicContext(market, clock, n_cap, tol)
    depth = max(K, default_limit_depth(ctx.L, K)) if limit_depth is None else limit_depth
    f = market.filtration
    p = ctx.p
    levels, projected, jensen = [], [], []
    for k in range(depth + 1):
        lv = build_level_deflator(ctx, k, check=False, tau=clock)
        levels.append(lv)
        zt = np.ones_like(lv.z_native)
        for ti in range(f.n_times):
            zt[:, ti] = conditional_expectation(lv.z_native[:, ti], f.partitions[ti], p)
        projected.append((k, zt, lv))
        if k > K:
            continue
        delta = ctx.T / 2**k
        for ti in lv.indices:
            t = market.times[ti]
            rhs = np.ones(market.n_atoms)
            for r, fh in lv.locals.items():
                if r == INF or r < t:
                    continue
                q = lv.conditionals[r]
                col = measurable_version(fh[:, ti], f.partitions[ti], q, tol=1e-9 * max(1.0, fh[:, ti].max()))
                rhs += col * p.prob(clock.in_interval(r, r + delta))
            if INF in lv.locals:
                col = measurable_version(lv.locals[INF][:, ti], f.partitions[ti], lv.conditionals[INF])
                rhs += col * p.prob([a for a, s in enumerate(clock.times) if s == INF])
            lhs = 1.0 / zt[:, ti]
            worst = float(np.max(lhs - rhs))
            jensen.append((k, t, worst, worst <= 1e-9 * max(1.0, float(rhs.max()))))
    schedule = ForwardConvexSchedule("cesaro_tail", limit_tol)
    limits, cols = {}, []
    for ti in range(f.n_times):
        seq = [(k, zt[:, ti]) for k, zt, lv in projected if ti in lv.indices]
        lim = forward_convex_limit(seq, ti, schedule)
        limits[ti] = lim
        cols.append(lim.values)
    z = make_deflator(np.column_stack(cols), market)
    report = verify_deflator(market, z, [("P", p)], hull_samples, tol, seed, n_cap)
    return ClockResult(z, report, jensen, levels, limits, all(l.converged for l in limits.values()))


# --------------------------------------------------------------------------


def regularize_by_numeraire(s_process, x_bar: WealthProcess | np.ndarray) -> DeflatorProcess:
    """Z' = (S/X̄) on {X̄ > 0} and 1 on {X̄ = 0}."""
    s = np.array(s_process, dtype=float, ndmin=2)
    xb = np.array(getattr(x_bar, "values", x_bar), dtype=float, ndmin=2)
    if s.shape != xb.shape:
        raise InputError("S and X̄ must share the grid")
    alive = xb > 0
    if np.any((s > 0) & ~alive):
        warnings.warn("S is positive where the numéraire vanishes; those values are discarded",
                      stacklevel=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(alive, s / np.where(alive, xb, 1.0), 1.0)
    return make_deflator(z)
