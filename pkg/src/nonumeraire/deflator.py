"""Construction and verification of generalized supermartingale deflators.

Pipeline: crash time of the market, one local deflator per charged crash
time under P[. | tau = t], pasting along {tau = t}, optional projection
onto the filtration, and a full ratio check under several measures.

Local deflators are reciprocals of the numéraire portfolio of the
fork-convex hull under the conditional measure. That portfolio is built
from one-period log-optimal solves on every information block, so its
reciprocal deflates every switching/convex strategy, not only the generators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, NumeraireError, SolverError, StageError
from .market import INF, CrashTimeProfile, Market, hull_sample, is_adapted, lazy_value_family
from .prob import (DEFAULT_TOL, BoundednessDiagnostic, Measure, boundedness_diagnostic,
                   condition_on_event, conditional_expectation)
from .solver import StaticDeflatorResult, maximal_element, undominated_columns

DEFAULT_N_CAP = 256
DEFAULT_M_SCHEDULE = (10.0, 100.0, 1000.0, 10000.0)
POSITIVITY_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class DeflatorProcess:
    values: np.ndarray
    z0_bound: bool
    adapted: bool


def make_deflator(values, market: Market | None = None) -> DeflatorProcess:
    z = np.array(values, dtype=float, ndmin=2)
    if not np.all(np.isfinite(z)) or np.any(z <= POSITIVITY_FLOOR):
        raise InputError("deflator must be finite and strictly positive")
    adapted = bool(market is not None and is_adapted(z, market.filtration, tol=1e-12))
    z.setflags(write=False)
    return DeflatorProcess(z, bool(np.all(z[:, 0] <= 1 + 1e-12)), adapted)


# --------------------------------------------------------------------------
# numéraire portfolio of the fork-convex hull


@dataclass(frozen=True, eq=False)
class _Period:
    atoms: np.ndarray
    returns: np.ndarray  # (len(atoms), n_kept) one-period gross returns


def information_partitions(market: Market, members: np.ndarray) -> list[list[np.ndarray]]:
    """Blocks of F_u joined with the member values up to u, for every u.

    For an adapted market this is the filtration itself.
    """
    f = market.filtration
    out = []
    for u in range(f.n_times):
        if market.adapted_flag:
            out.append([np.array(b) for b in f.partitions[u]])
            continue
        groups: dict = {}
        ids = f.block_ids[u]
        for a in range(market.n_atoms):
            key = (int(ids[a]), members[:, a, : u + 1].tobytes())
            groups.setdefault(key, []).append(a)
        out.append([np.array(v) for v in groups.values()])
    return out


class HullNumeraire:
    """One-period log-optimal rebalancing over the market members.

    ``portfolio(q, horizon)`` returns the wealth N (atoms x times) of the
    hull element that is log-optimal under q period by period. Results are
    cached per measure and per (period, block, conditional law).
    """

    def __init__(self, market: Market, n_cap: int = DEFAULT_N_CAP, tol: float = DEFAULT_TOL):
        self.market = market
        self.tol = tol
        members = market.members(n_cap)
        self.members = members
        self.blocks = information_partitions(market, members)
        self.periods: list[list[_Period]] = []
        for u in range(market.filtration.n_times - 1):
            row = []
            for b in self.blocks[u]:
                live = members[:, b[0], u] > 0
                if not live.any():
                    row.append(_Period(b, np.zeros((len(b), 0))))
                    continue
                r = (members[live][:, b, u + 1] / members[live][:, b, u]).T
                row.append(_Period(b, r[:, undominated_columns(r)]))
            self.periods.append(row)
        self._solves: dict = {}
        self._portfolios: dict = {}

    def _step(self, u: int, j: int, q: np.ndarray) -> np.ndarray:
        per = self.periods[u][j]
        r = per.returns
        if r.shape[1] == 0:
            return np.zeros(len(per.atoms))
        if r.shape[1] == 1:
            return r[:, 0]
        qb = q[per.atoms]
        mass = qb.sum()
        if mass <= 0:
            return r.mean(axis=1)
        qn = qb / mass
        key = (u, j, np.round(qn, 14).tobytes())
        res = self._solves.get(key)
        if res is None:
            res = maximal_element(r, Measure(qn, 1), tol=self.tol)
            self._solves[key] = res
        return r @ res.weights

    def portfolio(self, q: Measure, horizon: int | None = None) -> np.ndarray:
        n_t = self.market.filtration.n_times
        horizon = n_t - 1 if horizon is None else min(horizon, n_t - 1)
        key = np.round(q.weights, 15).tobytes()
        cached = self._portfolios.get(key)
        if cached is not None and cached.shape[1] > horizon:
            return cached[:, : horizon + 1]
        w = q.weights
        nv = np.ones((self.market.n_atoms, horizon + 1))
        for u in range(horizon):
            col = nv[:, u].copy()
            for j, per in enumerate(self.periods[u]):
                col[per.atoms] = nv[per.atoms, u] * self._step(u, j, w)
            nv[:, u + 1] = col
        self._portfolios[key] = nv
        return nv


# --------------------------------------------------------------------------
# crash time and local deflators


def market_crash_time(market: Market, n_cap: int = DEFAULT_N_CAP, tol: float = DEFAULT_TOL
                      ) -> tuple[CrashTimeProfile, list[StaticDeflatorResult]]:
    members = market.members(n_cap)
    p = market.space.measure()
    results = [maximal_element(members[:, :, i].T, p, tol=tol) for i in range(members.shape[2])]
    times = market.filtration.times
    tau = []
    for a in range(market.n_atoms):
        dead = [i for i, r in enumerate(results) if r.f_hat[a] == 0]
        tau.append(INF if not dead else times[dead[0]])
    profile = CrashTimeProfile(tuple(tau), market.space.probs)
    for a, t in enumerate(profile.times):
        if t == INF or market.space.probs[a] == 0:
            continue
        i = times.index(t)
        if np.any(members[:, a, i:] != 0):
            raise StageError("crash", f"member alive after crash time at atom {a}")
    return profile, results


@dataclass(frozen=True, eq=False)
class LocalDeflator:
    t: object
    measure: Measure
    y: np.ndarray
    f_hat: np.ndarray


def _crash_index(market: Market, t) -> int:
    return market.filtration.n_times if t == INF else market.filtration.time_index(t)


def local_deflator(market: Market, q_t: Measure, t, n_cap: int = DEFAULT_N_CAP,
                   tol: float = DEFAULT_TOL, hull: HullNumeraire | None = None) -> LocalDeflator:
    """Y^t_s = 1/f̂_s for s < t and 1 from t on (and on q_t-null atoms)."""
    if q_t.is_null:
        raise InputError("local deflator under the null measure")
    hull = hull or HullNumeraire(market, n_cap, tol)
    ti = _crash_index(market, t)
    n_t = market.filtration.n_times
    nv = hull.portfolio(q_t, max(ti - 1, 0))
    y = np.ones((market.n_atoms, n_t))
    f_hat = np.zeros((market.n_atoms, n_t))
    supp = q_t.weights > 0
    width = min(ti, n_t)
    f_hat[:, :width] = nv[:, :width]
    bad = supp[:, None] & ~(f_hat[:, :width] > 0)
    if bad.any():
        a, s = map(int, np.argwhere(bad)[0])
        raise StageError("local_deflator",
                         f"market inconsistent with crash time: f_hat vanishes at atom {a}, time index {s}")
    y[supp, :width] = 1.0 / f_hat[supp, :width]
    return LocalDeflator(t, q_t, y, f_hat)


def paste_deflators(locals_: dict, tau: CrashTimeProfile, market: Market | None = None) -> DeflatorProcess:
    n = len(tau.times)
    for a in range(n):
        if tau.probs[a] > 0 and tau.times[a] not in locals_:
            raise StageError("paste", f"missing local deflator for crash time {tau.times[a]}")
    any_local = next(iter(locals_.values()))
    z = np.ones_like(any_local.y)
    for a in range(n):
        if tau.probs[a] > 0:
            z[a] = locals_[tau.times[a]].y[a]
    return make_deflator(z, market)


def adapt_deflator(z: DeflatorProcess, market: Market) -> DeflatorProcess:
    if not market.adapted_flag:
        raise InputError("adapted projection requires an adapted market")
    p = market.space.measure()
    cols = [conditional_expectation(z.values[:, i], part, p)
            for i, part in enumerate(market.filtration.partitions)]
    return make_deflator(np.column_stack(cols), market)


# --------------------------------------------------------------------------
# verification


@dataclass(frozen=True, eq=False)
class VerificationReport:
    s_index: np.ndarray
    t_index: np.ndarray
    process: np.ndarray
    block: np.ndarray
    measure: np.ndarray
    ratio: np.ndarray
    process_names: tuple[str, ...]
    measure_names: tuple[str, ...]
    max_ratio: float
    positivity_ok: bool
    z0_ok: bool
    adapted_ok: bool
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_ratio <= 1 + self.tol and self.positivity_ok and self.z0_ok and self.adapted_ok

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def __len__(self) -> int:
        return len(self.ratio)

    def rows(self):
        for i in range(len(self.ratio)):
            yield (int(self.s_index[i]), int(self.t_index[i]), self.process_names[self.process[i]],
                   int(self.block[i]), self.measure_names[self.measure[i]], float(self.ratio[i]))

    def max_by_measure(self) -> dict[str, float]:
        out = {}
        for j, name in enumerate(self.measure_names):
            sel = self.ratio[self.measure == j]
            out[name] = float(sel.max()) if sel.size else 0.0
        return out


def ratio_table(processes: np.ndarray, z: np.ndarray, filtration, q: np.ndarray):
    """Blockwise conditional ratios E_q[X_t Z_t / (X_s Z_s) 1_A] / q[A].

    Returns arrays (s, t, process, block, ratio) over every s < t and every
    q-charged block A of the partition at s; 0/0 is read as 0.
    """
    v = processes * z[None, :, :]
    out = []
    n_t = v.shape[2]
    for s in range(n_t - 1):
        ind = filtration.indicator(s)
        mass = ind @ q
        charged = np.flatnonzero(mass > 0)
        if charged.size == 0:
            continue
        denom = v[:, :, s]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(denom[:, :, None] > 0, v[:, :, s + 1:] / denom[:, :, None], 0.0)
        weighted = ind[charged] * q[None, :]
        # (block, process, later time)
        vals = np.einsum("ba,pat->bpt", weighted, ratio) / mass[charged][:, None, None]
        nb, npr, nlt = vals.shape
        bb, pp, tt = np.meshgrid(charged, np.arange(npr), np.arange(nlt), indexing="ij")
        out.append((np.full(vals.size, s), (tt + s + 1).ravel(), pp.ravel(), bb.ravel(), vals.ravel()))
    if not out:
        empty = np.zeros(0, dtype=int)
        return empty, empty, empty, empty, np.zeros(0)
    return tuple(np.concatenate(parts) for parts in zip(*out))


def verify_deflator(market: Market, z: DeflatorProcess | np.ndarray, measures: Sequence,
                    hull_samples: int = 0, tol: float = DEFAULT_TOL, seed: int = 0,
                    n_cap: int = DEFAULT_N_CAP, hull_depth: int = 3,
                    require_adapted: bool = False, extra: Sequence = ()) -> VerificationReport:
    """Check E_Q[X_t Z_t / (X_s Z_s) | A] <= 1 for all listed measures.

    ``measures`` holds Measure objects or (name, Measure) pairs; null measures
    are skipped.
    """
    zv = z.values if isinstance(z, DeflatorProcess) else np.asarray(z, dtype=float)
    procs = [market.members(n_cap)]
    names = list(market.member_names(n_cap))
    if hull_samples:
        hs = hull_sample(market, hull_depth, seed, count=hull_samples, n_cap=n_cap)
        procs.append(np.array([h.values for h in hs]))
        names += [h.name for h in hs]
    if len(extra):
        procs.append(np.array([getattr(x, "values", x) for x in extra]))
        names += [getattr(x, "name", f"extra{i}") for i, x in enumerate(extra)]
    stacked = np.concatenate(procs, axis=0)

    named = []
    for i, m in enumerate(measures):
        if isinstance(m, tuple):
            named.append(m)
        else:
            named.append(("P" if i == 0 else f"Q{i}", m))
    cols = [[] for _ in range(6)]
    for j, (_, m) in enumerate(named):
        if m.is_null:
            continue
        s, t, pr, bl, rt = ratio_table(stacked, zv, market.filtration, m.weights)
        for c, part in zip(cols, (s, t, pr, bl, np.full(len(rt), j), rt)):
            c.append(part)
    arrs = [np.concatenate(c) if c else np.zeros(0) for c in cols]
    ints = [a.astype(int) for a in arrs[:5]]
    ratio = arrs[5].astype(float)
    positivity = bool(np.all(np.isfinite(zv)) and np.all(zv > POSITIVITY_FLOOR))
    z0_ok = bool(np.all(zv[:, 0] <= 1 + 1e-12))
    adapted_ok = (not require_adapted) or is_adapted(zv, market.filtration, tol=1e-12)
    max_ratio = float(ratio.max()) if ratio.size else 0.0
    return VerificationReport(*ints, ratio, tuple(names), tuple(n for n, _ in named), max_ratio,
                              positivity, z0_ok, bool(adapted_ok), tol)


# --------------------------------------------------------------------------
# NUPBR diagnostics and the full discrete construction


def nupbr_check(market: Market, n_cap: int = DEFAULT_N_CAP,
                m_schedule: Sequence[float] = DEFAULT_M_SCHEDULE) -> list[tuple]:
    """Per grid time: (t, BoundednessDiagnostic) of the value set under P."""
    p = market.space.measure()
    out = []
    members = None if market.families else market.members(n_cap)
    for i, t in enumerate(market.filtration.times):
        lazy = lazy_value_family(market, i, n_cap)
        family = lazy if lazy is not None else list(members[:, :, i])
        out.append((t, boundedness_diagnostic(family, p, m_schedule)))
    return out


def measure_name(t) -> str:
    return "Q[tau=inf]" if t == INF else f"Q[tau={t}]"


@dataclass(frozen=True, eq=False)
class DiscreteDeflatorResult:
    z: DeflatorProcess
    z_adapted: DeflatorProcess | None
    tau: CrashTimeProfile
    static: list
    locals: dict
    measures: list
    report: VerificationReport
    report_adapted: VerificationReport | None
    nupbr: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        ok = self.report.passed
        if self.report_adapted is not None:
            ok = ok and self.report_adapted.passed
        return ok


def crash_measures(market: Market, tau: CrashTimeProfile) -> list[tuple[str, Measure]]:
    p = market.space.measure()
    return [(measure_name(t), condition_on_event(p, tau.event(t))) for t in tau.charged()]


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except SolverError as exc:
        raise StageError(name, str(exc), kind="solver") from exc
    except NumeraireError as exc:
        raise StageError(name, str(exc)) from exc


def build_discrete_deflator(market: Market, n_cap: int = DEFAULT_N_CAP, tol: float = DEFAULT_TOL,
                            m_schedule: Sequence[float] = DEFAULT_M_SCHEDULE,
                            hull_samples: int = 0, seed: int = 0,
                            check_nupbr: bool = True) -> DiscreteDeflatorResult:
    nupbr = []
    if check_nupbr:
        nupbr = _stage("nupbr", nupbr_check, market, n_cap, m_schedule)
        bad = [(t, d) for t, d in nupbr if d.verdict == "divergent"]
        if bad:
            t, d = bad[0]
            err = StageError("nupbr", f"value set divergent at t={t} (sampled max {d.max_value:.17g}); "
                                      "no deflator construction attempted", kind="precondition")
            err.time = t
            raise err
    tau, static = _stage("crash", market_crash_time, market, n_cap, tol)
    measures = crash_measures(market, tau)
    hull = _stage("local_deflator", HullNumeraire, market, n_cap, tol)
    locals_ = {}
    for (name, q), t in zip(measures, tau.charged()):
        locals_[t] = _stage("local_deflator", local_deflator, market, q, t, n_cap, tol, hull)
    z = _stage("paste", paste_deflators, locals_, tau, market)
    all_measures = [("P", market.space.measure())] + measures
    report = verify_deflator(market, z, all_measures, hull_samples, tol, seed, n_cap)
    z_adapted = report_adapted = None
    if market.adapted_flag:
        z_adapted = _stage("adapt", adapt_deflator, z, market)
        report_adapted = verify_deflator(market, z_adapted, all_measures[:1], hull_samples, tol,
                                         seed, n_cap, require_adapted=True)
    return DiscreteDeflatorResult(z, z_adapted, tau, static, locals_, all_measures, report,
                                  report_adapted, nupbr)
