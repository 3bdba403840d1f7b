"""Wealth processes, markets and the fork-convex operations on them."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import InputError
from .prob import Filtration, LazyFamily, SampleSpace, validate_space

INF = math.inf


@dataclass(frozen=True, eq=False)
class WealthProcess:
    name: str
    values: np.ndarray

    @property
    def n_atoms(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]


def check_wealth_matrix(values: np.ndarray) -> list[str]:
    problems = []
    if values.ndim != 2 or values.shape[1] == 0:
        return ["matrix must be 2-D with at least one time column"]
    if not np.all(np.isfinite(values)):
        problems.append("non-finite value")
    if np.any(values < 0):
        a, t = map(int, np.argwhere(values < 0)[0])
        problems.append(f"negative value at ({a},{t})")
    if np.any(np.abs(values[:, 0] - 1.0) > 1e-12):
        problems.append("initial value not 1")
    dead = np.logical_or.accumulate(values == 0, axis=1)
    rebound = dead[:, :-1] & (values[:, 1:] > 0)
    if rebound.any():
        a, t = map(int, np.argwhere(rebound)[0])
        problems.append(f"rebound after zero at ({a},{t + 1})")
    return problems


def make_wealth_process(name: str, matrix, n_atoms: int | None = None,
                        n_times: int | None = None) -> WealthProcess:
    values = np.array(matrix, dtype=float, ndmin=2)
    if n_atoms is not None and values.shape[0] != n_atoms:
        raise InputError(f"{name}: {values.shape[0]} rows for {n_atoms} atoms")
    if n_times is not None and values.shape[1] != n_times:
        raise InputError(f"{name}: {values.shape[1]} columns for {n_times} times")
    problems = check_wealth_matrix(values)
    if problems:
        raise InputError(f"{name}: " + "; ".join(problems))
    values[:, 0] = 1.0
    values.setflags(write=False)
    return WealthProcess(name, values)


@dataclass(eq=False)
class ParametricFamily:
    """Indexed wealth processes ``n -> X^n`` evaluated lazily and cached."""

    kind: str
    n_min: int
    n_max: int
    evaluator: Callable[[int], np.ndarray]
    _cache: dict = field(default_factory=dict, repr=False)

    def member(self, n: int) -> WealthProcess:
        if not self.n_min <= n <= self.n_max:
            raise InputError(f"family index {n} outside {self.n_min}..{self.n_max}")
        if n not in self._cache:
            self._cache[n] = make_wealth_process(f"{self.kind}[{n}]", self.evaluator(n))
        return self._cache[n]

    def indices(self, n_cap: int) -> range:
        return range(self.n_min, min(self.n_max, n_cap) + 1)

    def stack(self, n_cap: int) -> np.ndarray:
        """Members with index <= n_cap as an array (member, atom, time)."""
        return np.array([self.member(n).values for n in self.indices(n_cap)])


@dataclass(frozen=True, eq=False)
class Market:
    space: SampleSpace
    filtration: Filtration
    generators: tuple[WealthProcess, ...]
    families: tuple[ParametricFamily, ...] = ()
    name: str = "market"

    def __post_init__(self):
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "families", tuple(self.families))
        problems = validate_space(self.space, self.filtration)
        n, m = self.space.size, self.filtration.n_times
        for g in self.generators:
            if g.values.shape != (n, m):
                problems.append(f"generator {g.name} has shape {g.values.shape}, expected {(n, m)}")
        if not self.generators and not self.families:
            problems.append("market has no generators")
        if problems:
            raise InputError("; ".join(problems))

    @property
    def n_atoms(self) -> int:
        return self.space.size

    @property
    def times(self) -> tuple[Fraction, ...]:
        return self.filtration.times

    def members(self, n_cap: int) -> np.ndarray:
        """Generators followed by family members, shape (member, atom, time)."""
        parts = [np.array([g.values for g in self.generators])] if self.generators else []
        for fam in self.families:
            stacked = fam.stack(n_cap)
            if stacked.size:
                parts.append(stacked)
        return np.concatenate(parts, axis=0)

    def member_names(self, n_cap: int) -> list[str]:
        names = [g.name for g in self.generators]
        for fam in self.families:
            names += [f"{fam.kind}[{n}]" for n in fam.indices(n_cap)]
        return names

    @cached_property
    def adapted_flag(self) -> bool:
        f = self.filtration
        return (all(is_adapted(g.values, f) for g in self.generators)
                and all(is_adapted(fam.member(n).values, f)
                        for fam in self.families for n in fam.indices(64)))

    def restrict_times(self, indices: Sequence[int]) -> "Market":
        idx = list(indices)
        gens = tuple(WealthProcess(g.name, g.values[:, idx]) for g in self.generators)
        fams = tuple(ParametricFamily(f.kind, f.n_min, f.n_max,
                                      (lambda n, f=f: f.member(n).values[:, idx]))
                     for f in self.families)
        return Market(self.space, self.filtration.restrict(idx), gens, fams, self.name)


def is_adapted(values: np.ndarray, filtration: Filtration, tol: float = 0.0) -> bool:
    """True when every column is constant on the blocks of its partition."""
    for i, part in enumerate(filtration.partitions):
        col = values[:, i]
        for b in part:
            v = col[list(b)]
            if v.max() - v.min() > tol:
                return False
    return True


@dataclass(frozen=True, eq=False)
class CrashTimeProfile:
    """Per-atom crash time in grid units (``math.inf`` for never)."""

    times: tuple
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(INF if t == INF else Fraction(t) for t in self.times))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))

    @cached_property
    def distribution(self) -> dict:
        dist: dict = {}
        for t, p in zip(self.times, self.probs):
            dist[t] = dist.get(t, 0.0) + float(p)
        return dict(sorted(dist.items(), key=lambda kv: (kv[0] == INF, kv[0] if kv[0] != INF else 0)))

    def charged(self) -> list:
        return [t for t, m in self.distribution.items() if m > 0]

    def event(self, t) -> np.ndarray:
        return np.array([s == t for s in self.times])

    def in_interval(self, lo, hi) -> np.ndarray:
        """Atoms with crash time in (lo, hi]."""
        return np.array([s != INF and lo < s <= hi for s in self.times])


def process_crash_time(x: WealthProcess | np.ndarray, times: Sequence, probs) -> CrashTimeProfile:
    values = x.values if isinstance(x, WealthProcess) else np.asarray(x)
    out = []
    for row in values:
        zeros = np.flatnonzero(row == 0)
        out.append(INF if zeros.size == 0 else Fraction(times[zeros[0]]))
    return CrashTimeProfile(tuple(out), probs)


def fork_combine(x1: WealthProcess, x2: WealthProcess, x3: WealthProcess, s_index: int,
                 event, filtration: Filtration, name: str | None = None) -> WealthProcess:
    """Switch from x1 into x2 on ``event`` and into x3 off it, at time index ``s_index``.

    Where the target asset is already dead at the switching time the position
    stays in x1.
    """
    a = np.zeros(x1.n_atoms, dtype=bool)
    ev = np.asarray(event)
    if ev.dtype == bool:
        a = ev.copy()
    elif ev.size:
        a[ev.astype(int)] = True
    for b in filtration.partitions[s_index]:
        vals = a[list(b)]
        if vals.any() and not vals.all():
            raise InputError(f"event is not measurable at time index {s_index}")
    v1, v2, v3 = x1.values, x2.values, x3.values
    out = v1.copy()
    s = s_index
    for target, mask in ((v2, a), (v3, ~a)):
        alive = mask & (target[:, s] > 0)
        if alive.any():
            scale = v1[alive, s] / target[alive, s]
            out[alive, s:] = target[alive, s:] * scale[:, None]
    out[:, s] = v1[:, s]
    out[out < 0] = 0.0
    return make_wealth_process(name or f"fork({x1.name},{x2.name},{x3.name}@{s})", out)


def convex_combine(lam: float, x1: WealthProcess, x2: WealthProcess, name: str | None = None) -> WealthProcess:
    if x1.values.shape != x2.values.shape:
        raise InputError("shape mismatch in convex_combine")
    if not 0.0 <= lam <= 1.0:
        raise InputError("weight outside [0,1]")
    if lam == 1.0:
        vals = x1.values
    elif lam == 0.0:
        vals = x2.values
    else:
        vals = lam * x1.values + (1.0 - lam) * x2.values
    return make_wealth_process(name or f"cvx({lam:.3g},{x1.name},{x2.name})", vals)


def _random_event(filtration: Filtration, s: int, rng: np.random.Generator, n: int) -> np.ndarray:
    part = filtration.partitions[s]
    pick = rng.random(len(part)) < 0.5
    mask = np.zeros(n, dtype=bool)
    for chosen, b in zip(pick, part):
        if chosen:
            mask[list(b)] = True
    return mask


def hull_sample(market: Market, depth: int, seed: int, count: int = 20,
                n_cap: int = 256) -> list[WealthProcess]:
    """Random elements of the fork-convex hull built from ``depth`` operations each.

    Every sample starts from a random member and applies ``depth`` random
    fork or convex operations against the member pool and earlier samples.
    """
    pool = [WealthProcess(nm, v) for nm, v in
            zip(market.member_names(n_cap), market.members(n_cap))]
    if depth == 0:
        return pool
    rng = np.random.default_rng(seed)
    n, m = market.n_atoms, market.filtration.n_times
    out: list[WealthProcess] = []
    for j in range(count):
        cur = pool[int(rng.integers(len(pool)))]
        for _ in range(depth):
            sources = pool + out
            if rng.random() < 0.6:
                s = int(rng.integers(m))
                ev = _random_event(market.filtration, s, rng, n)
                x2 = sources[int(rng.integers(len(sources)))]
                x3 = sources[int(rng.integers(len(sources)))]
                cur = fork_combine(cur, x2, x3, s, ev, market.filtration, name=f"hull{j}")
            else:
                other = sources[int(rng.integers(len(sources)))]
                cur = convex_combine(float(rng.random()), cur, other, name=f"hull{j}")
        out.append(WealthProcess(f"hull{j}", cur.values))
    return out


def hull_exhaustive(market: Market, rounds: int = 1, n_cap: int = 256,
                    weights: Sequence[float] = (0.5,), limit: int = 5000) -> list[WealthProcess]:
    """Closure of the members under every fork switch and the given convex weights.

    Feasible only for tiny markets (at most 3 times, 2 generators, 2 blocks).
    """
    f = market.filtration
    nblocks = max(len(p) for p in f.partitions)
    if f.n_times > 3 or len(market.member_names(n_cap)) > 2 or nblocks > 2:
        raise InputError("exhaustive hull only for <=3 times, <=2 generators, <=2 blocks")
    seen: dict[bytes, WealthProcess] = {}
    frontier = [WealthProcess(nm, v) for nm, v in zip(market.member_names(n_cap), market.members(n_cap))]
    for x in frontier:
        seen[np.round(x.values, 12).tobytes()] = x
    for _ in range(rounds):
        current = list(seen.values())
        new = []
        for s in range(f.n_times):
            part = f.partitions[s]
            for bits in range(2 ** len(part)):
                ev = np.zeros(market.n_atoms, dtype=bool)
                for j, b in enumerate(part):
                    if bits >> j & 1:
                        ev[list(b)] = True
                for x1 in current:
                    for x2 in current:
                        for x3 in current:
                            new.append(fork_combine(x1, x2, x3, s, ev, f))
        for x1 in current:
            for x2 in current:
                for lam in weights:
                    new.append(convex_combine(lam, x1, x2))
        for x in new:
            key = np.round(x.values, 12).tobytes()
            if key not in seen:
                seen[key] = WealthProcess(f"hull{len(seen)}", x.values)
            if len(seen) >= limit:
                return list(seen.values())
    return list(seen.values())


def value_set(market: Market, t, n_cap: int = 256) -> list[np.ndarray]:
    i = market.filtration.time_index(t)
    return list(market.members(n_cap)[:, :, i])


@dataclass(frozen=True)
class NumeraireCertificate:
    index: int | None
    checked_pairs: int
    counterexample: tuple | None = None


def find_generalized_numeraire(market: Market, n_cap: int = 256) -> NumeraireCertificate:
    """First generator that vanishes only where every checked member vanishes."""
    members = market.members(n_cap)
    pos = market.space.probs > 0
    alive_any = (members[:, pos, :] > 0).any(axis=0)
    counter = None
    for i, g in enumerate(market.generators):
        bad = alive_any & (g.values[pos, :] == 0)
        if not bad.any():
            return NumeraireCertificate(i, members.shape[0] * int(pos.sum()) * members.shape[2])
        if counter is None:
            a, t = map(int, np.argwhere(bad)[0])
            atom = int(np.flatnonzero(pos)[a])
            other = int(np.flatnonzero(members[:, atom, t] > 0)[0])
            counter = (i, other, atom, t)
    return NumeraireCertificate(None, members.shape[0] * int(pos.sum()) * members.shape[2], counter)


def example_2_8_value(n: int, t: Fraction) -> float:
    t = Fraction(t)
    v = min(1 + (2 * n - 2) * t, 2 * n - 2 * n * t)
    return float(max(v, Fraction(0)))


def example_family(grid: Sequence, n_max: int = 10**9) -> ParametricFamily:
    """The deterministic family X^n_t = min{1+(2n-2)t, 2n-2nt}, clamped at 0."""
    times = [Fraction(t) for t in grid]
    if any(t < 0 or t > 1 for t in times):
        raise InputError("grid point outside [0,1]")

    def evaluate(n: int) -> np.ndarray:
        return np.array([[example_2_8_value(n, t) for t in times]])

    return ParametricFamily("example_2_8", 1, n_max, evaluate)


def example_2_8_market(step: Fraction = Fraction(1, 100), n_max: int = 10**9) -> Market:
    n = int(1 / Fraction(step))
    times = tuple(Fraction(i, n) for i in range(n + 1))
    space = SampleSpace(("w0",), np.array([1.0]))
    filt = Filtration(times, tuple(((0,),) for _ in times))
    return Market(space, filt, (), (example_family(times, n_max),), name="example_2_8")


def lazy_value_family(market: Market, t_index: int, n_cap: int):
    """The time-t value set as a LazyFamily when the market has families."""
    if not market.families:
        return None
    gens = [g.values[:, t_index] for g in market.generators]
    members = [(fam, n) for fam in market.families for n in fam.indices(n_cap)]

    def evaluate(j: int) -> np.ndarray:
        if j <= len(gens):
            return gens[j - 1]
        fam, n = members[j - len(gens) - 1]
        return fam.member(n).values[:, t_index]

    return LazyFamily(evaluate, len(gens) + len(members))
