"""Finite filtered probability spaces.

Everything lives on a finite set of atoms. A random variable is a 1-D numpy
array indexed by atom (``np.inf`` is allowed as a value); a partition is a
sequence of blocks, each block a sequence of atom indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, MeasurabilityError, NonIntegrableError

DEFAULT_TOL = 1e-9
PROB_SUM_TOL = 1e-12

Partition = tuple[tuple[int, ...], ...]


def _as_partition(blocks: Sequence[Sequence[int]]) -> Partition:
    return tuple(tuple(int(i) for i in b) for b in blocks)


@dataclass(frozen=True, eq=False)
class SampleSpace:
    labels: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))

    @classmethod
    def uniform(cls, n: int) -> "SampleSpace":
        return cls(tuple(f"w{i}" for i in range(n)), np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return len(self.labels)

    @cached_property
    def index(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.labels)}

    def measure(self) -> "Measure":
        return Measure(self.probs.copy(), 1)


@dataclass(frozen=True, eq=False)
class Filtration:
    times: tuple[Fraction, ...]
    partitions: tuple[Partition, ...]

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(Fraction(t) for t in self.times))
        object.__setattr__(self, "partitions", tuple(_as_partition(p) for p in self.partitions))

    @classmethod
    def discrete(cls, times, n_atoms: int, reveal_at: int = 0) -> "Filtration":
        """Trivial partition before index ``reveal_at``, discrete from then on."""
        trivial = (tuple(range(n_atoms)),)
        disc = tuple((i,) for i in range(n_atoms))
        parts = tuple(trivial if j < reveal_at else disc for j in range(len(times)))
        return cls(tuple(times), parts)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def horizon(self) -> Fraction:
        return self.times[-1]

    def time_index(self, t) -> int:
        t = Fraction(t)
        try:
            return self.times.index(t)
        except ValueError:
            raise InputError(f"time {t} is not on the grid") from None

    @cached_property
    def block_ids(self) -> tuple[np.ndarray, ...]:
        """Per time, an array mapping each atom to the index of its block."""
        out = []
        for part in self.partitions:
            n = sum(len(b) for b in part)
            ids = np.full(n, -1, dtype=int)
            for j, b in enumerate(part):
                ids[list(b)] = j
            out.append(ids)
        return tuple(out)

    def indicator(self, i: int) -> np.ndarray:
        """Block-by-atom 0/1 matrix of the partition at time index ``i``."""
        part = self.partitions[i]
        n = len(self.block_ids[i])
        mat = np.zeros((len(part), n))
        for j, b in enumerate(part):
            mat[j, list(b)] = 1.0
        return mat

    def restrict(self, indices: Sequence[int]) -> "Filtration":
        return Filtration(tuple(self.times[i] for i in indices),
                          tuple(self.partitions[i] for i in indices))


@dataclass(frozen=True, eq=False)
class Measure:
    weights: np.ndarray
    total_mass: int = 1

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))

    @classmethod
    def null(cls, n: int) -> "Measure":
        return cls(np.zeros(n), 0)

    @property
    def is_null(self) -> bool:
        return self.total_mass == 0

    @property
    def support(self) -> np.ndarray:
        return self.weights > 0

    def prob(self, event) -> float:
        mask = _event_mask(event, len(self.weights))
        return float(self.weights[mask].sum())

    def expect(self, x) -> float:
        x = np.asarray(x, dtype=float)
        pos = self.weights > 0
        if np.any(np.isinf(x[pos])):
            raise NonIntegrableError("nonintegrable")
        return float(np.dot(self.weights[pos], x[pos]))


def _event_mask(event, n: int) -> np.ndarray:
    arr = np.asarray(event)
    if arr.dtype == bool and arr.shape == (n,):
        return arr
    mask = np.zeros(n, dtype=bool)
    if arr.size:
        mask[arr.astype(int).ravel()] = True
    return mask


def validate_space(space: SampleSpace, filtration: Filtration | None = None) -> list[str]:
    """Return every violated invariant; an empty list means the input is valid."""
    problems: list[str] = []
    n = len(space.labels)
    if len(set(space.labels)) != n:
        problems.append("atom labels are not unique")
    if len(space.probs) != n:
        problems.append(f"{len(space.probs)} probabilities for {n} atoms")
    if np.any(~(space.probs > 0)):
        bad = [space.labels[i] for i in np.flatnonzero(~(space.probs > 0)) if i < n]
        problems.append(f"nonpositive probability at atoms {bad}")
    if np.any(space.probs > 1):
        problems.append("probability above 1")
    total = float(np.sum(space.probs))
    if abs(total - 1.0) > PROB_SUM_TOL:
        problems.append(f"probabilities sum to {total:.12g}")
    if filtration is None:
        return problems

    times = filtration.times
    if any(b <= a for a, b in zip(times, times[1:])):
        problems.append("times are not strictly increasing")
    if len(filtration.partitions) != len(times):
        problems.append(f"{len(filtration.partitions)} partitions for {len(times)} times")
    for i, part in enumerate(filtration.partitions):
        flat = [a for b in part for a in b]
        if any(len(b) == 0 for b in part):
            problems.append(f"empty block at step {i}")
        if len(flat) != len(set(flat)):
            problems.append(f"blocks overlap at step {i}")
        if set(flat) != set(range(n)):
            problems.append(f"blocks do not cover the atoms at step {i}")
    for i in range(1, len(filtration.partitions)):
        earlier = [set(b) for b in filtration.partitions[i - 1]]
        for b in filtration.partitions[i]:
            if not any(set(b) <= e for e in earlier):
                problems.append(f"refinement fails at step {i}")
                break
    return problems


def condition_on_event(p: Measure, event) -> Measure:
    """P[. | event]; conditioning on a null event yields the null measure."""
    if p.is_null:
        raise InputError("cannot condition the null measure")
    mask = _event_mask(event, len(p.weights))
    mass = p.weights[mask].sum()
    if mass <= 0:
        return Measure.null(len(p.weights))
    w = np.where(mask, p.weights, 0.0) / mass
    if mask.all():
        w = p.weights.copy()
    return Measure(w, 1)


def conditional_expectation(x, partition: Sequence[Sequence[int]], q: Measure) -> np.ndarray:
    """E_q[x | sigma(partition)], set to 0 on q-null blocks."""
    if q.is_null:
        raise InputError("conditional expectation under the null measure")
    x = np.asarray(x, dtype=float)
    w = q.weights
    if np.any(np.isinf(x[w > 0])):
        raise NonIntegrableError("nonintegrable")
    out = np.zeros_like(x)
    for block in partition:
        b = list(block)
        mass = w[b].sum()
        if mass > 0:
            pos = [a for a in b if w[a] > 0]
            out[b] = np.dot(w[pos], x[pos]) / mass
    return out


def measurable_version(g, partition: Sequence[Sequence[int]], q: Measure,
                       tol: float = DEFAULT_TOL) -> np.ndarray:
    """A block-constant q-version of ``g``.

    On q-charged blocks the common q-a.s. value is used; on q-null blocks the
    block minimum, which stays inside the solid hull of ``g``.
    """
    g = np.asarray(g, dtype=float)
    w = q.weights
    out = np.empty_like(g)
    for block in partition:
        b = np.asarray(block, dtype=int)
        pos = b[w[b] > 0]
        if pos.size == 0:
            out[b] = g[b].min()
            continue
        vals = g[pos]
        if vals.max() - vals.min() > tol:
            raise MeasurabilityError("not measurable up to Q-null sets")
        out[b] = vals[0]
    return out


@dataclass(frozen=True)
class LazyFamily:
    """Members ``evaluate(n)`` for ``n`` in ``start..bound`` (inclusive)."""

    evaluate: Callable[[int], np.ndarray]
    bound: int
    start: int = 1

    def materialize(self) -> np.ndarray:
        return np.array([np.asarray(self.evaluate(n), dtype=float)
                         for n in range(self.start, self.bound + 1)])


@dataclass(frozen=True)
class BoundednessDiagnostic:
    m_schedule: tuple[float, ...]
    sups: tuple[float, ...]
    verdict: str
    max_value: float
    n_members: int
    lazy: bool
    growing: bool = False
    notes: tuple[str, ...] = field(default_factory=tuple)

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.m_schedule, self.sups))


def boundedness_diagnostic(family, q: Measure, m_schedule: Sequence[float]) -> BoundednessDiagnostic:
    """Tabulate sup_X Q[X >= M] over a family for each threshold M.

    A finite list (or 2-D array with one row per member) is always bounded.
    A ``LazyFamily`` is only sampled up to its index bound, so the verdict is
    evidence: "divergent" when the sampled maximum keeps growing with the
    index and the tail probabilities do not decrease over the thresholds the
    sample can reach.
    """
    if q.is_null:
        raise InputError("boundedness diagnostic under the null measure")
    lazy = isinstance(family, LazyFamily)
    values = family.materialize() if lazy else np.asarray(
        [np.asarray(f, dtype=float) for f in family])
    if values.size == 0 or values.shape[0] == 0:
        raise InputError("empty family")
    ms = tuple(float(m) for m in m_schedule)
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise InputError("m_schedule must be increasing")
    w = q.weights
    pos = w > 0
    charged = values[:, pos]
    max_value = float(charged.max()) if charged.size else 0.0
    sups = []
    for m in ms:
        sups.append(float(((charged >= m) * w[pos]).sum(axis=1).max()) if charged.size else 0.0)

    if not lazy:
        return BoundednessDiagnostic(ms, tuple(sups), "bounded", max_value, values.shape[0], False)

    n = charged.shape[0]
    half = charged[: max(1, n // 2)]
    first_half_max = float(half.max()) if half.size else 0.0
    growing = n > 1 and max_value > first_half_max
    reach = [s for m, s in zip(ms, sups) if m <= max_value]
    notes = []
    if growing and reach and all(s > 0 for s in reach) and all(
            b >= a for a, b in zip(reach, reach[1:])):
        verdict = "divergent"
        notes.append(f"sampled maximum {max_value:.17g} attained near index bound {family.bound}")
    elif growing:
        verdict = "inconclusive"
    elif sups[-1] == 0:
        verdict = "bounded"
    else:
        verdict = "inconclusive"
    return BoundednessDiagnostic(ms, tuple(sups), verdict, max_value, n, True, growing, tuple(notes))
