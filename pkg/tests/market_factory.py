"""Random finite markets shared by the property and acceptance suites."""
from fractions import Fraction

import numpy as np

from nonumeraire import Filtration, Market, SampleSpace, make_wealth_process


def random_filtration(rng, n_atoms, n_times):
    atoms = list(range(n_atoms))
    parts = [[atoms]] if rng.random() < 0.7 else [[atoms[: n_atoms // 2], atoms[n_atoms // 2:]]]
    parts[0] = [b for b in parts[0] if b]
    for _ in range(1, n_times):
        nxt = []
        for b in parts[-1]:
            if len(b) > 1 and rng.random() < 0.6:
                perm = list(rng.permutation(b))
                cut = int(rng.integers(1, len(b)))
                nxt += [sorted(int(x) for x in perm[:cut]), sorted(int(x) for x in perm[cut:])]
            else:
                nxt.append(list(b))
        parts.append(nxt)
    return parts


def random_process(rng, parts, n_atoms, n_times, adapted, death=0.25):
    x = np.ones((n_atoms, n_times))
    for t in range(1, n_times):
        units = parts[t] if adapted else [[a] for a in range(n_atoms)]
        for b in units:
            ret = 0.0 if rng.random() < death else float(rng.uniform(0.3, 2.5))
            x[b, t] = x[b, t - 1] * ret
    return x


def random_market(rng, max_atoms=6, max_times=4, max_gens=4, adapted=None):
    n_atoms = int(rng.integers(2, max_atoms + 1))
    n_times = int(rng.integers(2, max_times + 1))
    n_gens = int(rng.integers(1, max_gens + 1))
    if adapted is None:
        adapted = bool(rng.random() < 0.6)
    probs = rng.dirichlet(np.ones(n_atoms))
    probs = probs / probs.sum()
    parts = random_filtration(rng, n_atoms, n_times)
    gens = tuple(make_wealth_process(f"X{i}", random_process(rng, parts, n_atoms, n_times, adapted))
                 for i in range(n_gens))
    space = SampleSpace(tuple(f"w{i}" for i in range(n_atoms)), probs)
    filt = Filtration(tuple(Fraction(i) for i in range(n_times)), parts)
    return Market(space, filt, gens)


def random_grid_market(rng, level=8, max_atoms=6, max_gens=3, n_events=4, p_never=0.15):
    """A market on D_level of [0,1] whose atoms crash at random dyadic times.

    Generator 0 survives exactly until each atom's crash time; the others die
    earlier at random. Prices move only at a few event times, so the market is
    piecewise constant on the fine grid.
    """
    n = 2**level
    n_atoms = int(rng.integers(3, max_atoms + 1))
    n_gens = int(rng.integers(2, max_gens + 1))
    probs = rng.dirichlet(np.ones(n_atoms))
    crash = [None if rng.random() < p_never else int(rng.integers(1, n + 1)) for _ in range(n_atoms)]
    events = sorted(set(int(e) for e in rng.integers(1, n + 1, size=n_events)))
    reveal = sorted(set(int(e) for e in rng.integers(1, n + 1, size=2)))
    parts = []
    blocks = [list(range(n_atoms))]
    for i in range(n + 1):
        if i in reveal:
            nxt = []
            for b in blocks:
                if len(b) > 1:
                    cut = int(rng.integers(1, len(b)))
                    nxt += [b[:cut], b[cut:]]
                else:
                    nxt.append(b)
            blocks = nxt
        parts.append([list(b) for b in blocks])
    gens = []
    for g in range(n_gens):
        x = np.ones((n_atoms, n + 1))
        for a in range(n_atoms):
            death = crash[a]
            if g > 0 and rng.random() < 0.5:
                death = int(rng.integers(1, n + 1)) if death is None else int(rng.integers(1, death + 1))
            for i in range(1, n + 1):
                if death is not None and i >= death:
                    x[a, i] = 0.0
                elif i in events:
                    x[a, i] = x[a, i - 1] * float(rng.uniform(0.5, 2.0))
                else:
                    x[a, i] = x[a, i - 1]
        gens.append(make_wealth_process(f"X{g}", x))
    space = SampleSpace(tuple(f"w{i}" for i in range(n_atoms)), probs)
    filt = Filtration(tuple(Fraction(i, n) for i in range(n + 1)), parts)
    return Market(space, filt, tuple(gens))
