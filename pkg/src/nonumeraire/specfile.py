"""Market specification files (YAML).

See docs/market_format.md for the grammar. Parsing collects every problem
it finds, each anchored to a line of the source, before giving up.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from .errors import InputError
from .market import (INF, CrashTimeProfile, Market, ParametricFamily, WealthProcess,
                     check_wealth_matrix, example_family)
from .prob import Filtration, SampleSpace, validate_space

FORMAT_VERSION = 1
CONFIG_DEFAULTS = {
    "tolerance": 1e-9,
    "n_cap": 256,
    "m_schedule": [10.0, 100.0, 1000.0, 10000.0],
    "max_level": 8,
    "seed": 0,
    "hull_samples": 0,
    "hull_depth": 2,
    "hull_count": 20,
}
TOP_KEYS = {"version", "name", "atoms", "times", "filtration", "generators", "families", "clock", "config"}


_SCALARS = yaml.SafeLoader("")


class SpecError(InputError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class MarketSpecDocument:
    version: int
    name: str
    market: Market
    config: dict
    clock: CrashTimeProfile | None = None
    independence_claimed: bool = False
    digest: str = ""
    source: str = ""
    raw: dict = field(default_factory=dict)

    @property
    def n_atoms(self) -> int:
        return self.market.n_atoms

    @property
    def n_times(self) -> int:
        return self.market.filtration.n_times


def _plain(node, lines: dict, path: tuple):
    """Convert a composed YAML node to Python values, recording line numbers."""
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            out[key] = _plain(v, lines, path + (key,))
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_plain(v, lines, path + (i,)) for i, v in enumerate(node.value)]
    return _SCALARS.construct_object(node, deep=True)


class _Collector:
    def __init__(self, lines: dict):
        self.lines = lines
        self.errors: list[str] = []

    def line(self, path: tuple) -> int:
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path, 1)

    def add(self, path: tuple, msg: str):
        where = ".".join(str(p) for p in path) or "<document>"
        self.errors.append(f"line {self.line(path)}: {where}: {msg}")


def parse_number(x) -> Fraction:
    """Integers, decimals, 'a/b' strings and 'inf' (returned as math.inf)."""
    if isinstance(x, bool):
        raise ValueError("boolean is not a number")
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    if isinstance(x, float):
        if math.isinf(x):
            return INF
        return Fraction(str(x))
    if isinstance(x, str):
        s = x.strip().lower()
        if s in ("inf", "infinity", ".inf", "+inf"):
            return INF
        return Fraction(s)
    raise ValueError(f"not a number: {x!r}")


def _times(spec, col: _Collector):
    path = ("times",)
    if isinstance(spec, dict):
        try:
            T = parse_number(spec.get("T", 1))
            if "dyadic" in spec:
                n = 2 ** int(spec["dyadic"])
            elif "step" in spec:
                n = T / parse_number(spec["step"])
                if n.denominator != 1:
                    raise ValueError("T is not a multiple of step")
                n = int(n)
            else:
                raise ValueError("expected 'dyadic' or 'step'")
            return tuple(Fraction(i, n) * T for i in range(n + 1))
        except (ValueError, ZeroDivisionError, TypeError) as exc:
            col.add(path, str(exc))
            return None
    if not isinstance(spec, list) or not spec:
        col.add(path, "expected a nonempty list of times")
        return None
    out = []
    for i, t in enumerate(spec):
        try:
            v = parse_number(t)
            if v == INF:
                raise ValueError("infinite time")
            out.append(v)
        except (ValueError, ZeroDivisionError) as exc:
            col.add(path + (i,), str(exc))
    return tuple(out)


def _partition(entry, labels, n, col: _Collector, path):
    if entry == "trivial":
        return [list(range(n))]
    if entry == "discrete":
        return [[i] for i in range(n)]
    if not isinstance(entry, list):
        col.add(path, "expected 'trivial', 'discrete' or a list of blocks")
        return None
    blocks = []
    for j, b in enumerate(entry):
        if not isinstance(b, list):
            col.add(path + (j,), "block must be a list of atom labels")
            return None
        block = []
        for a in b:
            if str(a) not in labels:
                col.add(path + (j,), f"unknown atom {a!r}")
                return None
            block.append(labels[str(a)])
        blocks.append(block)
    return blocks


def _matrix(rows, n_atoms, n_times, col: _Collector, path, name):
    try:
        arr = np.array([[float(parse_number(v)) for v in r] for r in rows], dtype=float)
    except (ValueError, TypeError, ZeroDivisionError) as exc:
        col.add(path, f"bad number in {name}: {exc}")
        return None
    if arr.ndim != 2 or arr.shape != (n_atoms, n_times):
        col.add(path, f"{name} has shape {arr.shape}, expected ({n_atoms}, {n_times})")
        return None
    for p in check_wealth_matrix(arr):
        col.add(path, f"{name}: {p}")
    return arr


def _config(spec, col: _Collector) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    if spec is None:
        return cfg
    if not isinstance(spec, dict):
        col.add(("config",), "expected a mapping")
        return cfg
    for key, val in spec.items():
        path = ("config", key)
        if key not in CONFIG_DEFAULTS:
            col.add(path, "unknown config key")
            continue
        try:
            if key == "tolerance":
                cfg[key] = float(val)
                if not cfg[key] > 0:
                    raise ValueError("must be positive")
            elif key == "m_schedule":
                cfg[key] = [float(v) for v in val]
                if any(b <= a for a, b in zip(cfg[key], cfg[key][1:])) or not cfg[key]:
                    raise ValueError("must be a nonempty increasing list")
            else:
                cfg[key] = int(val)
                if cfg[key] < 0:
                    raise ValueError("must be nonnegative")
        except (TypeError, ValueError) as exc:
            col.add(path, str(exc))
    return cfg


def parse_market_file(source) -> MarketSpecDocument:
    """Parse a path or YAML text into a validated document.

    Raises SpecError carrying every problem found.
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and Path(source).exists()):
        text = Path(source).read_text()
    elif isinstance(source, str) and "\n" not in source and source.endswith((".yaml", ".yml", ".json")):
        raise SpecError([f"cannot read market file {source}: no such file"])
    else:
        text = str(source)
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise SpecError([f"line {line}: syntax error: {getattr(exc, 'problem', exc)}"]) from None
    if node is None or not isinstance(node, yaml.MappingNode):
        raise SpecError(["line 1: document must be a mapping"])
    lines: dict = {}
    doc = _plain(node, lines, ())
    col = _Collector(lines)

    for key in doc:
        if key not in TOP_KEYS:
            col.add((key,), "unknown key")
    version = doc.get("version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        col.add(("version",), f"unsupported version {version!r}")
    for req in ("atoms", "times", "filtration"):
        if req not in doc:
            col.add((), f"missing required key '{req}'")
    if col.errors:
        raise SpecError(col.errors)

    labels, probs = [], []
    if not isinstance(doc["atoms"], list) or not doc["atoms"]:
        col.add(("atoms",), "expected a nonempty list of [label, probability]")
    else:
        for i, entry in enumerate(doc["atoms"]):
            if not isinstance(entry, list) or len(entry) != 2:
                col.add(("atoms", i), "expected [label, probability]")
                continue
            labels.append(str(entry[0]))
            try:
                probs.append(float(parse_number(entry[1])))
            except (ValueError, ZeroDivisionError) as exc:
                col.add(("atoms", i), str(exc))
    label_index = {lab: i for i, lab in enumerate(labels)}
    times = _times(doc["times"], col)
    n = len(labels)

    parts = None
    fspec = doc["filtration"]
    if times is not None:
        if isinstance(fspec, str):
            fspec = [fspec] * len(times)
        if not isinstance(fspec, list):
            col.add(("filtration",), "expected a list of partitions")
        elif len(fspec) != len(times):
            col.add(("filtration",), f"{len(fspec)} partitions for {len(times)} times")
        else:
            parts = [_partition(e, label_index, n, col, ("filtration", i)) for i, e in enumerate(fspec)]
    space = SampleSpace(tuple(labels), np.array(probs))
    if parts is not None and all(p is not None for p in parts) and len(probs) == n:
        filt = Filtration(times, parts)
        for problem in validate_space(space, filt):
            path = ("atoms",) if "probab" in problem or "atom" in problem else ("filtration",)
            col.add(path, problem)
    else:
        filt = None

    gens = []
    for i, g in enumerate(doc.get("generators") or []):
        path = ("generators", i)
        if not isinstance(g, dict) or "rows" not in g:
            col.add(path, "generator needs 'rows'")
            continue
        name = str(g.get("name", f"X{i}"))
        if times is None:
            continue
        arr = _matrix(g["rows"], n, len(times), col, path + ("rows",), name)
        if arr is not None:
            gens.append(WealthProcess(name, arr))
    names = [g.name for g in gens]
    if len(set(names)) != len(names):
        col.add(("generators",), "generator names are not unique")

    families = []
    for i, fam in enumerate(doc.get("families") or []):
        path = ("families", i)
        if not isinstance(fam, dict):
            col.add(path, "family must be a mapping")
            continue
        kind = fam.get("kind")
        if kind == "example_2_8":
            rng = fam.get("n_range", [1, 1000])
            try:
                lo, hi = int(rng[0]), int(rng[1])
                if not 1 <= lo <= hi:
                    raise ValueError
            except (TypeError, ValueError, IndexError):
                col.add(path + ("n_range",), "n_range must be [lo, hi] with 1 <= lo <= hi")
                continue
            if times is None:
                continue
            if n != 1:
                col.add(path, "example_2_8 is deterministic and needs a single atom")
                continue
            try:
                base = example_family(times)
            except InputError as exc:
                col.add(path, str(exc))
                continue
            families.append(ParametricFamily("example_2_8", lo, hi, base.evaluator))
        elif kind == "tabulated":
            members = fam.get("members")
            if not isinstance(members, list) or not members or times is None:
                col.add(path + ("members",), "tabulated family needs a nonempty 'members' list")
                continue
            mats = []
            for j, rows in enumerate(members):
                arr = _matrix(rows, n, len(times), col, path + ("members", j), f"member {j + 1}")
                mats.append(arr)
            if all(m is not None for m in mats):
                frozen = tuple(mats)
                families.append(ParametricFamily("tabulated", 1, len(frozen),
                                                 lambda k, frozen=frozen: frozen[k - 1]))
        else:
            col.add(path + ("kind",), f"unknown family kind {kind!r}")
    if not gens and not families and "generators" not in doc and "families" not in doc:
        col.add((), "market needs generators or families")

    clock = None
    claimed = False
    if "clock" in doc:
        cspec = doc["clock"]
        path = ("clock",)
        if not isinstance(cspec, dict) or "times" not in cspec:
            col.add(path, "clock needs 'times'")
        else:
            claimed = bool(cspec.get("independence_claimed", False))
            raw = cspec["times"]
            vals = [None] * n
            if isinstance(raw, dict):
                for lab, v in raw.items():
                    if str(lab) not in label_index:
                        col.add(path + ("times", lab), f"unknown atom {lab!r}")
                        continue
                    vals[label_index[str(lab)]] = v
            elif isinstance(raw, list) and len(raw) == n:
                vals = list(raw)
            else:
                col.add(path + ("times",), "expected one time per atom")
            parsed = []
            for j, v in enumerate(vals):
                try:
                    t = parse_number(v)
                    if times is not None and t != INF and t not in times:
                        raise ValueError(f"clock time {t} is not on the grid")
                    parsed.append(t)
                except (ValueError, TypeError, ZeroDivisionError) as exc:
                    col.add(path + ("times",), f"atom {labels[j] if j < n else j}: {exc}")
            if len(parsed) == n:
                clock = CrashTimeProfile(tuple(parsed), np.array(probs))

    config = _config(doc.get("config"), col)
    if col.errors:
        raise SpecError(col.errors)
    try:
        market = Market(space, filt, tuple(gens), tuple(families), str(doc.get("name", "market")))
    except InputError as exc:
        raise SpecError([f"line 1: {exc}"]) from None
    digest = hashlib.sha256(text.encode()).hexdigest()
    return MarketSpecDocument(version, market.name, market, config, clock, claimed, digest, text, doc)


def load_matrix_file(path) -> np.ndarray:
    """A deflator matrix from YAML/JSON: ``{z: rows}``, ``{values: rows}``, a bare
    list of rows, or a machine report of ``deflate`` (outputs.z)."""
    data = yaml.safe_load(Path(path).read_text())
    if isinstance(data, dict):
        if "outputs" in data and isinstance(data["outputs"], dict):
            data = data["outputs"]
        for key in ("z", "values", "deflator"):
            if key in data:
                data = data[key]
                break
    if isinstance(data, dict) and "values" in data:
        data = data["values"]
    if isinstance(data, dict) and "rows" in data:
        # report table: the first cell of each row is the atom label
        data = [r[1:] if r and isinstance(r[0], str) else r for r in data["rows"]]
    try:
        return np.array([[float(parse_number(v)) for v in row] for row in data], dtype=float)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise InputError(f"cannot read deflator matrix from {path}: {exc}") from None
