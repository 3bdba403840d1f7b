"""Run reports and their two renderings.

The machine rendering is canonical JSON: sorted keys, two-space indent,
floats with 17 significant digits, +-inf and nan as strings, Fractions as
"p/q" strings. Wall-clock timing only appears in the human rendering.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

SCHEMA_ID = "nonumeraire.report/1"


@dataclass
class RunReport:
    command: str
    inputs_digest: str
    config: dict
    outputs: dict
    verdicts: dict
    status: str
    exit_code: int
    tolerance: float
    timing: dict = field(default_factory=dict)
    messages: list = field(default_factory=list)

    def tree(self) -> dict:
        return {
            "schema": SCHEMA_ID,
            "command": self.command,
            "inputs_digest": self.inputs_digest,
            "config": self.config,
            "outputs": self.outputs,
            "verdicts": self.verdicts,
            "status": self.status,
            "exit_code": self.exit_code,
            "tolerance": self.tolerance,
            "messages": self.messages,
        }


def fmt_time(t) -> str:
    if t == math.inf:
        return "inf"
    t = Fraction(t)
    return str(t.numerator) if t.denominator == 1 else f"{t.numerator}/{t.denominator}"


def _float_token(x: float) -> str:
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    return format(x, ".17g")


def _canon(obj, indent: int) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _float_token(float(obj))
    if isinstance(obj, Fraction):
        return json.dumps(fmt_time(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        return _canon(obj.tolist(), indent)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = sorted((str(k), v) for k, v in obj.items())
        body = ",\n".join(f"{pad}{json.dumps(k, ensure_ascii=False)}: {_canon(v, indent + 1)}"
                          for k, v in items)
        return "{\n" + body + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_canon(v, indent + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _canon(v, indent + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def to_machine(report: RunReport) -> str:
    return _canon(report.tree(), 0) + "\n"


def _fmt_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v) or math.isnan(v):
            return str(v)
        return f"{v:.6g}"
    if isinstance(v, Fraction):
        return fmt_time(v)
    return str(v)


def table(headers, rows) -> list[str]:
    cells = [[_fmt_cell(c) for c in r] for r in rows]
    widths = [max([len(h)] + [len(r[i]) for r in cells]) for i, h in enumerate(headers)]
    out = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)),
           "  ".join("-" * w for w in widths)]
    out += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return out


def to_human(report: RunReport, max_rows: int = 40) -> str:
    lines = [f"command: {report.command}", f"status: {report.status}"]
    for key, val in sorted(report.verdicts.items()):
        lines.append(f"{key}: {_fmt_cell(val) if not isinstance(val, str) else val}")
    lines.append(f"tolerance: {report.tolerance:g}")
    for msg in report.messages:
        lines.append(f"note: {msg}")
    for name, section in sorted(report.outputs.items()):
        lines.append("")
        lines.append(f"[{name}]")
        lines += _human_section(section, max_rows)
    if report.timing:
        lines.append("")
        lines.append("timing: " + ", ".join(f"{k}={v:.3f}s" for k, v in sorted(report.timing.items())))
    return "\n".join(lines) + "\n"


def _human_section(section, max_rows) -> list[str]:
    if isinstance(section, dict) and "columns" in section and "rows" in section:
        rows = section["rows"]
        out = table(section["columns"], rows[:max_rows])
        if len(rows) > max_rows:
            out.append(f"... {len(rows) - max_rows} more rows")
        return out
    if isinstance(section, dict):
        out = []
        for k, v in sorted(section.items()):
            if isinstance(v, dict) and "columns" in v:
                out.append(f"{k}:")
                out += ["  " + s for s in _human_section(v, max_rows)]
            elif isinstance(v, (list, tuple)) and v and isinstance(v[0], (list, tuple)):
                out.append(f"{k}:")
                out += ["  " + "  ".join(_fmt_cell(c) for c in row) for row in v[:max_rows]]
                if len(v) > max_rows:
                    out.append(f"  ... {len(v) - max_rows} more rows")
            else:
                out.append(f"{k}: {_fmt_cell(v) if not isinstance(v, (list, tuple)) else ', '.join(_fmt_cell(c) for c in v)}")
        return out
    return [_fmt_cell(section)]


def emit_report(report: RunReport, fmt: str = "human") -> str:
    if fmt == "machine":
        return to_machine(report)
    if fmt == "human":
        return to_human(report)
    raise ValueError(f"unknown format {fmt}")
