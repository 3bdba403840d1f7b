"""Command-line entry point: ``nonumeraire <command> [market.yaml] [flags]``."""
from __future__ import annotations

import argparse
import hashlib
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from .deflator import (build_discrete_deflator, crash_measures, make_deflator,
                       market_crash_time, nupbr_check, verify_deflator)
from .dyadic import independent_clock_deflator, run_dyadic
from .errors import InputError, NumeraireError, SolverError, StageError
from .market import INF, example_2_8_market, hull_sample
from .report import RunReport, emit_report, fmt_time
from .specfile import CONFIG_DEFAULTS, MarketSpecDocument, SpecError, load_matrix_file, parse_market_file

COMMANDS = ("validate", "deflate", "verify", "nupbr", "hull", "crash", "dyadic", "clock", "example")
DIAGNOSTIC = {"validate", "nupbr", "hull", "crash", "example"}
EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3
EXAMPLE_N_CAP = 1000


def merge_config(file_config: dict | None, overrides: dict | None) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    cfg.update(file_config or {})
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return cfg


def _labels(doc):
    return list(doc.market.space.labels)


def _matrix_section(values, labels, times):
    return {"columns": ["atom"] + [fmt_time(t) for t in times],
            "rows": [[lab] + [float(v) for v in row] for lab, row in zip(labels, values)]}


def _tau_section(tau, labels):
    return {
        "per_atom": {lab: fmt_time(t) for lab, t in zip(labels, tau.times)},
        "distribution": {fmt_time(t): m for t, m in tau.distribution.items()},
    }


def _verification_section(rep):
    return {
        "columns": ["s_index", "t_index", "process", "block", "measure", "ratio"],
        "rows": [[s, t, pr, b, m, r] for s, t, pr, b, m, r in rep.rows()],
        "max_ratio": rep.max_ratio,
        "max_by_measure": rep.max_by_measure(),
        "positivity_ok": rep.positivity_ok,
        "z0_ok": rep.z0_ok,
        "adapted_ok": rep.adapted_ok,
        "verdict": rep.verdict,
        "tolerance": rep.tol,
    }


def _diag_section(diags):
    return {
        "columns": ["t", "verdict", "max_value"] + [f"M={m:g}" for m in diags[0][1].m_schedule],
        "rows": [[fmt_time(t), d.verdict, d.max_value] + list(d.sups) for t, d in diags],
    }


def _cmd_validate(doc, cfg):
    m = doc.market
    out = {"summary": {
        "name": doc.name, "atoms": doc.n_atoms, "times": doc.n_times,
        "generators": [g.name for g in m.generators],
        "families": [{"kind": f.kind, "n_range": [f.n_min, f.n_max]} for f in m.families],
        "adapted": m.adapted_flag, "clock": doc.clock is not None,
    }}
    return out, {"verdict": "valid"}, "complete"


def _cmd_deflate(doc, cfg):
    m = doc.market
    labels = _labels(doc)
    try:
        res = build_discrete_deflator(m, cfg["n_cap"], cfg["tolerance"], cfg["m_schedule"],
                                      cfg["hull_samples"], cfg["seed"])
    except StageError as exc:
        if exc.kind != "precondition":
            raise
        diags = nupbr_check(m, cfg["n_cap"], cfg["m_schedule"])
        return ({"nupbr": _diag_section(diags), "refusal": {"stage": exc.stage, "reason": exc.detail,
                                                            "time": fmt_time(exc.time)}},
                {"verdict": "refused"}, "refused")
    out = {
        "tau": _tau_section(res.tau, labels),
        "z": _matrix_section(res.z.values, labels, m.times),
        "verification": _verification_section(res.report),
    }
    verdicts = {"verdict": "pass" if res.passed else "fail", "max_ratio": res.report.max_ratio}
    if res.z_adapted is not None:
        out["z_adapted"] = _matrix_section(res.z_adapted.values, labels, m.times)
        out["verification_adapted"] = _verification_section(res.report_adapted)
        verdicts["max_ratio_adapted"] = res.report_adapted.max_ratio
    return out, verdicts, "pass" if res.passed else "fail"


def _cmd_verify(doc, cfg, deflator_path):
    if deflator_path is None:
        raise InputError("verify needs --deflator <path>")
    m = doc.market
    values = load_matrix_file(deflator_path)
    if values.shape != (m.n_atoms, m.filtration.n_times):
        raise InputError(f"deflator has shape {values.shape}, expected {(m.n_atoms, m.filtration.n_times)}")
    z = make_deflator(values, m)
    tau, _ = market_crash_time(m, cfg["n_cap"], cfg["tolerance"])
    measures = [("P", m.space.measure())] + crash_measures(m, tau)
    rep = verify_deflator(m, z, measures, cfg["hull_samples"], cfg["tolerance"], cfg["seed"], cfg["n_cap"])
    return ({"verification": _verification_section(rep), "tau": _tau_section(tau, _labels(doc))},
            {"verdict": rep.verdict, "max_ratio": rep.max_ratio}, rep.verdict)


def _cmd_nupbr(doc, cfg):
    diags = nupbr_check(doc.market, cfg["n_cap"], cfg["m_schedule"])
    overall = "divergent" if any(d.verdict == "divergent" for _, d in diags) else (
        "bounded" if all(d.verdict == "bounded" for _, d in diags) else "inconclusive")
    return {"nupbr": _diag_section(diags)}, {"verdict": overall}, "complete"


def _cmd_hull(doc, cfg):
    m = doc.market
    samples = hull_sample(m, cfg["hull_depth"], cfg["seed"], count=cfg["hull_count"], n_cap=cfg["n_cap"])
    labels = _labels(doc)
    out = {"samples": {h.name: _matrix_section(h.values, labels, m.times) for h in samples},
           "depth": cfg["hull_depth"], "count": len(samples)}
    return out, {"verdict": "complete"}, "complete"


def _cmd_crash(doc, cfg):
    m = doc.market
    tau, static = market_crash_time(m, cfg["n_cap"], cfg["tolerance"])
    labels = _labels(doc)
    out = {
        "tau": _tau_section(tau, labels),
        "f_hat": _matrix_section(np.column_stack([r.f_hat for r in static]), labels, m.times),
        "kkt": {"columns": ["t", "kkt_residual", "objective", "support_size"],
                "rows": [[fmt_time(t), r.kkt_residual, r.objective, int(r.support.sum())]
                         for t, r in zip(m.times, static)]},
    }
    return out, {"verdict": "complete"}, "complete"


def _table_section(tab):
    rows = [[fmt_time(t), k, fmt_time(r), fmt_time(u)] + list(sups)
            for t, k, r, u, charged, sups in tab.rows if charged]
    return {
        "columns": ["t", "k", "r", "u"] + [f"M={m:g}" for m in tab.m_schedule],
        "rows": rows,
        "null_rows": tab.null_rows,
        "summary": {fmt_time(t): list(v) for t, v in tab.summary.items()},
        "uniform_evidence": {fmt_time(t): v for t, v in tab.verdicts.items()},
    }


def _cmd_dyadic(doc, cfg):
    m = doc.market
    res = run_dyadic(m, max_level=cfg["max_level"], tol=cfg["tolerance"], m_schedule=cfg["m_schedule"],
                     n_cap=cfg["n_cap"], hull_samples=cfg["hull_samples"], seed=cfg["seed"])
    labels = _labels(doc)
    levels = {"columns": ["k", "charged_intervals", "checked", "max_ratio", "verdict"],
              "rows": [[lv.k, len([r for r in lv.conditionals if r != INF]), lv.report is not None,
                        lv.report.max_ratio if lv.report else None,
                        lv.report.verdict if lv.report else "unchecked"] for lv in res.levels]}
    limits = {"columns": ["t", "converged", "gap_1", "gap_2", "gap_3"],
              "rows": [[fmt_time(m.times[ti]), lim.converged] + list(lim.gaps) + [None] * (3 - len(lim.gaps))
                       for ti, lim in res.limits.items()]}
    gsp = {"columns": ["s", "t", "measure", "worst_process", "ratio"],
           "rows": [[fmt_time(g.s), fmt_time(g.t), g.measure, g.process, g.ratio] for g in res.gsp]}
    markov = {"columns": ["t", "k", "r", "M", "lhs", "rhs", "ok"],
              "rows": [[fmt_time(t), k, fmt_time(r), mm, lhs, rhs, ok] for t, k, r, mm, lhs, rhs, ok in res.markov]}
    out = {"levels": levels, "z_inf": _matrix_section(res.z_inf.values, labels, m.times),
           "limits": limits, "gsp": gsp, "uniform_table": _table_section(res.uniform),
           "deflator_table": _table_section(res.deflator_table), "markov": markov,
           "limit_depth": res.limit_depth}
    verdicts = {"verdict": "pass" if res.passed else "fail", "levels_pass": res.levels_pass,
                "converged": res.converged, "max_gap": res.max_gap, "gsp_max": res.gsp_max,
                "markov_pass": res.markov_pass}
    return out, verdicts, "pass" if res.passed else "fail"


def _cmd_clock(doc, cfg):
    if doc.clock is None:
        raise InputError("clock command needs a 'clock' stanza")
    m = doc.market
    try:
        res = independent_clock_deflator(m, doc.clock, K=cfg["max_level"], tol=cfg["tolerance"],
                                         n_cap=cfg["n_cap"], hull_samples=cfg["hull_samples"],
                                         seed=cfg["seed"])
    except StageError as exc:
        if exc.stage != "clock":
            raise
        return {"rejection": {"reason": exc.detail}}, {"verdict": "rejected"}, "fail"
    labels = _labels(doc)
    out = {"z": _matrix_section(res.z.values, labels, m.times),
           "jensen": {"columns": ["k", "t", "max_lhs_minus_rhs", "ok"],
                      "rows": [[k, fmt_time(t), w, ok] for k, t, w, ok in res.jensen]},
           "verification": _verification_section(res.report)}
    verdicts = {"verdict": "pass" if res.passed else "fail", "jensen_ok": res.jensen_ok,
                "max_ratio": res.report.max_ratio, "converged": res.converged}
    return out, verdicts, "pass" if res.passed else "fail"


def _cmd_example(cfg):
    m = example_2_8_market()
    n_cap = cfg["n_cap"]
    diags = nupbr_check(m, n_cap, cfg["m_schedule"])
    by_t = {t: d for t, d in diags}
    half, term = by_t[Fraction(1, 2)], by_t[Fraction(1)]
    refused, reason = False, ""
    try:
        build_discrete_deflator(m, n_cap, cfg["tolerance"], cfg["m_schedule"])
    except StageError as exc:
        refused, reason = exc.kind == "precondition", exc.detail
    out = {
        "terminal": {"t": "1", "verdict": term.verdict, "max_value": term.max_value,
                     "value_set_is_zero": bool(term.max_value == 0)},
        "half": {"t": "1/2", "verdict": half.verdict, "max_value": half.max_value,
                 "columns": [f"M={x:g}" for x in half.m_schedule], "rows": [list(half.sups)]},
        "nupbr": _diag_section([d for d in diags if d[0] in (Fraction(0), Fraction(1, 2), Fraction(1))]),
        "deflator": {"refused": refused, "reason": reason},
    }
    ok = term.verdict == "bounded" and half.verdict == "divergent" and refused
    return out, {"verdict": "demonstrated" if ok else "unexpected", "n_cap": n_cap}, "complete" if ok else "fail"


def run_command(doc: MarketSpecDocument | None, command: str, overrides: dict | None = None,
                deflator_path=None) -> RunReport:
    if command not in COMMANDS:
        raise InputError(f"unknown command {command}")
    file_cfg = doc.config if doc is not None else {}
    if command == "example":
        file_cfg = dict(file_cfg)
        file_cfg.setdefault("n_cap", EXAMPLE_N_CAP)
        if doc is None:
            file_cfg["n_cap"] = EXAMPLE_N_CAP
    cfg = merge_config(file_cfg, overrides)
    if command != "example" and doc is None:
        raise InputError(f"{command} needs a market file")
    start = time.perf_counter()
    if command == "example":
        outputs, verdicts, status = _cmd_example(cfg)
    elif command == "verify":
        outputs, verdicts, status = _cmd_verify(doc, cfg, deflator_path)
    else:
        handler = globals()[f"_cmd_{command}"]
        outputs, verdicts, status = handler(doc, cfg)
    elapsed = time.perf_counter() - start
    digest = doc.digest if doc is not None else hashlib.sha256(b"example_2_8").hexdigest()
    if command == "verify":
        digest = hashlib.sha256((digest + Path(deflator_path).read_text()).encode()).hexdigest()
    if status in ("pass", "complete"):
        code = EXIT_OK
    else:
        code = EXIT_FAIL
    return RunReport(command, digest, cfg, outputs, verdicts, status, code, cfg["tolerance"],
                     {"total": elapsed})


def _error_report(command, code, status, messages, digest="") -> RunReport:
    return RunReport(command, digest, {}, {}, {"verdict": status}, status, code, 0.0, {}, messages)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nonumeraire",
                                 description="Construct and verify supermartingale deflators "
                                             "for markets without a numéraire.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("market", nargs="?", help="market specification (YAML)")
    ap.add_argument("--tol", type=float, dest="tolerance")
    ap.add_argument("--n-cap", type=int, dest="n_cap")
    ap.add_argument("--max-level", type=int, dest="max_level")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--format", choices=("human", "machine"), default="human")
    ap.add_argument("--out", help="write the report here instead of stdout")
    ap.add_argument("--deflator", help="deflator matrix file (for verify)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"tolerance": args.tolerance, "n_cap": args.n_cap, "max_level": args.max_level,
                 "seed": args.seed}
    try:
        doc = parse_market_file(args.market) if args.market else None
        report = run_command(doc, args.command, overrides, args.deflator)
    except SpecError as exc:
        report = _error_report(args.command, EXIT_INPUT, "input-error", exc.errors)
    except StageError as exc:
        code = {"solver": EXIT_INTERNAL, "precondition": EXIT_FAIL}.get(exc.kind, EXIT_INPUT)
        report = _error_report(args.command, code, f"{exc.kind}-error", [str(exc)])
    except (InputError, FileNotFoundError) as exc:
        report = _error_report(args.command, EXIT_INPUT, "input-error", [str(exc)])
    except (SolverError, NumeraireError) as exc:
        report = _error_report(args.command, EXIT_INTERNAL, "internal-error", [str(exc)])
    except Exception as exc:  # noqa: BLE001 - last-resort exit code for the CLI contract
        report = _error_report(args.command, EXIT_INTERNAL, "internal-error",
                               [f"{type(exc).__name__}: {exc}"])
    text = emit_report(report, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if report.exit_code == EXIT_INPUT and args.format == "human" and not args.out:
        for msg in report.messages:
            print(msg, file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
