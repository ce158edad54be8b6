"""Command line: simulate, sweep, verify, analyze and export-schedule.

Exit codes: 0 ok, 2 invalid configuration, 3 schedule validation failure,
4 verification failure.  ``PIPELAB_LOG_LEVEL`` sets the log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .analytics import bubble_bounds, compare_point, memory_multiplier, report_csv, slimpipe_attention_asymptote
from .exchange import exchange_volume
from .gantt import gantt_export
from .runner import ScheduleInvalid, build_schedule
from .scenario import Scenario, ScenarioError, SweepPoint, apply_overrides, load_scenario, load_sweep
from .schedules import Scheme, schedule_from_dict, schedule_to_dict, validate_schedule
from .sim import SimResult, simulate, unit_memory_model
from .workload import CostModel, activation_bytes, ceil_bytes

log = logging.getLogger("pipelab")

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_VERIFY = 0, 2, 3, 4

METRICS_COLUMNS = ["scheme", "p", "v", "m", "n", "bubble_fraction", "peak_bytes", "comm_bytes", "peak_fraction"]
SWEEP_COLUMNS = ["index", *METRICS_COLUMNS, "seq_len", "exchange", "error"]
DEVICE_COLUMNS = ["device", "busy", "idle", "bubble_fraction", "warmup_idle", "steady_idle", "cooldown_idle",
                  "peak_bytes", "peak_slices", "comm_bytes", "exchange_bytes", "logits_peak_bytes"]


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def fmt(x) -> str:
    """Stable text form: integers as-is, other numbers with 12 significant digits."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, Fraction):
        return str(x.numerator) if x.denominator == 1 else f"{float(x):.12g}"
    if isinstance(x, float):
        return str(int(x)) if x.is_integer() else f"{x:.12g}"
    return str(x)


def _bytes(x, whole: bool) -> object:
    # whole bytes for real scenarios; unit models report fractions of M_a
    return ceil_bytes(x) if whole else x


# ----------------------------------------------------------------- core runs


def _default_doc(args) -> dict:
    n = args.n or 1
    return {
        "scheme": args.scheme or "1f1b",
        "model": {"name": "tiny", "layers": 8, "hidden": 64, "ffn": 256, "heads": 4, "vocab": 1000},
        "parallelism": {"pp": args.p or 1, "stages_per_device": args.v or 1},
        "run": {"seq_len": args.seq_len or 128 * n, "microbatches": args.m or 1, "slices": n},
        "cost": {"alpha_linear": 1, "beta_attn": 0},
        "exchange": args.exchange or "off",
    }


def scenario_from_args(args) -> Scenario:
    overrides = dict(scheme=args.scheme, p=args.p, v=args.v, m=args.m, n=args.n, seq_len=args.seq_len,
                     exchange=args.exchange, beta_attn=args.beta_attn)
    if args.vocab_parallel:
        overrides["vocab_parallel"] = True
    if getattr(args, "scenario", None):
        return apply_overrides(load_scenario(args.scenario), **overrides)
    doc = _default_doc(args)
    doc["run"]["vocab_parallel"] = bool(args.vocab_parallel)
    return Scenario.from_dict(doc)


def schedule_for(scn: Scenario, validate: bool = True):
    p, m, n, v = scn.sizes
    try:
        return build_schedule(scn.scheme, p, m, n, v, exchange=scn.exchange, vocab_parallel=scn.vocab_mode,
                              validate=validate)
    except ScheduleInvalid as exc:
        raise CliError(EXIT_VALIDATION, f"schedule validation failed: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"invalid configuration: {exc}") from None


def run_scenario(scn: Scenario, validate: bool = True) -> SimResult:
    sch = schedule_for(scn, validate)
    mm = activation_bytes(scn.model, scn.parallelism, scn.run)
    return simulate(sch, scn.cost, mm, scn.comm.model(), seq_len=scn.run.seq_len)


def metrics_row(scheme, p, v, m, n, res: SimResult, whole: bool = True) -> dict:
    peak = max(res.ledger.peak_bytes)
    return {
        "scheme": Scheme(scheme).value, "p": p, "v": v, "m": m, "n": n,
        "bubble_fraction": res.metrics.bubble_fraction,
        "peak_bytes": _bytes(peak, whole),
        "comm_bytes": _bytes(max(res.metrics.comm_bytes), whole),
        "peak_fraction": res.ledger.max_peak_fraction,
    }


def device_rows(res: SimResult, whole: bool = True) -> list[dict]:
    mt, lg = res.metrics, res.ledger
    rows = []
    for d in range(res.timeline.p):
        rows.append({
            "device": d + 1, "busy": mt.busy[d], "idle": mt.idle[d], "bubble_fraction": mt.device_bubble[d],
            "warmup_idle": mt.warmup_idle[d], "steady_idle": mt.steady_idle[d], "cooldown_idle": mt.cooldown_idle[d],
            "peak_bytes": _bytes(lg.peak_bytes[d], whole), "peak_slices": lg.peak_slices[d],
            "comm_bytes": _bytes(mt.comm_bytes[d], whole), "exchange_bytes": _bytes(mt.exchange_bytes[d], whole),
            "logits_peak_bytes": _bytes(lg.logits_peak[d], whole),
        })
    return rows


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c, "")) for c in columns])
    path.write_text(buf.getvalue())


def write_outputs(out: Path, row: dict, res: SimResult, gantt: str, time_scale, whole: bool = True) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "metrics.csv", out / "devices.csv", out / "timeline.json"]
    write_csv(written[0], METRICS_COLUMNS, [row])
    write_csv(written[1], DEVICE_COLUMNS, device_rows(res, whole))
    written[2].write_text(gantt_export(res.timeline, "json", time_scale))
    if gantt in ("svg", "json"):
        path = out / f"gantt.{gantt}"
        path.write_text(gantt_export(res.timeline, gantt, time_scale))
        written.append(path)
    return written


# ----------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    out = Path(args.out)
    if args.schedule:
        try:
            sch = schedule_from_dict(json.loads(Path(args.schedule).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot load schedule {args.schedule}: {exc}") from None
        bad = validate_schedule(sch)
        if bad:
            raise CliError(EXIT_VALIDATION, f"schedule validation failed: {bad[0]}")
        cost = load_scenario(args.scenario).cost if args.scenario else CostModel()
        res = simulate(sch, cost, unit_memory_model(sch.p, sch.v, sch.n))
        whole = False
        row = metrics_row(sch.scheme, sch.p, sch.v, sch.m, sch.n, res, whole)
    else:
        whole = True
        scn = scenario_from_args(args)
        res = run_scenario(scn)
        p, m, n, v = scn.sizes
        row = metrics_row(scn.scheme, p, v, m, n, res)
    for path in write_outputs(out, row, res, args.gantt, args.time_scale, whole):
        log.info("wrote %s", path)
    print(",".join(METRICS_COLUMNS))
    print(",".join(fmt(row[c]) for c in METRICS_COLUMNS))
    return EXIT_OK


def _sweep_one(pt: SweepPoint) -> dict:
    row = {"index": pt.index, "error": pt.error}
    scn = pt.scenario
    if scn is not None:
        p, m, n, v = scn.sizes
        row.update(scheme=scn.scheme.value, p=p, v=v, m=m, n=n, seq_len=scn.run.seq_len, exchange=scn.exchange)
        try:
            row.update(metrics_row(scn.scheme, p, v, m, n, run_scenario(scn, validate=False)))
        except CliError as exc:
            row["error"] = str(exc)
    return row


def cmd_sweep(args) -> int:
    points = load_sweep(args.grid)
    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, points))
    else:
        rows = [_sweep_one(pt) for pt in points]
    rows.sort(key=lambda r: r["index"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    sys.stdout.write((out / "sweep.csv").read_text())
    failed = [r for r in rows if r["error"]]
    for r in failed:
        log.warning("point %d: %s", r["index"], r["error"])
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suites

    if args.schedule:
        try:
            sch = schedule_from_dict(json.loads(Path(args.schedule).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_CONFIG, f"cannot load schedule {args.schedule}: {exc}") from None
        bad = validate_schedule(sch, stop_at_first=False)
        for v in bad:
            print(f"[FAIL] schedule/{v.rule}: {v}")
        if not bad:
            print(f"[PASS] schedule/{args.schedule}: no violations")
        return EXIT_VERIFY if bad else EXIT_OK
    checks = run_suites(args.suite)
    for c in checks:
        print(c.line())
    failed = sum(not c.ok for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


ANALYZE_COLUMNS = ["scheme", "p", "v", "m", "n", "memory_multiplier", "memory_saturated", "bubble_lower",
                   "bubble_upper", "bubble_exact", "attention_asymptote", "exchange_volume"]


def analyze_row(scheme, p, m, n, v) -> dict:
    scheme = Scheme(scheme)
    b = bubble_bounds(scheme, p, m, n, v)
    slim = scheme is Scheme.SLIMPIPE
    return {
        "scheme": scheme.value, "p": p, "v": v, "m": m, "n": n,
        "memory_multiplier": memory_multiplier(scheme, p, m, n, v),
        "memory_saturated": memory_multiplier(scheme, p, m, n, v, saturate=True),
        "bubble_lower": b.lower, "bubble_upper": b.upper, "bubble_exact": b.exact,
        "attention_asymptote": slimpipe_attention_asymptote(p, m, n, v) if slim else "",
        "exchange_volume": exchange_volume(p, n, 1, 1) if slim and n % p == 0 else "",
    }


def cmd_analyze(args) -> int:
    schemes = [Scheme(args.scheme)] if args.scheme else list(Scheme)
    p, m, v = args.p or 4, args.m or 4, args.v or 1
    rows = []
    for s in schemes:
        n = args.n or (p if s in (Scheme.SLIMPIPE, Scheme.TERAPIPE) else 1)
        vv = 2 if s in (Scheme.ZBV, Scheme.VHALF) else v
        if s not in (Scheme.SLIMPIPE, Scheme.TERAPIPE):
            n = 1
        try:
            rows.append(analyze_row(s, p, m, n, vv))
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
    if args.compare:
        out = []
        for r in rows:
            try:
                out.append(compare_point(r["scheme"], r["p"], r["m"], r["n"], r["v"]))
            except ValueError as exc:
                log.warning("%s: %s", r["scheme"], exc)
        sys.stdout.write(report_csv(out))
        return EXIT_OK
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANALYZE_COLUMNS)
    for r in rows:
        w.writerow([fmt(r[c]) for c in ANALYZE_COLUMNS])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_export_schedule(args) -> int:
    scn = scenario_from_args(args)
    sch = schedule_for(scn)
    text = json.dumps(schedule_to_dict(sch), separators=(",", ":"), sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ----------------------------------------------------------------- parser


def _add_config_flags(sp, scenario_arg: bool = True):
    if scenario_arg:
        sp.add_argument("scenario", nargs="?", help="scenario JSON file (flags override its values)")
    sp.add_argument("--scheme", choices=[s.value for s in Scheme])
    sp.add_argument("--p", type=int, help="pipeline devices")
    sp.add_argument("--v", type=int, help="stages per device")
    sp.add_argument("--m", type=int, help="microbatches")
    sp.add_argument("--n", type=int, help="slices per sequence")
    sp.add_argument("--seq-len", type=int, dest="seq_len")
    sp.add_argument("--beta-attn", type=float, dest="beta_attn", help="attention cost per query-key token pair")
    sp.add_argument("--exchange", choices=["off", "on", "early"])
    sp.add_argument("--vocab-parallel", action="store_true", dest="vocab_parallel")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pipelab", description="Pipeline schedule laboratory")
    ap.add_argument("--version", action="version", version=f"pipelab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="simulate one scenario")
    _add_config_flags(sp)
    sp.add_argument("--schedule", help="simulate a schedule JSON file instead of generating one")
    sp.add_argument("--gantt", choices=["svg", "json", "none"], default="none")
    sp.add_argument("--out", default="out")
    sp.add_argument("--time-scale", type=float, default=1.0, dest="time_scale",
                    help="seconds per work unit in exported timelines")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="run every point of a sweep file")
    sp.add_argument("grid")
    sp.add_argument("--out", default="out")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify", help="run check suites")
    sp.add_argument("suite", nargs="?", default="all", choices=["formulas", "balance", "kernel", "schedules", "all"])
    sp.add_argument("--schedule", help="validate a schedule JSON file instead")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("analyze", help="closed-form memory and bubble figures")
    _add_config_flags(sp, scenario_arg=False)
    sp.add_argument("--compare", action="store_true", help="also simulate and report deltas")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("export-schedule", help="write a schedule as JSON")
    _add_config_flags(sp)
    sp.add_argument("--out", help="output file (default stdout)")
    sp.set_defaults(func=cmd_export_schedule)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("PIPELAB_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
