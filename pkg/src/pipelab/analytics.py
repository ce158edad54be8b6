"""Closed-form memory and bubble formulas for every scheme, plus simulator comparison."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .schedules import Scheme
from .workload import CostModel

SOFT_WIDEN = Fraction(1, 10)


def _sizes(p, m, n, v):
    if min(p, m, n, v) < 1:
        raise ValueError("p, m, n and v must be positive")


def memory_multiplier(scheme, p: int, m: int, n: int = 1, v: int = 1, saturate: bool = False) -> Fraction:
    """Peak activation per device in units of M_a.

    With ``saturate`` the value is capped at m/p: a device never holds more
    than all of its own layers' activations for every microbatch, so with
    very few microbatches the steady state is never reached.
    """
    scheme = Scheme(scheme)
    _sizes(p, m, n, v)
    if scheme in (Scheme.GPIPE, Scheme.TERAPIPE):
        out = Fraction(m, p)
    elif scheme in (Scheme.ONE_F_ONE_B, Scheme.ZBV):
        out = Fraction(1)
    elif scheme is Scheme.INTERLEAVED:
        out = 1 + Fraction(p - 1, v * p)
    elif scheme is Scheme.VHALF:
        out = Fraction(1, 2) + Fraction(1, p)
    else:
        out = Fraction(1, p) + Fraction(2 * (p - 1), n * v * p)
    if saturate:
        out = min(out, Fraction(m, p))
    return out


def steady_state_reached(scheme, p: int, m: int, n: int = 1, v: int = 1) -> bool:
    """True when the closed-form peak is not capped by the microbatch count."""
    return memory_multiplier(scheme, p, m, n, v) <= Fraction(m, p)


def slim_acc_memory(p: int, n: int, M_a=1) -> Fraction:
    """Accumulated activation on device 1 of plain slice-wise 1F1B."""
    if n < p:
        raise ValueError("n must be at least p")
    return (1 + Fraction(2 * (p - 1), n)) * Fraction(M_a) / p


@dataclass(frozen=True)
class Bound:
    lower: Fraction
    upper: Fraction
    exact: bool = False
    soft: bool = False  # endpoints are approximate; compare against a widened interval

    def contains(self, x, widen: Fraction = SOFT_WIDEN) -> bool:
        x = Fraction(x)
        if self.exact:
            return x == self.lower
        lo, hi = self.lower, self.upper
        if self.soft:
            lo, hi = lo * (1 - widen), hi * (1 + widen)
        return lo <= x <= hi

    @property
    def value(self) -> Fraction:
        return self.upper


def bubble_bounds(scheme, p: int, m: int, n: int = 1, v: int = 1) -> Bound:
    """Bubble fraction: exact value, upper bound (lower 0) or approximate interval."""
    scheme = Scheme(scheme)
    _sizes(p, m, n, v)
    if scheme in (Scheme.GPIPE, Scheme.ONE_F_ONE_B):
        x = Fraction(p - 1, m)
        return Bound(x, x, exact=True)
    if scheme is Scheme.INTERLEAVED:
        x = Fraction(p - 1, v * m)
        return Bound(x, x, exact=True)
    if scheme is Scheme.TERAPIPE:
        return Bound(Fraction(0), Fraction(p - 1, n * m))
    if scheme is Scheme.ZBV:
        return Bound(Fraction(0), Fraction(2 * (p - 1), 3 * m), soft=True)
    if scheme is Scheme.VHALF:
        return Bound(Fraction(p, 2 * m), Fraction(1, 3) + Fraction(p, 2 * m), soft=True)
    return Bound(Fraction(0), Fraction(p - 1, n * v * m))


def slimpipe_attention_asymptote(p: int, m: int, n: int, v: int = 1) -> Fraction:
    """Bubble fraction of slice-wise 1F1B when attention dominates the cost."""
    _sizes(p, m, n, v)
    return Fraction((p - 1) * p, (n + 1) * n * v * m)


@dataclass(frozen=True)
class SchemeFormulas:
    scheme: Scheme

    def memory_multiplier(self, p, m, n=1, v=1) -> Fraction:
        return memory_multiplier(self.scheme, p, m, n, v)

    def bubble_bounds(self, p, m, n=1, v=1) -> Bound:
        return bubble_bounds(self.scheme, p, m, n, v)


FORMULAS = {s: SchemeFormulas(s) for s in Scheme}


def fig6a_curve(p: int, ns: Iterable[int], v: int = 1) -> list[tuple[int, Fraction]]:
    """SlimPipe memory multiplier against the slice count."""
    return [(n, memory_multiplier(Scheme.SLIMPIPE, p, 1 << 30, n, v)) for n in ns]


# ----------------------------------------------------------------- comparison


@dataclass(frozen=True)
class ReportRow:
    scheme: str
    p: int
    v: int
    m: int
    n: int
    memory_formula: Fraction
    memory_sim: Fraction
    bubble_lower: Fraction
    bubble_upper: Fraction
    bubble_sim: Fraction
    memory_delta: Fraction
    bubble_delta: Fraction
    memory_ok: bool
    bubble_ok: bool

    @property
    def flagged(self) -> bool:
        return not (self.memory_ok and self.bubble_ok)


REPORT_COLUMNS = [f for f in ReportRow.__dataclass_fields__]


def _normalize_point(pt) -> tuple:
    if isinstance(pt, dict):
        return (Scheme(pt["scheme"]), int(pt["p"]), int(pt["m"]), int(pt.get("n", 1)), int(pt.get("v", 1)))
    scheme, p, m, *rest = pt
    n = rest[0] if rest else 1
    v = rest[1] if len(rest) > 1 else 1
    return Scheme(scheme), int(p), int(m), int(n), int(v)


def compare_point(scheme, p, m, n=1, v=1, cost: Optional[CostModel] = None) -> ReportRow:
    """Simulate one configuration (unit memory model, linear costs) against the closed forms."""
    from .runner import run_point

    scheme = Scheme(scheme)
    cost = cost or CostModel()
    exchange = "on" if scheme is Scheme.SLIMPIPE else "off"
    res = run_point(scheme, p, m, n, v, cost=cost, exchange=exchange)
    mem_sim = res.ledger.max_peak_fraction
    mem_f = memory_multiplier(scheme, p, m, n, v, saturate=True)
    bound = bubble_bounds(scheme, p, m, n, v)
    b = Fraction(res.metrics.bubble_fraction)
    if bound.exact:
        bdelta = b - bound.lower
    elif b > bound.upper:
        bdelta = b - bound.upper
    elif b < bound.lower:
        bdelta = b - bound.lower
    else:
        bdelta = Fraction(0)
    return ReportRow(scheme.value, p, v, m, n, mem_f, mem_sim, bound.lower, bound.upper, b,
                     mem_sim - mem_f, bdelta, mem_sim == mem_f, bound.contains(b))


def compare_report(grid: Iterable, cost: Optional[CostModel] = None) -> list[ReportRow]:
    return [compare_point(*_normalize_point(pt), cost=cost) for pt in grid]


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, Fraction):
        return f"{float(x):.6g}"
    return str(x)


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS + ["flagged"])
    for r in rows:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in REPORT_COLUMNS] + [_fmt(r.flagged)])
    return buf.getvalue()


def report_markdown(rows: Sequence[ReportRow]) -> str:
    cols = REPORT_COLUMNS + ["flagged"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        d = asdict(r)
        lines.append("| " + " | ".join(_fmt(d[c]) for c in REPORT_COLUMNS) + f" | {_fmt(r.flagged)} |")
    return "\n".join(lines) + "\n"
