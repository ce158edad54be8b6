"""Deterministic Gantt export of a simulated timeline (JSON or SVG).

Both forms are rendered from the same interval records, so they carry
identical data.  Rows are devices; colors depend on the pass kind and the
parity of its stage; labels read ``k.i`` (microbatch.slice).
"""

from __future__ import annotations

import json
from fractions import Fraction
from typing import Optional
from xml.sax.saxutils import escape

from .sim import Timeline

TIMELINE_FORMAT = "pipelab.timeline/1"

# (kind, stage parity) -> fill; parity 1 = odd stage
PALETTE = {
    ("F", 1): "#4e79a7", ("F", 0): "#a0cbe8",
    ("B", 1): "#59a14f", ("B", 0): "#8cd17d",
    ("BW", 1): "#59a14f", ("BW", 0): "#8cd17d",
    ("W", 1): "#b6992d", ("W", 0): "#f1ce63",
    ("VF", 1): "#e15759", ("VF", 0): "#e15759",
    ("VB", 1): "#ff9d9a", ("VB", 0): "#ff9d9a",
}

ROW_HEIGHT = 24
LABEL_WIDTH = 40
UNIT_WIDTH = 20


def _time(x, scale) -> float:
    return round(float(Fraction(x) * Fraction(scale)) if isinstance(x, (int, Fraction)) else float(x) * float(scale), 9)


def interval_records(timeline: Optional[Timeline], time_scale=1) -> list[dict]:
    if timeline is None:
        return []
    out = []
    for d, row in enumerate(timeline.devices, start=1):
        for iv in row:
            ps = iv.pass_
            out.append({
                "device": d,
                "kind": ps.kind.value,
                "microbatch": ps.microbatch,
                "slice": ps.slice,
                "stage": ps.stage,
                "start": _time(iv.start, time_scale),
                "end": _time(iv.end, time_scale),
                "label": f"{ps.microbatch}.{ps.slice}",
                "color": PALETTE[(ps.kind.value, ps.stage % 2)],
            })
    return out


def timeline_document(timeline: Optional[Timeline], time_scale=1) -> dict:
    p = timeline.p if timeline is not None else 0
    recs = interval_records(timeline, time_scale)
    devices = [{"device": d, "intervals": [
        {k: r[k] for k in ("kind", "microbatch", "slice", "stage", "start", "end", "label", "color")}
        for r in recs if r["device"] == d]} for d in range(1, p + 1)]
    transfers = []
    if timeline is not None:
        for t in timeline.transfers:
            transfers.append({"src": t.src, "dst": t.dst, "kind": t.kind, "bytes": _time(t.nbytes, 1),
                              "start": _time(t.start, time_scale), "end": _time(t.end, time_scale)})
    makespan = _time(timeline.makespan, time_scale) if timeline is not None else 0.0
    return {"format": TIMELINE_FORMAT, "p": p, "makespan": makespan, "time_scale": float(time_scale),
            "devices": devices, "transfers": transfers}


def _svg(timeline: Optional[Timeline], time_scale=1) -> str:
    doc = timeline_document(timeline, time_scale)
    p, span = doc["p"], doc["makespan"]
    scale = UNIT_WIDTH / float(time_scale) if time_scale else UNIT_WIDTH
    width = LABEL_WIDTH + int(round(span * scale)) + 10
    height = p * ROW_HEIGHT + 10
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" data-format="{TIMELINE_FORMAT}" data-makespan="{span!r}">',
    ]
    for dev in doc["devices"]:
        d = dev["device"]
        y = (d - 1) * ROW_HEIGHT + 5
        lines.append(f'<g data-device="{d}">')
        lines.append(f'<text x="4" y="{y + 16}" font-size="12" font-family="monospace">d{d}</text>')
        for r in dev["intervals"]:
            x = LABEL_WIDTH + r["start"] * scale
            w = (r["end"] - r["start"]) * scale
            lines.append(
                f'<rect x="{x:.3f}" y="{y}" width="{w:.3f}" height="{ROW_HEIGHT - 4}" fill="{r["color"]}" '
                f'stroke="#333" stroke-width="0.5" data-kind="{r["kind"]}" data-microbatch="{r["microbatch"]}" '
                f'data-slice="{r["slice"]}" data-stage="{r["stage"]}" data-start="{r["start"]!r}" '
                f'data-end="{r["end"]!r}"><title>{escape(r["kind"])} {r["label"]} s{r["stage"]}</title></rect>')
            if w >= 14:
                lines.append(f'<text x="{x + w / 2:.3f}" y="{y + 14}" font-size="9" text-anchor="middle" '
                             f'font-family="monospace">{r["label"]}</text>')
        lines.append("</g>")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def gantt_export(timeline: Optional[Timeline], fmt: str = "json", time_scale=1) -> str:
    """Render ``timeline`` as a JSON or SVG document; ``None`` gives an empty one."""
    if fmt == "json":
        return json.dumps(timeline_document(timeline, time_scale), indent=1, sort_keys=True) + "\n"
    if fmt == "svg":
        return _svg(timeline, time_scale)
    raise ValueError(f"unknown gantt format {fmt!r} (expected svg or json)")
