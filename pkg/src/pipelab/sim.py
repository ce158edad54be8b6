"""Deterministic list-scheduling simulator for pipeline schedules.

Every device executes its program strictly in order.  A pass starts when the
device is free and all dependencies have finished (plus transfer time when the
dependency ran on another device).  Attention work moved by the context
exchange runs on the receiver after its own local work; the sender's pass
completes only once the remote partial output is back.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional

from .schedules import Pass, PassKind, Schedule
from .workload import CostModel, MemoryModel, pass_cost

log = logging.getLogger(__name__)

F, BI, W, BF, VF, VB = (PassKind.FORWARD, PassKind.BACKWARD_INPUT, PassKind.BACKWARD_WEIGHT,
                        PassKind.BACKWARD_FUSED, PassKind.VOCAB_FORWARD, PassKind.VOCAB_BACKWARD)


class DeadlockError(RuntimeError):
    def __init__(self, blocked: list[Pass]):
        self.blocked = blocked
        shown = ", ".join(str(ps) for ps in blocked[:8])
        super().__init__(f"simulation deadlocked; blocked passes: {shown}{' ...' if len(blocked) > 8 else ''}")


@dataclass(frozen=True)
class CommModel:
    """Transfer time = bytes / bandwidth + latency (defaults make transfers free)."""

    bandwidth: float = math.inf
    latency: float = 0
    charge_query_output: bool = True

    def time(self, nbytes) -> object:
        if nbytes == 0:
            return 0
        t = self.latency
        if self.bandwidth != math.inf:
            t = t + float(nbytes) / self.bandwidth
        return t

    @property
    def free(self) -> bool:
        return self.bandwidth == math.inf and self.latency == 0


def unit_memory_model(p: int = 1, v: int = 1, n: int = 1) -> MemoryModel:
    """M_a = M_h = 1 and one layer, so byte figures read directly in M_a units."""
    return MemoryModel(Fraction(1), Fraction(1), Fraction(1), p, v, n, layers=1)


@dataclass(frozen=True)
class Interval:
    pass_: Pass
    start: object
    end: object
    busy: object


@dataclass(frozen=True)
class TransferEvent:
    src: int
    dst: int
    nbytes: object
    start: object
    end: object
    kind: str  # "p2p" | "exchange"


@dataclass
class Timeline:
    p: int
    devices: list[list[Interval]]
    makespan: object
    transfers: list[TransferEvent] = field(default_factory=list)

    def spans(self) -> dict[Pass, tuple]:
        return {iv.pass_: (iv.start, iv.end) for row in self.devices for iv in row}

    def busy(self, device: int):
        return sum((iv.busy for iv in self.devices[device - 1]), 0)


@dataclass
class ChunkPool:
    """Slice-sized KV/activation chunks reused across slices and microbatches."""

    allocated: int = 0
    free: list = field(default_factory=list)
    reuses: int = 0
    in_use: int = 0
    peak_in_use: int = 0

    def acquire(self) -> int:
        if self.free:
            self.reuses += 1
            chunk = self.free.pop()
        else:
            chunk = self.allocated
            self.allocated += 1
        self.in_use += 1
        self.peak_in_use = max(self.peak_in_use, self.in_use)
        return chunk

    def release(self, chunk: int):
        self.in_use -= 1
        self.free.append(chunk)


@dataclass
class MemoryLedger:
    series: list[list[tuple]]  # per device: (time, resident activation bytes)
    peak_bytes: list
    peak_slices: list[int]
    final_bytes: list
    pools: list[ChunkPool]
    logits_peak: list
    slice_bytes: object
    microbatch_bytes: object

    def peak_fraction(self, device: int) -> Fraction:
        """Peak activation of ``device`` in units of M_a."""
        return Fraction(self.peak_bytes[device - 1]) / Fraction(self.microbatch_bytes)

    @property
    def max_peak_fraction(self) -> Fraction:
        return max(self.peak_fraction(d) for d in range(1, len(self.peak_bytes) + 1))


@dataclass
class Metrics:
    bubble_fraction: object
    makespan: object
    busy_total: object
    busy: list
    idle: list
    device_bubble: list
    warmup_idle: list
    steady_idle: list
    cooldown_idle: list
    phase_spans: list[tuple]
    peak_bytes: list
    peak_slices: list[int]
    comm_bytes: list
    exchange_bytes: list
    exchange_accounted: dict  # (device, microbatch) -> bytes, per-tick budget convention


class SimResult(NamedTuple):
    timeline: Timeline
    ledger: MemoryLedger
    metrics: Metrics


def _num(x):
    """Keep exact rationals exact; collapse integral Fractions to int."""
    if isinstance(x, Fraction) and x.denominator == 1:
        return int(x)
    return x


def simulate(schedule: Schedule, cost_model: Optional[CostModel] = None,
             memory_model: Optional[MemoryModel] = None, comm_model: Optional[CommModel] = None,
             seq_len: Optional[int] = None) -> SimResult:
    sch = schedule
    cm = cost_model or CostModel()
    mm = memory_model or unit_memory_model(sch.p, sch.v, sch.n)
    comm = comm_model or CommModel()
    p, v, n, S = sch.p, sch.v, sch.n, sch.stages
    seq = n if seq_len is None else seq_len
    if seq % n:
        raise ValueError(f"seq_len {seq} is not divisible by n={n}")
    T = Fraction(seq, n)

    passes = [ps for prog in sch.programs for ps in prog]
    idx = {ps: j for j, ps in enumerate(passes)}
    N = len(passes)
    dev = [ps.device - 1 for ps in passes]
    progs = [[idx[ps] for ps in prog] for prog in sch.programs]

    # ---- costs (exact), then scaled to integers when transfers are free
    fold_vocab = sch.vocab is None
    cache: dict[tuple, tuple[Fraction, Fraction]] = {}
    exact: list[Fraction] = [Fraction(0)] * N
    chunk_cost: list[Fraction] = [Fraction(0)] * N
    for j, ps in enumerate(passes):
        key = (ps.kind, ps.slice, ps.stage == S)
        hit = cache.get(key)
        if hit is None:
            unit = Fraction(cm.beta_attn) * T * T / v
            if ps.kind.is_vocab:
                c = Fraction(pass_cost(cm, ps.kind, T))
                if sch.vocab == "distributed":
                    c /= p
                u = Fraction(0)
            else:
                c = Fraction(pass_cost(cm, ps.kind, T, ps.slice * T, output_stage=fold_vocab and ps.stage == S)) / v
                u = unit if ps.kind is F else (unit * Fraction(cm.bwd_input_mult) if ps.kind.is_backward else Fraction(0))
            hit = cache[key] = (c, u)
        exact[j], chunk_cost[j] = hit

    # ---- byte units
    slice_tensor = Fraction(mm.embedding_bytes) / n  # one slice of hidden states
    stage_layers = Fraction(mm.layers, p * v)
    xunit = stage_layers * slice_tensor  # exchanged Q/O/K/V slice of one stage

    # ---- exchange wiring
    incoming = defaultdict(list)  # receiver -> [(sender, work, chunks, early)]
    outgoing = defaultdict(list)  # sender -> [receiver]
    local = list(exact)
    work_of: dict[tuple[int, int], Fraction] = {}
    for e in sch.exchanges:
        s, r = idx[e.sender], idx[e.receiver]
        work = chunk_cost[s] * len(e.chunks)
        local[s] -= work
        work_of[(s, r)] = work
        outgoing[s].append(r)
        incoming[r].append([s, work, e.chunks, e.early])

    integral = comm.free
    if integral:
        D = 1
        for x in set(local) | set(work_of.values()):
            D = math.lcm(D, x.denominator)
        conv = lambda x: int(x * D)
        back = (lambda t: t) if D == 1 else (lambda t: _num(Fraction(t, D)))
    else:
        D = 1
        conv = float
        back = lambda t: t
    cost = [conv(x) for x in local]
    for r, lst in incoming.items():
        for item in lst:
            item[1] = conv(item[1])
    ctime = (lambda nbytes: 0) if integral else comm.time

    deps = [[idx[q] for q in sch.deps.get(ps, ()) if q in idx] for ps in passes]
    p2p_t = ctime(slice_tensor)
    dep_lat = [[0 if dev[q] == dev[j] else p2p_t for q in deps[j]] for j in range(N)]
    remote_done: dict[tuple[int, int], object] = {}
    t_qo = ctime(xunit) if comm.charge_query_output else 0

    start = [None] * N
    end = [None] * N
    free = [0] * p
    ptr = [0] * p
    finished = 0

    def kv_arrival(s: int, chunks, early: bool):
        """When the KV chunks shipped by sender pass ``s`` reach the receiver."""
        if not early:
            return start[s] + ctime(2 * len(chunks) * xunit)
        ps = passes[s]
        latest = start[s]
        for c in chunks:
            producer = idx.get(Pass(F, ps.microbatch, c, ps.stage, ps.device))
            ready = start[s] if c == ps.slice or producer is None else end[producer]
            latest = max(latest, ready + ctime(2 * xunit))
        return latest

    def try_end(j: int):
        for s, _, _, _ in incoming[j]:
            if start[s] is None:
                return None
        for r in outgoing[j]:
            if (j, r) not in remote_done:
                return None
        cur = start[j] + cost[j]
        for s, work, chunks, early in incoming[j]:
            arrival = max(start[s] + t_qo, kv_arrival(s, chunks, early))
            cur = max(cur, arrival) + work
            remote_done[(s, j)] = cur
        e = cur
        for r in outgoing[j]:
            e = max(e, remote_done[(j, r)] + t_qo)
        return e

    while finished < N:
        progressed = False
        for d in range(p):
            prog = progs[d]
            while ptr[d] < len(prog):
                j = prog[ptr[d]]
                if start[j] is None:
                    ready = free[d]
                    blocked = False
                    for q, lat in zip(deps[j], dep_lat[j]):
                        if end[q] is None:
                            blocked = True
                            break
                        if end[q] + lat > ready:
                            ready = end[q] + lat
                    if blocked:
                        break
                    start[j] = ready
                    progressed = True
                e = try_end(j)
                if e is None:
                    break
                end[j] = e
                free[d] = e
                ptr[d] += 1
                finished += 1
                progressed = True
        if not progressed:
            blocked = [passes[progs[d][ptr[d]]] for d in range(p) if ptr[d] < len(progs[d])]
            raise DeadlockError(blocked)

    # ---- transfers and communication volume
    p2p_count = [0] * p
    exch_bytes = [Fraction(0)] * p
    raw = []
    for j in range(N):
        for q in deps[j]:
            if dev[q] != dev[j]:
                p2p_count[dev[q]] += 1
                raw.append((end[q], dev[q] + 1, dev[j] + 1, "p2p", slice_tensor, end[q] + p2p_t))
    comm_bytes = [c * slice_tensor for c in p2p_count]
    for e in sch.exchanges:
        s, r = idx[e.sender], idx[e.receiver]
        out = (1 + 2 * len(e.chunks)) * xunit
        comm_bytes[dev[s]] += out
        comm_bytes[dev[r]] += xunit
        exch_bytes[dev[s]] += out
        exch_bytes[dev[r]] += xunit
        raw.append((start[s], dev[s] + 1, dev[r] + 1, "exchange", out,
                    max(start[s] + t_qo, kv_arrival(s, e.chunks, e.early))))
        raw.append((remote_done[(s, r)], dev[r] + 1, dev[s] + 1, "exchange", xunit,
                    remote_done[(s, r)] + t_qo))
    raw.sort(key=lambda x: x[:4])
    transfers = [TransferEvent(a_, b_, nb, back(t0), back(t1), kind) for t0, a_, b_, kind, nb, t1 in raw]

    # per-tick exchange budget: Q+O plus the cap on KV slices any sender may ship
    accounted: dict[tuple[int, int], Fraction] = defaultdict(Fraction)
    if sch.ticks and p > 1:
        members: dict[tuple, list[Pass]] = defaultdict(list)
        for ps, tick in sch.ticks.items():
            if tick[1] == "F":
                members[tick].append(ps)
        for tick, mem in members.items():
            if len(mem) < 2:
                continue
            juncture = len({ps.microbatch for ps in mem}) > 1
            cap = (n - 1) // 2 if juncture else (p - 1) // 2
            for ps in mem:
                accounted[(ps.device, ps.microbatch)] += (2 + 2 * cap) * xunit

    # ---- timeline
    received = defaultdict(Fraction)
    for (s_, r_), w in work_of.items():
        received[r_] += w
    rows = [[] for _ in range(p)]
    for d in range(p):
        for j in progs[d]:
            busy = _num(local[j] + received[j]) if j in received else _num(local[j])
            rows[d].append(Interval(passes[j], back(start[j]), back(end[j]), busy))
    makespan = back(max(end, default=0))
    timeline = Timeline(p, rows, makespan, transfers)

    ledger = _memory(sch, timeline, mm)
    metrics = _metrics(sch, timeline, ledger, comm_bytes, exch_bytes, dict(accounted))
    return SimResult(timeline, ledger, metrics)


def _memory(sch: Schedule, timeline: Timeline, mm: MemoryModel) -> MemoryLedger:
    p = sch.p
    unit = Fraction(mm.microbatch_activation_bytes) / (sch.n * sch.p * sch.v)
    logit_unit = Fraction(mm.logits_bytes) / sch.n
    if sch.vocab == "distributed":
        logit_unit /= p
    series, peaks, peak_slices, finals, pools, logits_peak = [], [], [], [], [], []
    for d in range(p):
        events = []
        for iv in timeline.devices[d]:
            ps = iv.pass_
            if ps.kind is F:
                events.append((iv.start, 1, ps))
            elif ps.kind.is_backward:
                events.append((iv.end, -1, ps))
        pool = ChunkPool()
        held: dict[tuple, int] = {}
        count, peak = 0, 0
        s = [(0, Fraction(0))]
        for t, delta, ps in events:  # program order is time order on one device
            key = (ps.microbatch, ps.slice, ps.stage)
            if delta > 0:
                held[key] = pool.acquire()
            else:
                pool.release(held.pop(key))
            count += delta
            peak = max(peak, count)
            s.append((t, count * unit))
        lcount, lpeak = 0, 0
        for iv in timeline.devices[d]:
            if iv.pass_.kind is VF:
                lcount += 1
            elif iv.pass_.kind is VB:
                lcount -= 1
            lpeak = max(lpeak, lcount)
        series.append(s)
        peaks.append(peak * unit)
        peak_slices.append(peak)
        finals.append(count * unit)
        pools.append(pool)
        logits_peak.append(lpeak * logit_unit)
    return MemoryLedger(series, peaks, peak_slices, finals, pools, logits_peak, unit,
                        mm.microbatch_activation_bytes)


def _metrics(sch: Schedule, tl: Timeline, ledger: MemoryLedger, comm_bytes, exch_bytes, accounted) -> Metrics:
    p = sch.p
    busy = [tl.busy(d) for d in range(1, p + 1)]
    total = sum(busy, 0)
    mk = tl.makespan
    idle = [mk - b for b in busy]
    bubble = _num(Fraction(p * mk - total) / Fraction(total)) if total else 0
    dev_bubble = [_num(Fraction(i) / Fraction(b)) if b else 0 for i, b in zip(idle, busy)]
    warm, steady, cool, spans = [], [], [], []
    for d in range(p):
        row = tl.devices[d]
        first_b = next((iv.start for iv in row if iv.pass_.kind.is_backward), mk)
        last_f = max((iv.end for iv in row if iv.pass_.kind is F), default=first_b)
        last_f = max(last_f, first_b)
        spans.append((first_b, last_f))
        busy_in = [0, 0, 0]
        for iv in row:
            phase = 0 if iv.start < first_b else (1 if iv.start < last_f else 2)
            busy_in[phase] += iv.busy
        warm.append(first_b - busy_in[0])
        steady.append(last_f - first_b - busy_in[1])
        cool.append(mk - last_f - busy_in[2])
    return Metrics(bubble, mk, total, busy, idle, dev_bubble, warm, steady, cool, spans,
                   ledger.peak_bytes, ledger.peak_slices, comm_bytes, exch_bytes, accounted)


def bubble_fraction(timeline: Timeline) -> dict:
    """Aggregate and per-device bubble fractions of a timeline."""
    p = timeline.p
    busy = [timeline.busy(d) for d in range(1, p + 1)]
    total = sum(busy, 0)
    mk = timeline.makespan
    agg = _num(Fraction(p * mk - total) / Fraction(total)) if total else 0
    return {"bubble_fraction": agg,
            "per_device": [_num(Fraction(mk - b) / Fraction(b)) if b else 0 for b in busy]}
