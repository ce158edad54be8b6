"""Attention context exchange: per-tick load balancing and volume accounting.

A tick is a column of concurrent passes in the slice-wise 1F1B lattice.  The
pass of slice i attends i KV chunks, so loads inside a steady tick form an
arithmetic progression; the balancer moves whole chunks (plus the query slice
and the returned output slice) from heavy to light devices.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Optional, Sequence

from .schedules import ExchangeEdge, Pass, PassKind, Schedule, Scheme


@dataclass(frozen=True)
class TickLoad:
    device: int
    kv_chunks: int
    query_slices: int = 1

    def __post_init__(self):
        if self.kv_chunks < 1:
            raise ValueError("a slice attends at least its own KV chunk")


@dataclass(frozen=True)
class Transfer:
    src: int
    dst: int
    kv_chunks: tuple[int, ...]
    carries_query: bool = True
    carries_output: bool = True

    @property
    def count(self) -> int:
        return len(self.kv_chunks)


@dataclass(frozen=True)
class ExchangePlan:
    devices: tuple[int, ...]
    loads_before: tuple[int, ...]
    loads_after: tuple[int, ...]
    transfers: tuple[Transfer, ...] = ()

    @property
    def spread(self) -> int:
        return max(self.loads_after) - min(self.loads_after) if self.loads_after else 0

    def sent_by(self, device: int) -> int:
        return sum(t.count for t in self.transfers if t.src == device)

    @property
    def max_sent(self) -> int:
        return max((self.sent_by(d) for d in self.devices), default=0)


def _as_loads(loads) -> list[TickLoad]:
    out = []
    for j, x in enumerate(loads, start=1):
        out.append(x if isinstance(x, TickLoad) else TickLoad(j, int(x)))
    return out


def _target_flows(load: list[int]) -> dict[tuple[int, int], int]:
    """Minimal-movement flows reaching floor/ceil of the mean (heaviest keep the +1)."""
    p = len(load)
    total = sum(load)
    base, extra = divmod(total, p)
    order = sorted(range(p), key=lambda j: (-load[j], j))
    target = [base] * p
    for j in order[:extra]:
        target[j] += 1
    excess = {j: load[j] - target[j] for j in range(p) if load[j] > target[j]}
    deficit = {j: target[j] - load[j] for j in range(p) if load[j] < target[j]}
    flows: dict[tuple[int, int], int] = defaultdict(int)
    while excess:
        s = min(excess, key=lambda j: (-excess[j], j))
        r = min(deficit, key=lambda j: (-deficit[j], -j))
        x = min(excess[s], deficit[r])
        flows[(s, r)] += x
        for pool, j in ((excess, s), (deficit, r)):
            pool[j] -= x
            if not pool[j]:
                del pool[j]
    return dict(flows)


def balance_tick(loads: Sequence, max_send: Optional[int] = None, early: bool = False) -> ExchangePlan:
    """Balance one tick.

    1. Pairing: sort by load (ties by position), pair rank r with rank p-1-r
       and move floor(diff/2) chunks from the heavier to the lighter device.
    2. Refinement: while max-min > 1, move single chunks from the heaviest
       device that has not received to the lightest that has not sent, never
       letting a device send more than ``max_send`` chunks.
    3. If refinement stalls (adversarial loads), fall back to minimal-movement
       flows towards floor/ceil of the mean, which always reach max-min <= 1,
       unless that would break ``max_send``; then the capped plan is kept.

    Senders ship their newest chunks by default; with ``early`` the oldest ones
    (whose KV was produced earliest) are shipped instead.
    """
    tl = _as_loads(loads)
    if not tl:
        raise ValueError("balance_tick needs at least one load")
    devices = tuple(x.device for x in tl)
    before = [x.kv_chunks for x in tl]
    p = len(tl)
    load = list(before)
    flows: dict[tuple[int, int], int] = defaultdict(int)
    order = sorted(range(p), key=lambda j: (-load[j], j))
    for r in range(p // 2):
        hi, lo = order[r], order[p - 1 - r]
        x = (load[hi] - load[lo]) // 2
        if max_send is not None:
            x = min(x, max_send)
        if x > 0:
            flows[(hi, lo)] += x
            load[hi] -= x
            load[lo] += x
    sent = defaultdict(int)
    for (s, _), x in flows.items():
        sent[s] += x
    receivers = {r for _, r in flows}
    while max(load) - min(load) > 1:
        src = [j for j in range(p) if j not in receivers and (max_send is None or sent[j] < max_send)]
        dst = [j for j in range(p) if j not in sent or sent[j] == 0]
        if not src or not dst:
            break
        s = min(src, key=lambda j: (-load[j], j))
        r = min(dst, key=lambda j: (load[j], j))
        if load[s] - load[r] < 2 or s == r:
            break
        flows[(s, r)] += 1
        sent[s] += 1
        receivers.add(r)
        load[s] -= 1
        load[r] += 1
    if max(load) - min(load) > 1:
        fb = _target_flows(list(before))
        out: dict[int, int] = defaultdict(int)
        for (s, _), x in fb.items():
            out[s] += x
        # the cap wins: at junctures it can make max-min <= 1 unreachable
        if max_send is None or max(out.values(), default=0) <= max_send:
            load = list(before)
            flows = defaultdict(int, fb)
            for (s, r), x in flows.items():
                load[s] -= x
                load[r] += x

    transfers = []
    used: dict[int, int] = defaultdict(int)
    for (s, r) in sorted(flows, key=lambda sr: (order.index(sr[0]), sr[1])):
        x = flows[(s, r)]
        if x <= 0:
            continue
        kv = before[s]
        a = used[s]
        if early:
            chunks = tuple(range(a + 1, a + x + 1))
        else:
            chunks = tuple(range(kv - a - x + 1, kv - a + 1))
        used[s] += x
        transfers.append(Transfer(devices[s], devices[r], chunks))
    return ExchangePlan(devices, tuple(before), tuple(load), tuple(transfers))


def to_early(plan: ExchangePlan) -> ExchangePlan:
    """Rewrite a plan so every sender ships its earliest-produced chunks instead."""
    used: dict[int, int] = defaultdict(int)
    out = []
    for t in plan.transfers:
        a = used[t.src]
        out.append(replace(t, kv_chunks=tuple(range(a + 1, a + t.count + 1))))
        used[t.src] += t.count
    return replace(plan, transfers=tuple(out))


def check_early(plan: ExchangePlan):
    """Raise if a sender ships a chunk newer than its earliest ``count`` chunks."""
    counts: dict[int, int] = defaultdict(int)
    for t in plan.transfers:
        counts[t.src] += t.count
    for t in plan.transfers:
        for c in t.kv_chunks:
            if c > counts[t.src]:
                raise ValueError(f"chunk {c} from device {t.src} is newer than the early-exchange rule allows")


# ----------------------------------------------------------------- volumes


def exchange_volume(p: int, n: int, L, M_h) -> Fraction:
    """Exchanged bytes per microbatch per device (worst link per tick).

    Θ = (2n + 2(n-p+1)⌊(p-1)/2⌋ + 2(p-1)⌊(n-1)/2⌋) · L · M_h / (p·n).
    A single device has no peer, so p=1 yields 0.
    """
    if p < 1 or n < 1 or n % p:
        raise ValueError("n must be a positive multiple of p")
    if p == 1:
        return Fraction(0)
    units = 2 * n + 2 * (n - p + 1) * ((p - 1) // 2) + 2 * (p - 1) * ((n - 1) // 2)
    return Fraction(units) * Fraction(L) * Fraction(M_h) / (p * n)


def exchange_volume_bound(p: int, n: int, L, M_h) -> Fraction:
    return (2 - Fraction(p - 1, n)) * Fraction(L) * Fraction(M_h)


def cp_comm_volume_per_slice(variant: str, i: int, unit=1) -> Fraction:
    """Bytes sent for slice i under context parallelism with a KV cache.

    kv_ring re-sends K and V of every cached slice (2i units); the commutated
    variant sends the query and gets the output back (2 units) regardless of i.
    """
    if variant == "kv_ring":
        return Fraction(2 * i) * Fraction(unit)
    if variant == "commutated":
        return Fraction(2) * Fraction(unit)
    raise ValueError(f"unknown context-parallel variant {variant!r}")


def cp_comm_volume(variant: str, n: int, unit=1) -> Fraction:
    if n < 1:
        raise ValueError("n must be >= 1")
    return sum((cp_comm_volume_per_slice(variant, i, unit) for i in range(1, n + 1)), Fraction(0))


# ----------------------------------------------------------------- schedule-level


@dataclass(frozen=True)
class TickPlan:
    tick: tuple[int, str]
    passes: tuple[Pass, ...]
    plan: ExchangePlan
    juncture: bool


def tick_members(schedule: Schedule) -> dict[tuple[int, str], list[Pass]]:
    if not schedule.ticks:
        raise ValueError(f"{schedule.scheme.value} schedules carry no exchange ticks")
    cols: dict[tuple[int, str], list[Pass]] = defaultdict(list)
    for ps, tick in schedule.ticks.items():
        cols[tick].append(ps)
    for members in cols.values():
        members.sort(key=lambda ps: ps.device)
    return dict(sorted(cols.items()))


def plan_exchange(schedule: Schedule, early: bool = False) -> list[TickPlan]:
    """balance_tick for every lattice tick; juncture ticks use the ⌊(n-1)/2⌋ cap."""
    p, n = schedule.p, schedule.n
    out = []
    for tick, members in tick_members(schedule).items():
        juncture = len({ps.microbatch for ps in members}) > 1
        cap = (n - 1) // 2 if juncture else (p - 1) // 2
        loads = [TickLoad(ps.device, ps.slice) for ps in members]
        plan = balance_tick(loads, max_send=max(cap, 0), early=early)
        out.append(TickPlan(tick, tuple(members), plan, juncture))
    return out


def apply_exchange(schedule: Schedule, plans: Sequence[TickPlan], early: bool = False) -> Schedule:
    """Attach the transfers of ``plans`` to the schedule as exchange edges."""
    edges = []
    for tp in plans:
        by_dev = {ps.device: ps for ps in tp.passes}
        plan = tp.plan
        if early:
            check_early(plan)
        for t in plan.transfers:
            edges.append(ExchangeEdge(by_dev[t.src], by_dev[t.dst], t.kv_chunks, early))
    if not edges:
        return schedule
    return replace(schedule, exchanges=tuple(edges))


def exchange_schedule(schedule: Schedule, early: bool = False) -> Schedule:
    return apply_exchange(schedule, plan_exchange(schedule, early=early), early=early)


def tick_cap(tp: TickPlan, p: int, n: int) -> int:
    """Most KV chunks one sender may ship in this tick."""
    return max((n - 1) // 2 if tp.juncture else (p - 1) // 2, 0)


def tick_volume_units(tp: TickPlan, p: int, n: int) -> int:
    """Slice-tensor units budgeted per device of a tick: Q+O plus K,V of the capped send."""
    return 2 + 2 * tick_cap(tp, p, n)


def accounted_exchange_units(schedule: Schedule, plans: Sequence[TickPlan]) -> dict[tuple[int, int], int]:
    """Per (device, microbatch) forward-exchange budget in (L/(pv))·(M_h/n) units.

    Every device in a forward tick is charged the tick's budget (the most any
    link carries under the send cap), whatever the plan actually ships.
    Single-device ticks exchange nothing.
    """
    out: dict[tuple[int, int], int] = defaultdict(int)
    if schedule.p == 1:
        return {}
    for tp in plans:
        if tp.tick[1] != "F" or len(tp.passes) < 2:
            continue
        units = tick_volume_units(tp, schedule.p, schedule.n)
        for ps in tp.passes:
            out[(ps.device, ps.microbatch)] += units
    return dict(out)


def early_exchange_ready_times(forward_end: Mapping[Pass, object], tick_passes: Mapping[int, Pass],
                               plan: ExchangePlan) -> list[dict[int, object]]:
    """Earliest send time of each KV chunk in each transfer.

    ``forward_end`` maps forward passes to completion times and ``tick_passes``
    maps a device of the plan to the pass it runs in the tick.  Chunk c of a
    sender running (k, i, s) is produced by the forward of (k, c, s).
    """
    check_early(plan)
    out = []
    for t in plan.transfers:
        ps = tick_passes[t.src]
        times = {}
        for c in t.kv_chunks:
            producer = Pass(PassKind.FORWARD, ps.microbatch, c, ps.stage, ps.device)
            times[c] = forward_end[producer]
        out.append(times)
    return out
