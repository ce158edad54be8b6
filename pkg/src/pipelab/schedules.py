"""Pipeline schedule generators and the schedule validator.

Indices are 1-based everywhere (microbatch k, slice i, stage s, device d) to
match the way schedules are usually drawn.  A :class:`Schedule` is immutable:
per-device program order, dependency edges, and optional lattice ticks used by
the attention context exchange.
"""

from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence

log = logging.getLogger(__name__)


class PassKind(str, Enum):
    FORWARD = "F"
    BACKWARD_INPUT = "B"
    BACKWARD_WEIGHT = "W"
    BACKWARD_FUSED = "BW"
    VOCAB_FORWARD = "VF"
    VOCAB_BACKWARD = "VB"

    @property
    def is_forward(self) -> bool:
        return self is PassKind.FORWARD

    @property
    def is_backward(self) -> bool:
        return self in (PassKind.BACKWARD_INPUT, PassKind.BACKWARD_FUSED)

    @property
    def is_vocab(self) -> bool:
        return self in (PassKind.VOCAB_FORWARD, PassKind.VOCAB_BACKWARD)


F, BI, W, BF = PassKind.FORWARD, PassKind.BACKWARD_INPUT, PassKind.BACKWARD_WEIGHT, PassKind.BACKWARD_FUSED
VF, VB = PassKind.VOCAB_FORWARD, PassKind.VOCAB_BACKWARD


@dataclass(frozen=True)
class Pass:
    kind: PassKind
    microbatch: int
    slice: int
    stage: int
    device: int

    def __str__(self):
        return f"{self.kind.value}(k={self.microbatch},i={self.slice},s={self.stage})@d{self.device}"

    def key(self) -> tuple:
        return (self.kind.value, self.microbatch, self.slice, self.stage, self.device)


@dataclass(frozen=True)
class ExchangeEdge:
    """Attention work moved from ``sender`` to ``receiver`` (whole KV chunks)."""

    sender: Pass
    receiver: Pass
    chunks: tuple[int, ...]
    early: bool = False


class Scheme(str, Enum):
    GPIPE = "gpipe"
    TERAPIPE = "terapipe"
    ONE_F_ONE_B = "1f1b"
    INTERLEAVED = "interleaved"
    ZBV = "zbv"
    VHALF = "vhalf"
    SLIMPIPE = "slimpipe"


ONE_F_ONE_B_FAMILY = {Scheme.ONE_F_ONE_B, Scheme.INTERLEAVED, Scheme.SLIMPIPE}
SLICED = {Scheme.TERAPIPE, Scheme.SLIMPIPE}
DECOUPLED = {Scheme.ZBV, Scheme.VHALF}


@dataclass(frozen=True)
class Schedule:
    scheme: Scheme
    p: int
    v: int
    m: int
    n: int
    placement: tuple[int, ...]  # placement[s-1] = device owning stage s
    programs: tuple[tuple[Pass, ...], ...]
    deps: Mapping[Pass, tuple[Pass, ...]]
    ticks: Mapping[Pass, tuple[int, str]] = field(default_factory=dict)
    vocab: Optional[str] = None  # None | "last" | "distributed"
    exchanges: tuple[ExchangeEdge, ...] = ()

    @property
    def stages(self) -> int:
        return self.p * self.v

    @property
    def decoupled(self) -> bool:
        return self.scheme in DECOUPLED

    @property
    def sliced(self) -> bool:
        return self.scheme in SLICED

    @property
    def edges(self) -> set[tuple[Pass, Pass]]:
        return {(a, b) for b, pre in self.deps.items() for a in pre}

    def passes(self) -> Iterable[Pass]:
        for prog in self.programs:
            yield from prog

    def program(self, device: int) -> tuple[Pass, ...]:
        return self.programs[device - 1]

    def owner(self, stage: int) -> int:
        return self.placement[stage - 1]


# ----------------------------------------------------------------- helpers


def _check_sizes(p: int, m: int, n: int, v: int):
    for label, x in (("p", p), ("m", m), ("n", n), ("v", v)):
        if not isinstance(x, int) or x < 1:
            raise ValueError(f"{label} must be a positive integer, got {x!r}")


def round_robin_placement(p: int, v: int) -> tuple[int, ...]:
    return tuple((s - 1) % p + 1 for s in range(1, p * v + 1))


def v_placement(p: int) -> tuple[int, ...]:
    """Device d owns stages d and 2p-d+1."""
    return tuple(s if s <= p else 2 * p - s + 1 for s in range(1, 2 * p + 1))


def _bwd_kind(decoupled: bool) -> PassKind:
    return BI if decoupled else BF


def build_deps(programs: Sequence[Sequence[Pass]], stages: int, n: int, sliced: bool,
               placement: Sequence[int]) -> dict[Pass, tuple[Pass, ...]]:
    """Dependency edges implied by the model structure.

    Forward of (k,i,s) needs (k,i,s-1) and, when sliced, the KV of (k,i-1,s).
    Backward of (k,i,s) needs (k,i,s+1) (or the last forward), its own forward,
    and, when sliced, the backward of (k,i+1,s) whose dK/dV it consumes.
    """
    owner = lambda s: placement[s - 1]
    all_passes = {ps for prog in programs for ps in prog}
    decoupled = any(ps.kind is BI for ps in all_passes)
    bk = _bwd_kind(decoupled)
    deps: dict[Pass, tuple[Pass, ...]] = {}
    for ps in all_passes:
        k, i, s = ps.microbatch, ps.slice, ps.stage
        pre: list[Pass] = []
        if ps.kind is F:
            if s > 1:
                pre.append(Pass(F, k, i, s - 1, owner(s - 1)))
            if sliced and i > 1:
                pre.append(Pass(F, k, i - 1, s, owner(s)))
        elif ps.kind in (BI, BF):
            if s < stages:
                pre.append(Pass(ps.kind, k, i, s + 1, owner(s + 1)))
            else:
                pre.append(Pass(F, k, i, stages, owner(stages)))
            if s < stages:
                pre.append(Pass(F, k, i, s, owner(s)))
            if sliced and i < n:
                pre.append(Pass(ps.kind, k, i + 1, s, owner(s)))
        elif ps.kind is W:
            pre.append(Pass(bk, k, i, s, owner(s)))
        deps[ps] = tuple(pre)
    return deps


def _make(scheme: Scheme, p: int, v: int, m: int, n: int, placement, programs,
          ticks=None) -> Schedule:
    programs = tuple(tuple(prog) for prog in programs)
    deps = build_deps(programs, p * v, n, scheme in SLICED, placement)
    return Schedule(scheme, p, v, m, n, tuple(placement), programs, deps, dict(ticks or {}))


# ----------------------------------------------------------------- generators


def gen_gpipe(p: int, m: int, n: int = 1, v: int = 1) -> Schedule:
    """All forwards, then all backwards (microbatch order)."""
    _check_sizes(p, m, 1, 1)
    if n != 1 or v != 1:
        raise ValueError("GPipe is unsliced and non-interleaved (n=1, v=1)")
    progs = []
    for d in range(1, p + 1):
        prog = [Pass(F, k, 1, d, d) for k in range(1, m + 1)]
        prog += [Pass(BF, k, 1, d, d) for k in range(1, m + 1)]
        progs.append(prog)
    return _make(Scheme.GPIPE, p, 1, m, 1, round_robin_placement(p, 1), progs)


def gen_terapipe(p: int, m: int, n: int = 1, v: int = 1) -> Schedule:
    """GPipe phases over token slices; backward slices in reverse (LIFO) order."""
    _check_sizes(p, m, n, 1)
    if v != 1:
        raise ValueError("TeraPipe is non-interleaved (v=1)")
    progs = []
    for d in range(1, p + 1):
        prog = [Pass(F, k, i, d, d) for k in range(1, m + 1) for i in range(1, n + 1)]
        prog += [Pass(BF, k, i, d, d) for k in range(1, m + 1) for i in range(n, 0, -1)]
        progs.append(prog)
    return _make(Scheme.TERAPIPE, p, 1, m, n, round_robin_placement(p, 1), progs)


def _one_f_one_b_program(fwd: Sequence, bwd: Sequence, warmup: int, forward_first: bool) -> list:
    warmup = min(warmup, len(fwd))
    prog = list(fwd[:warmup])
    fj, bj = warmup, 0
    while bj < len(bwd):
        if forward_first and fj < len(fwd):
            prog.append(fwd[fj])
            fj += 1
        prog.append(bwd[bj])
        bj += 1
        if not forward_first and fj < len(fwd):
            prog.append(fwd[fj])
            fj += 1
    return prog


def gen_1f1b(p: int, m: int, n: int = 1, v: int = 1) -> Schedule:
    _check_sizes(p, m, 1, 1)
    if n != 1 or v != 1:
        raise ValueError("classic 1F1B is unsliced and non-interleaved (n=1, v=1)")
    if m < p:
        raise ValueError(f"1F1B needs at least p microbatches (m={m} < p={p})")
    progs = []
    for d in range(1, p + 1):
        fwd = [Pass(F, k, 1, d, d) for k in range(1, m + 1)]
        bwd = [Pass(BF, k, 1, d, d) for k in range(1, m + 1)]
        progs.append(_one_f_one_b_program(fwd, bwd, p - d + 1, forward_first=False))
    return _make(Scheme.ONE_F_ONE_B, p, 1, m, 1, round_robin_placement(p, 1), progs)


def gen_interleaved_1f1b(p: int, m: int, n: int = 1, v: int = 2) -> Schedule:
    """Megatron-style interleaved 1F1B with round-robin stage placement.

    v=1 keeps the interleaved warm-up depth 2(p-d), so device 1 holds 2p-1
    stage activations rather than plain 1F1B's p.
    """
    _check_sizes(p, m, 1, v)
    if n != 1:
        raise ValueError("interleaved 1F1B is unsliced (n=1)")
    if v > 1 and m % p:
        raise ValueError(f"interleaved 1F1B needs m to be a multiple of p (m={m}, p={p})")
    total = m * v

    def unit(u: int, backward: bool):
        k = (u // (p * v)) * p + u % p + 1
        c = (u // p) % v
        if backward:
            c = v - 1 - c
        return k, c

    progs = []
    for d in range(1, p + 1):
        fwd, bwd = [], []
        for u in range(total):
            k, c = unit(u, False)
            fwd.append(Pass(F, k, 1, c * p + d, d))
            k, c = unit(u, True)
            bwd.append(Pass(BF, k, 1, c * p + d, d))
        warmup = 2 * (p - d) + (v - 1) * p
        progs.append(_one_f_one_b_program(fwd, bwd, warmup, forward_first=True))
    return _make(Scheme.INTERLEAVED, p, v, m, 1, round_robin_placement(p, v), progs)


def slimpipe_units(p: int, m: int, n: int, v: int) -> tuple[list[tuple[int, int, int]], list[tuple[int, int, int]]]:
    """(microbatch, slice, chunk) order of forward and backward units on every device.

    Chunks switch every p slices, so each group of p slices visits all v chunks
    before the next group starts.  Backward reverses the groups, the chunks and
    the slices within a group.
    """
    groups = [list(range(g * p + 1, g * p + p + 1)) for g in range(n // p)] if v > 1 else [list(range(1, n + 1))]
    fwd, bwd = [], []
    for k in range(1, m + 1):
        for grp in groups:
            for c in range(v):
                fwd.extend((k, i, c) for i in grp)
        for grp in reversed(groups):
            for c in reversed(range(v)):
                bwd.extend((k, i, c) for i in reversed(grp))
    return fwd, bwd


def gen_slimpipe(p: int, m: int, n: int, v: int = 1) -> Schedule:
    """Slice-wise 1F1B.

    Device d runs n*v + 2(p-d) slice forwards before its first backward and then
    alternates backward/forward.  Every pass carries a lattice tick (column,
    phase): forward unit j on device d sits in column j+d-1, backward unit b in
    column n*v + b + 2(p-1) - (d-1).
    """
    _check_sizes(p, m, n, v)
    if n % p:
        raise ValueError(f"SlimPipe needs n to be a multiple of p (n={n}, p={p})")
    fwd_units, bwd_units = slimpipe_units(p, m, n, v)
    progs, ticks = [], {}
    for d in range(1, p + 1):
        r = d - 1
        fwd = [Pass(F, k, i, c * p + d, d) for k, i, c in fwd_units]
        bwd = [Pass(BF, k, i, c * p + d, d) for k, i, c in bwd_units]
        for j, ps in enumerate(fwd):
            ticks[ps] = (j + r, "F")
        for b, ps in enumerate(bwd):
            ticks[ps] = (n * v + b + 2 * (p - 1) - r, "B")
        warmup = n * v + 2 * (p - d)
        progs.append(_one_f_one_b_program(fwd, bwd, warmup, forward_first=False))
    return _make(Scheme.SLIMPIPE, p, v, m, n, round_robin_placement(p, v), progs, ticks)


def _v_shape_greedy(scheme: Scheme, p: int, m: int, cap_units: int,
                    times: tuple = (1, 2, 1)) -> Schedule:
    """List-schedule a V-shaped pipeline with decoupled backward.

    Each device admits a new microbatch only while its resident chunk
    activations plus the chunks reserved for already admitted microbatches
    stay within ``cap_units``.  At every decision point a ready input-grad
    backward wins, then a forward (second chunk first), and weight-grad passes
    fill otherwise idle time (earliest-fit).
    """
    tf, tb, tw = (Fraction(x) for x in times)
    S = 2 * p
    placement = v_placement(p)
    owner = lambda s: placement[s - 1]
    cost = {F: tf, BI: tb, W: tw}

    def deps_of(ps: Pass) -> list[Pass]:
        k, s = ps.microbatch, ps.stage
        if ps.kind is F:
            return [Pass(F, k, 1, s - 1, owner(s - 1))] if s > 1 else []
        if ps.kind is BI:
            out = [Pass(F, k, 1, s, owner(s))]
            out.append(Pass(BI, k, 1, s + 1, owner(s + 1)) if s < S else Pass(F, k, 1, S, owner(S)))
            return out
        return [Pass(BI, k, 1, s, owner(s))]

    end: dict[Pass, Fraction] = {}
    free = [Fraction(0)] * p
    progs: list[list[Pass]] = [[] for _ in range(p)]
    next_f = [[1, 1] for _ in range(p)]  # next microbatch per chunk (0: stage d, 1: stage 2p-d+1)
    next_b = [[1, 1] for _ in range(p)]
    pending_w: list[deque] = [deque() for _ in range(p)]
    resident = [0] * p
    reserved = [0] * p
    remaining = 3 * 2 * m * p
    t = Fraction(0)

    def stage_of(d: int, c: int) -> int:
        return d if c == 0 else 2 * p - d + 1

    def ready(ps: Pass) -> bool:
        return all(q in end and end[q] <= t for q in deps_of(ps))

    while remaining:
        for d in range(1, p + 1):
            if free[d - 1] > t:
                continue
            choice = None
            cands = []
            for c in (1, 0):
                k = next_b[d - 1][c]
                if k <= m:
                    ps = Pass(BI, k, 1, stage_of(d, c), d)
                    if ready(ps):
                        cands.append(ps)
            if cands:
                choice = min(cands, key=lambda q: (q.microbatch, -q.stage))
            if choice is None:
                k = next_f[d - 1][1]
                if k <= m and Pass(F, k, 1, stage_of(d, 0), d) in end:
                    ps = Pass(F, k, 1, stage_of(d, 1), d)
                    if ready(ps):
                        choice = ps
            if choice is None:
                k = next_f[d - 1][0]
                if k <= m and resident[d - 1] + reserved[d - 1] + 2 <= cap_units:
                    ps = Pass(F, k, 1, stage_of(d, 0), d)
                    if ready(ps):
                        choice = ps
            if choice is None and pending_w[d - 1]:
                choice = pending_w[d - 1].popleft()
            if choice is None:
                continue
            c = 0 if choice.stage == d else 1
            if choice.kind is F:
                next_f[d - 1][c] += 1
                resident[d - 1] += 1
                if c == 0:
                    reserved[d - 1] += 1
                else:
                    reserved[d - 1] -= 1
            elif choice.kind is BI:
                next_b[d - 1][c] += 1
                resident[d - 1] -= 1
                pending_w[d - 1].append(Pass(W, choice.microbatch, 1, choice.stage, d))
            end[choice] = t + cost[choice.kind]
            free[d - 1] = end[choice]
            progs[d - 1].append(choice)
            remaining -= 1
        future = [f for f in free if f > t]
        if not future:
            if remaining:
                raise RuntimeError(f"{scheme.value}: greedy V-schedule builder deadlocked at t={t}")
            break
        t = min(future)
    return _make(scheme, p, 2, m, 1, placement, progs)


def _v_times(times) -> tuple:
    return (1, 2, 1) if times is None else tuple(times)


def gen_zbv(p: int, m: int, n: int = 1, v: int = 2, times=None) -> Schedule:
    """ZB-V: V placement, decoupled backward, peak 2p chunk activations (= M_a)."""
    if v != 2 or n != 1:
        raise ValueError("ZB-V uses exactly two V-placed stages per device (v=2) and no slicing")
    _check_sizes(p, m, 1, 2)
    if m < p:
        raise ValueError(f"ZB-V needs at least p microbatches (m={m} < p={p})")
    return _v_shape_greedy(Scheme.ZBV, p, m, 2 * p, _v_times(times))


def gen_vhalf(p: int, m: int, n: int = 1, v: int = 2, times=None) -> Schedule:
    """V-Half: as ZB-V but capped at p+2 chunk activations (= (1/2+1/p) M_a)."""
    if v != 2 or n != 1:
        raise ValueError("V-Half uses exactly two V-placed stages per device (v=2) and no slicing")
    _check_sizes(p, m, 1, 2)
    if m < p:
        raise ValueError(f"V-Half needs at least p microbatches (m={m} < p={p})")
    return _v_shape_greedy(Scheme.VHALF, p, m, p + 2, _v_times(times))


GENERATORS: dict[Scheme, Callable[..., Schedule]] = {
    Scheme.GPIPE: gen_gpipe,
    Scheme.TERAPIPE: gen_terapipe,
    Scheme.ONE_F_ONE_B: gen_1f1b,
    Scheme.INTERLEAVED: gen_interleaved_1f1b,
    Scheme.ZBV: gen_zbv,
    Scheme.VHALF: gen_vhalf,
    Scheme.SLIMPIPE: gen_slimpipe,
}


def generate(scheme, p: int, m: int, n: int = 1, v: int = 1, **kw) -> Schedule:
    scheme = Scheme(scheme)
    if scheme in DECOUPLED:
        return GENERATORS[scheme](p, m, n, v, **kw)
    return GENERATORS[scheme](p, m, n, v)


# ----------------------------------------------------------------- vocabulary


def _tick_key(tick: tuple[int, str]) -> tuple[int, int]:
    # within a lattice column the backward runs before the forward
    return (tick[0], 0 if tick[1] == "B" else 1)


def place_vocab(schedule: Schedule, vocab_parallel: bool,
                reference: Optional[Callable[[Schedule], Mapping[Pass, tuple]]] = None) -> Schedule:
    """Add the output-layer (vocabulary) passes.

    Without vocab parallelism, VocabForward/VocabBackward of every (k, i) run on
    the last stage's device right after its forward.  With it, each device runs
    a 1/p shard inserted at the aligned slot: on a lattice schedule, the end of
    the column holding the last stage's forward of (k, i); otherwise before the
    first pass starting after that forward finishes in a reference run
    (``reference`` returns per-pass (start, end); default: unit linear costs).
    Each shard's backward waits for every shard's forward (softmax statistics)
    and the last stage's backward waits for every shard's backward.
    """
    if schedule.vocab is not None:
        raise ValueError("schedule already carries vocab passes")
    S, p = schedule.stages, schedule.p
    last = schedule.owner(S)
    deps = dict(schedule.deps)
    bk = _bwd_kind(schedule.decoupled)
    pairs = [(ps.microbatch, ps.slice) for ps in schedule.program(last) if ps.kind is F and ps.stage == S]
    programs = [list(prog) for prog in schedule.programs]

    if not vocab_parallel:
        prog = programs[last - 1]
        out = []
        for ps in prog:
            out.append(ps)
            if ps.kind is F and ps.stage == S:
                vf = Pass(VF, ps.microbatch, ps.slice, S, last)
                vb = Pass(VB, ps.microbatch, ps.slice, S, last)
                out += [vf, vb]
                deps[vf] = (ps,)
                deps[vb] = (vf,)
                b = Pass(bk, ps.microbatch, ps.slice, S, last)
                deps[b] = deps[b] + (vb,)
        programs[last - 1] = out
        return replace(schedule, programs=tuple(tuple(x) for x in programs), deps=deps, vocab="last")

    if reference is None:
        from .sim import simulate
        from .workload import CostModel

        reference = lambda sch: simulate(sch, CostModel()).timeline.spans()
    lattice = bool(schedule.ticks) and all(ps in schedule.ticks for prog in schedule.programs for ps in prog)
    spans = None if lattice else reference(schedule)
    inserts: dict[int, dict[int, list[Pass]]] = defaultdict(lambda: defaultdict(list))
    for k, i in pairs:
        f_last = Pass(F, k, i, S, last)
        t_ready = None if lattice else spans[f_last][1]
        vfs = [Pass(VF, k, i, S, d) for d in range(1, p + 1)]
        vbs = [Pass(VB, k, i, S, d) for d in range(1, p + 1)]
        for d in range(1, p + 1):
            prog = schedule.program(d)
            if lattice:
                # aligned slot: end of the lattice column holding the last-stage forward
                pos = sum(1 for ps in prog if _tick_key(schedule.ticks[ps]) <= _tick_key(schedule.ticks[f_last]))
            else:
                # before the first pass that starts once the hidden states are ready;
                # passes started earlier cannot depend on this (k, i)'s last-stage backward
                pos = sum(1 for ps in prog if spans[ps][0] < t_ready)
            # never after a backward of this (k, i), which needs the vocab gradient
            guard = next((j for j, ps in enumerate(prog)
                          if ps.kind.is_backward and ps.microbatch == k and ps.slice == i), len(prog))
            if d == last:
                pos = prog.index(f_last) + 1
            inserts[d][min(pos, guard)] += [vfs[d - 1], vbs[d - 1]]
            deps[vfs[d - 1]] = (f_last,)
            deps[vbs[d - 1]] = tuple(vfs)
        b = Pass(bk, k, i, S, last)
        deps[b] = deps[b] + tuple(vbs)
    new_programs = []
    for d in range(1, p + 1):
        out = []
        prog = schedule.program(d)
        for j, ps in enumerate(prog):
            out.extend(inserts[d].get(j, ()))
            out.append(ps)
        out.extend(inserts[d].get(len(prog), ()))
        new_programs.append(tuple(out))
    return replace(schedule, programs=tuple(new_programs), deps=deps, vocab="distributed")


# ----------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    rule: str
    message: str
    pass_: Optional[Pass] = None

    def __str__(self):
        where = f" at {self.pass_}" if self.pass_ is not None else ""
        return f"{self.rule}: {self.message}{where}"


PLACEMENT = "placement violation"
COVERAGE = "coverage violation"
DEPENDENCY = "dependency violation"
REVERSE_ORDER = "reverse-order violation"
STEADY_STATE = "steady-state violation"
CYCLE = "cycle violation"


def expected_passes(schedule: Schedule) -> set[Pass]:
    sch = schedule
    bk = _bwd_kind(sch.decoupled)
    out = set()
    for k in range(1, sch.m + 1):
        for i in range(1, sch.n + 1):
            for s in range(1, sch.stages + 1):
                d = sch.owner(s)
                out.add(Pass(F, k, i, s, d))
                out.add(Pass(bk, k, i, s, d))
                if sch.decoupled:
                    out.add(Pass(W, k, i, s, d))
            if sch.vocab == "last":
                d = sch.owner(sch.stages)
                out.add(Pass(VF, k, i, sch.stages, d))
                out.add(Pass(VB, k, i, sch.stages, d))
            elif sch.vocab == "distributed":
                for d in range(1, sch.p + 1):
                    out.add(Pass(VF, k, i, sch.stages, d))
                    out.add(Pass(VB, k, i, sch.stages, d))
    return out


def validate_schedule(schedule: Schedule, stop_at_first: bool = True) -> list[Violation]:
    """Check structural rules; returns [] for a valid schedule.

    Rules are checked in a fixed order (placement, coverage, dependency edges,
    reverse-order backward, 1F1B steady state, cycles) and the first violated
    rule is reported first.
    """
    sch = schedule
    found: list[Violation] = []

    def report(rule, msg, ps=None) -> bool:
        found.append(Violation(rule, msg, ps))
        return stop_at_first

    # placement
    for d, prog in enumerate(sch.programs, start=1):
        for ps in prog:
            if ps.device != d:
                if report(PLACEMENT, f"pass listed on device {d}", ps):
                    return found
            elif not (ps.kind.is_vocab and sch.vocab == "distributed") and sch.owner(ps.stage) != d:
                if report(PLACEMENT, f"stage {ps.stage} is owned by device {sch.owner(ps.stage)}", ps):
                    return found

    # coverage
    expected = expected_passes(sch)
    seen: set[Pass] = set()
    for ps in sch.passes():
        if ps in seen:
            if report(COVERAGE, "pass appears more than once", ps):
                return found
        elif ps not in expected:
            if report(COVERAGE, "unexpected pass", ps):
                return found
        seen.add(ps)
    for ps in sorted(expected - seen, key=Pass.key):
        if report(COVERAGE, "missing pass", ps):
            return found

    # required edges
    for ps in sch.passes():
        pre = set(sch.deps.get(ps, ()))
        if ps.kind is F and ps.stage > 1:
            need = Pass(F, ps.microbatch, ps.slice, ps.stage - 1, sch.owner(ps.stage - 1))
            if need not in pre and report(DEPENDENCY, f"missing edge from {need}", ps):
                return found
        if ps.kind is F and sch.sliced and ps.slice > 1:
            need = Pass(F, ps.microbatch, ps.slice - 1, ps.stage, ps.device)
            if need not in pre and report(DEPENDENCY, f"missing KV edge from {need}", ps):
                return found
        for q in pre:
            if q not in seen and report(DEPENDENCY, f"edge from unknown pass {q}", ps):
                return found

    # reverse-order backward per (device, microbatch, stage)
    if sch.sliced:
        for prog in sch.programs:
            fwd_order: dict[tuple, list[int]] = defaultdict(list)
            bwd_order: dict[tuple, list[tuple[int, Pass]]] = defaultdict(list)
            for ps in prog:
                if ps.kind is F:
                    fwd_order[(ps.microbatch, ps.stage)].append(ps.slice)
                elif ps.kind.is_backward:
                    bwd_order[(ps.microbatch, ps.stage)].append((ps.slice, ps))
            for key, fo in fwd_order.items():
                bo = bwd_order.get(key, [])
                if [i for i, _ in bo] != fo[::-1]:
                    bad = next((ps for (i, ps), want in zip(bo, fo[::-1]) if i != want), bo[0][1] if bo else None)
                    if report(REVERSE_ORDER, f"backward slices {[i for i, _ in bo]} for (k,s)={key} "
                                             f"do not reverse forward order {fo}", bad):
                        return found

    # one forward per backward after warm-up
    if sch.scheme in ONE_F_ONE_B_FAMILY:
        for prog in sch.programs:
            core = [ps for ps in prog if ps.kind is F or ps.kind.is_backward]
            started, prev_f = False, False
            for ps in core:
                if ps.kind.is_backward:
                    started, prev_f = True, False
                elif started:
                    if prev_f and report(STEADY_STATE, "two forwards in a row after the first backward", ps):
                        return found
                    prev_f = True

    # acyclicity of dependency edges plus program order
    succ: dict[Pass, list[Pass]] = defaultdict(list)
    indeg: dict[Pass, int] = {ps: 0 for ps in seen}
    for b in seen:
        for a in sch.deps.get(b, ()):
            if a in indeg:
                succ[a].append(b)
                indeg[b] += 1
    for prog in sch.programs:
        for a, b in zip(prog, prog[1:]):
            succ[a].append(b)
            indeg[b] += 1
    queue = deque(ps for ps, x in indeg.items() if x == 0)
    done = 0
    while queue:
        a = queue.popleft()
        done += 1
        for b in succ[a]:
            indeg[b] -= 1
            if indeg[b] == 0:
                queue.append(b)
    if done < len(indeg):
        blocked = sorted((ps for ps, x in indeg.items() if x > 0), key=Pass.key)
        report(CYCLE, f"{len(blocked)} passes wait on each other (deadlock)", blocked[0])
    return found


# ----------------------------------------------------------------- JSON

SCHEDULE_FORMAT = "pipelab.schedule/1"


def schedule_to_dict(schedule: Schedule) -> dict:
    sch = schedule
    passes = sorted(set(sch.passes()), key=Pass.key)
    index = {ps: j for j, ps in enumerate(passes)}
    edges = sorted((index[a], index[b]) for b, pre in sch.deps.items() if b in index
                   for a in pre if a in index)
    return {
        "format": SCHEDULE_FORMAT,
        "scheme": sch.scheme.value,
        "p": sch.p, "v": sch.v, "m": sch.m, "n": sch.n,
        "vocab": sch.vocab,
        "placement": list(sch.placement),
        "passes": [list(ps.key()) for ps in passes],
        "programs": [[index[ps] for ps in prog] for prog in sch.programs],
        "edges": [list(e) for e in edges],
        "ticks": [[index[ps], col, ph] for ps, (col, ph) in sorted(sch.ticks.items(), key=lambda x: index[x[0]])],
        "exchanges": [{"sender": index[e.sender], "receiver": index[e.receiver],
                       "chunks": list(e.chunks), "early": e.early} for e in sch.exchanges],
    }


def schedule_from_dict(doc: Mapping) -> Schedule:
    if doc.get("format") != SCHEDULE_FORMAT:
        raise ValueError(f"not a schedule document (format={doc.get('format')!r})")
    passes = [Pass(PassKind(kd), k, i, s, d) for kd, k, i, s, d in doc["passes"]]
    deps: dict[Pass, list[Pass]] = {ps: [] for ps in passes}
    for a, b in doc["edges"]:
        deps[passes[b]].append(passes[a])
    return Schedule(
        scheme=Scheme(doc["scheme"]), p=doc["p"], v=doc["v"], m=doc["m"], n=doc["n"],
        placement=tuple(doc["placement"]),
        programs=tuple(tuple(passes[j] for j in prog) for prog in doc["programs"]),
        deps={ps: tuple(pre) for ps, pre in deps.items()},
        ticks={passes[j]: (col, ph) for j, col, ph in doc.get("ticks", [])},
        vocab=doc.get("vocab"),
        exchanges=tuple(ExchangeEdge(passes[e["sender"]], passes[e["receiver"]], tuple(e["chunks"]), e["early"])
                        for e in doc.get("exchanges", [])),
    )
