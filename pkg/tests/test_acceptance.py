"""Acceptance criteria 1-12, one test each.

Every test prints a ``CRITERION k: PASS|FAIL`` line (also collected into the
terminal summary by conftest.py).  Running this file directly prints the same
lines without pytest.  Criteria that the implementation does not meet fail
here on purpose; decisions.md explains why.
"""

from __future__ import annotations

import functools
import itertools
import random
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from pipelab import cli
from pipelab.analytics import bubble_bounds, memory_multiplier, slimpipe_attention_asymptote
from pipelab.attention import chunk_attention, merge_partials, split_chunks, state_over
from pipelab.exchange import balance_tick, exchange_volume, exchange_volume_bound
from pipelab.runner import build_schedule, run_point
from pipelab.schedules import Scheme, generate, validate_schedule
from pipelab.sim import simulate, unit_memory_model
from pipelab.verify import (NEGATIVE_FIXTURES, arithmetic_progressions, attention_query_jacobian,
                            finite_difference_jacobian, monolithic_attention, random_attention_instance,
                            rel_error)
from pipelab.workload import (LLAMA_70B, CostModel, ModelConfig, ParallelismConfig, RunConfig, activation_bytes,
                              logits_bytes, pass_cost)

GiB = 1 << 30
PS = (2, 4, 8, 16)
MS = (2, 4, 8)
VS = (1, 2)

RESULTS: dict[int, "Result"] = {}


@dataclass
class Result:
    number: int
    title: str
    ok: bool = True
    checked: int = 0
    notes: list = field(default_factory=list)

    def fail(self, note: str):
        self.ok = False
        self.notes.append(note)

    def line(self) -> str:
        head = f"CRITERION {self.number:2d}: {'PASS' if self.ok else 'FAIL'}  {self.title} ({self.checked} checks)"
        if self.ok:
            return head
        shown = self.notes[:6]
        more = f"; ... {len(self.notes) - len(shown)} more" if len(self.notes) > len(shown) else ""
        return f"{head}: {'; '.join(shown)}{more}"


def _report(res: Result):
    RESULTS[res.number] = res
    print(res.line())
    assert res.ok, res.line()


def _sizes_grid():
    """(scheme, p, m, n, v) over the criterion-1 grid extended with v=2 and m in {2, 4, 8}."""
    for scheme in Scheme:
        for p, m, v in itertools.product(PS, MS, VS):
            ns = (p, 2 * p, 4 * p, 8 * p) if scheme in (Scheme.SLIMPIPE, Scheme.TERAPIPE) else (1,)
            for n in ns:
                yield scheme, p, m, n, v


def _applicable(scheme, p, m, n, v) -> bool:
    """Sizes the generator accepts; other points of the product are skipped, not failed."""
    try:
        generate(scheme, p, m, n, v)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class GridPoint:
    scheme: Scheme
    p: int
    m: int
    n: int
    v: int
    memory: Fraction  # simulated max peak, exchange off
    bubble: Fraction  # simulated bubble, exchange on for SlimPipe
    quantum: Fraction  # shortest pass as a bubble fraction
    violations: tuple  # (variant, first violation) for every variant that failed validation
    variants: int


def _quantum_tolerance(sim, p) -> Fraction:
    """One scheduling quantum (the shortest pass) expressed as a bubble fraction."""
    shortest = min(iv.busy for row in sim.timeline.devices for iv in row)
    return Fraction(p) * Fraction(shortest) / Fraction(sim.metrics.busy_total)


@functools.cache
def _grid() -> tuple[tuple[GridPoint, ...], int]:
    """Build, validate and simulate every grid schedule once; criteria 2, 3 and 11 read the records."""
    points, skipped = [], 0
    for scheme, p, m, n, v in _sizes_grid():
        if not _applicable(scheme, p, m, n, v):
            skipped += 1
            continue
        variants = [("off", None)]
        if scheme is Scheme.SLIMPIPE:
            variants += [("on", None), ("early", None)]
        if p <= 4:
            variants += [("off", False), ("off", True)]
        bad, sims = [], {}
        for exchange, vocab in variants:
            sch = build_schedule(scheme, p, m, n, v, exchange=exchange, vocab_parallel=vocab)
            found = validate_schedule(sch)
            if found:
                bad.append((f"exchange={exchange} vocab={vocab}", str(found[0])))
            if vocab is None and exchange in ("off", "on"):
                sims[exchange] = simulate(sch, CostModel(), unit_memory_model(p, v, n))
            del sch
        timed = sims["on" if scheme is Scheme.SLIMPIPE else "off"]
        points.append(GridPoint(scheme, p, m, n, v, sims["off"].ledger.max_peak_fraction,
                                Fraction(timed.metrics.bubble_fraction), _quantum_tolerance(timed, p),
                                tuple(bad), len(variants)))
    return tuple(points), skipped


# ----------------------------------------------------------------- criteria


def criterion_1() -> Result:
    res = Result(1, "slice-wise 1F1B device-1 peak equals (1+2(p-1)/n)/p exactly")
    worst = 0.0
    for p in PS:
        for n in (p, 2 * p, 4 * p, 8 * p):
            t = time.perf_counter()
            got = run_point(Scheme.SLIMPIPE, p, 4, n, 1).ledger.peak_fraction(1)
            worst = max(worst, time.perf_counter() - t)
            want = (1 + Fraction(2 * (p - 1), n)) / p
            res.checked += 1
            if got != want:
                res.fail(f"p={p} n={n}: {got} != {want}")
    for p, n, pct in ((4, 4, Fraction(625, 1000)), (8, 8, Fraction(34375, 100000)), (16, 16, Fraction(17969, 100000))):
        got = run_point(Scheme.SLIMPIPE, p, 4, n, 1).ledger.peak_fraction(1)
        res.checked += 1
        if abs(got - pct) > Fraction(1, 100000):
            res.fail(f"spot p={p} n={n}: {float(got):.6f} != {float(pct)}")
    res.checked += 1
    if worst >= 1.0:
        res.fail(f"slowest point took {worst:.2f} s")
    return res


def criterion_2() -> Result:
    points, skipped = _grid()
    res = Result(2, f"simulated peak activation equals the closed form (saturated at m/p), "
                    f"{skipped} inapplicable sizes skipped")
    for g in points:
        want = memory_multiplier(g.scheme, g.p, g.m, g.n, g.v, saturate=True)
        res.checked += 1
        if g.memory != want:
            res.fail(f"{g.scheme.value} p={g.p} m={g.m} n={g.n} v={g.v}: {g.memory} != {want}")
    return res


def criterion_3() -> Result:
    res = Result(3, "bubble fractions match the closed forms or lie within their bounds")
    for g in _grid()[0]:
        bound = bubble_bounds(g.scheme, g.p, g.m, g.n, g.v)
        b = g.bubble
        res.checked += 1
        if bound.exact:
            ok = abs(b - bound.lower) <= g.quantum
        elif bound.soft:
            ok = bound.contains(b)
        else:
            ok = b <= bound.upper + g.quantum
        if not ok:
            lo = float(bound.lower * (Fraction(9, 10) if bound.soft else 1))
            hi = float(bound.upper * (Fraction(11, 10) if bound.soft else 1))
            res.fail(f"{g.scheme.value} p={g.p} m={g.m} n={g.n} v={g.v}: {float(b):.4f} not in [{lo:.4f}, {hi:.4f}]")
    return res


def criterion_4() -> Result:
    res = Result(4, "attention-dominated SlimPipe bubble within 10% of (p-1)p/((n+1)nvm)")
    cost = CostModel(alpha_linear=1, beta_attn=10 ** 4)
    for n, m in itertools.product((8, 16), (2, 4)):
        p = 4
        sim = run_point(Scheme.SLIMPIPE, p, m, n, 1, cost=cost, exchange="on", seq_len=n)
        b = Fraction(sim.metrics.bubble_fraction)
        want = slimpipe_attention_asymptote(p, m, n, 1)
        res.checked += 1
        if abs(b - want) > want / 10:
            res.fail(f"p={p} n={n} m={m}: {float(b):.4f} vs {float(want):.4f}")
    return res


def criterion_5() -> Result:
    res = Result(5, "accounted exchange bytes per microbatch per device equal the closed-form volume")
    m = 3  # microbatch 2 has neighbours on both sides
    for p in range(2, 9):
        for n in range(p, 8 * p + 1, p):
            theta = exchange_volume(p, n, 1, 1)
            res.checked += 1
            if theta > exchange_volume_bound(p, n, 1, 1):
                res.fail(f"p={p} n={n}: volume {theta} above bound")
            acc = run_point(Scheme.SLIMPIPE, p, m, n, 1, exchange="on",
                            memory=unit_memory_model(p, 1, n)).metrics.exchange_accounted
            for d in range(1, p + 1):
                res.checked += 1
                if acc.get((d, 2)) != theta:
                    res.fail(f"p={p} n={n} device {d}: {acc.get((d, 2))} != {theta}")
    res.checked += 1
    if exchange_volume(4, 8, 1, 1) != Fraction(11, 8):
        res.fail(f"spot p=4 n=8: {exchange_volume(4, 8, 1, 1)} != 11/8")
    return res


def criterion_6() -> Result:
    res = Result(6, "balance_tick leaves max-min <= 1 and reproduces the six-device example")
    for loads in arithmetic_progressions(32):
        plan = balance_tick(loads)
        res.checked += 1
        if plan.spread > 1 or sum(plan.loads_after) != sum(loads):
            res.fail(f"{loads}: after {plan.loads_after}")
    rng = random.Random(2024)
    for _ in range(10 ** 4):
        loads = [rng.randint(1, 64) for _ in range(rng.randint(1, 32))]
        plan = balance_tick(loads)
        res.checked += 1
        if plan.spread > 1 or sum(plan.loads_after) != sum(loads):
            res.fail(f"{loads}: after {plan.loads_after}")
    plan = balance_tick([7, 6, 5, 4, 3, 2])
    got = [(t.src, t.dst, t.kv_chunks) for t in plan.transfers]
    res.checked += 2
    if got != [(1, 6, (6, 7)), (2, 5, (6,))]:
        res.fail(f"example transfers {got}")
    if plan.loads_after != (5, 5, 5, 4, 4, 4):
        res.fail(f"example loads {plan.loads_after}")
    return res


def criterion_7() -> Result:
    res = Result(7, "chunked online-softmax attention matches the monolithic oracle")
    rng = np.random.default_rng(7)
    kinds = set()
    for _ in range(100):
        q, k, v, sizes, causal = random_attention_instance(rng, max_rows=1024, max_chunks=16)
        kinds.add(causal)
        got, _ = chunk_attention(q, split_chunks(k, v, sizes), causal=causal)
        err = rel_error(got, monolithic_attention(q, k, v, causal))
        res.checked += 1
        if err > 1e-6:
            res.fail(f"instance rows={q.shape[0]} chunks={len(sizes)} causal={causal}: {err:.2e}")
    res.checked += 1
    if kinds != {True, False}:
        res.fail("random instances did not cover both causal and non-causal")
    for causal in (False, True):
        q = rng.standard_normal((48, 16))
        k = rng.standard_normal((96, 16))
        v = rng.standard_normal((96, 8))
        chunks = split_chunks(k, v, [12] * 8)
        off = 96 - 48
        full = state_over(q, chunks, causal, off)
        for j in range(1, 8):
            left = state_over(q, chunks[:j], causal, off)
            right = state_over(q, chunks[j:], causal, off, start=12 * j)
            err = rel_error(merge_partials(left, right).partial_output, full.partial_output)
            res.checked += 1
            if err > 1e-6:
                res.fail(f"split at chunk {j} causal={causal}: {err:.2e}")
        a = state_over(q, chunks[:3], causal, off)
        b = state_over(q, chunks[3:5], causal, off, start=36)
        c = state_over(q, chunks[5:], causal, off, start=60)
        err = rel_error(merge_partials(merge_partials(a, b), c).partial_output,
                        merge_partials(a, merge_partials(b, c)).partial_output)
        res.checked += 1
        if err > 1e-6:
            res.fail(f"associativity causal={causal}: {err:.2e}")
    q = rng.standard_normal((6, 5))
    k = rng.standard_normal((9, 5))
    v = rng.standard_normal((9, 4))
    for row in range(6):
        err = rel_error(finite_difference_jacobian(q, k, v, row), attention_query_jacobian(q, k, v, row))
        res.checked += 1
        if err > 1e-4:
            res.fail(f"Jacobian row {row}: {err:.2e}")
    return res


def criterion_8() -> Result:
    res = Result(8, "activation and logits byte arithmetic")
    par = ParallelismConfig(tp=8)
    got = activation_bytes(LLAMA_70B, par, RunConfig(seq_len=1 << 20)).M_a
    res.checked += 1
    if got != 160 * GiB:
        res.fail(f"activation {got} != 160 GiB")
    model = ModelConfig(layers=1, hidden=8, ffn=8, heads=1, vocab=128000)
    lg = logits_bytes(model, par, RunConfig(seq_len=1 << 18))
    res.checked += 1
    if abs(float(lg) / GiB - 16) > 0.8:
        res.fail(f"logits {float(lg) / GiB:.3f} GiB not within 5% of 16")
    return res


def criterion_9() -> Result:
    res = Result(9, "vocab passes: last-device idle gap without distribution, none with it")
    model = ModelConfig(layers=8, hidden=64, ffn=256, heads=4, vocab=1000, name="tiny")
    for scheme, p, m, n, v, exchange in (("slimpipe", 4, 4, 8, 1, "on"), ("slimpipe", 4, 2, 8, 2, "on"),
                                         ("slimpipe", 8, 2, 16, 1, "on")):
        seq = 64 * n
        run = RunConfig(seq_len=seq, microbatches=m, slices=n)
        mm = activation_bytes(model, ParallelismConfig(pp=p, stages_per_device=v), run)
        base = run_point(scheme, p, m, n, v, cost=CostModel(vocab_gemm=0), exchange=exchange, memory=mm,
                         seq_len=seq)
        cost = CostModel(vocab_gemm=1)
        per_mb = n * (pass_cost(cost, "VF", seq // n) + pass_cost(cost, "VB", seq // n))
        last = run_point(scheme, p, m, n, v, cost=cost, exchange=exchange, vocab_parallel=False, memory=mm,
                         seq_len=seq)
        dist = run_point(scheme, p, m, n, v, cost=cost, exchange=exchange, vocab_parallel=True, memory=mm,
                         seq_len=seq)
        tag = f"{scheme} p={p} m={m} n={n} v={v}"
        for d in range(p - 1):
            gap = last.metrics.idle[d] - base.metrics.idle[d]
            res.checked += 1
            if gap != m * per_mb:
                res.fail(f"{tag} last-device vocab, device {d + 1}: idle grew by {gap}, expected {m * per_mb}")
        for d in range(p):
            gap = dist.metrics.idle[d] - base.metrics.idle[d]
            res.checked += 1
            if gap != 0:
                res.fail(f"{tag} distributed vocab, device {d + 1}: idle grew by {gap}")
        ratio = Fraction(last.ledger.logits_peak[p - 1]) / Fraction(dist.ledger.logits_peak[p - 1])
        res.checked += 1
        if ratio != p:
            res.fail(f"{tag} last-device logits ratio {ratio} != {p}")
    return res


def criterion_10() -> Result:
    res = Result(10, "SlimPipe runs with two microbatches; interleaved 1F1B rejects them")
    for n in (4, 8):
        sch = generate(Scheme.SLIMPIPE, 4, 2, n, 2)
        bad = validate_schedule(sch)
        res.checked += 1
        if bad:
            res.fail(f"slimpipe p=4 m=2 n={n} v=2: {bad[0]}")
        sim = run_point(Scheme.SLIMPIPE, 4, 2, n, 2, exchange="on")
        res.checked += 1
        if sim.metrics.makespan <= 0:
            res.fail("empty simulation")
    res.checked += 1
    try:
        generate(Scheme.INTERLEAVED, 4, 2, 1, 2)
        res.fail("interleaved generator accepted m=2, p=4, v=2")
    except ValueError:
        pass
    return res


def criterion_11() -> Result:
    res = Result(11, "every generator passes validation; negative fixtures fail with the named rule")
    for g in _grid()[0]:
        res.checked += g.variants
        for variant, first in g.violations:
            res.fail(f"{g.scheme.value} p={g.p} m={g.m} n={g.n} v={g.v} {variant}: {first}")
    for name, (build, rule) in NEGATIVE_FIXTURES.items():
        bad = validate_schedule(build())
        res.checked += 1
        if not bad or bad[0].rule != rule:
            res.fail(f"fixture {name}: got {bad[0].rule if bad else 'no violations'}, expected {rule}")
    return res


def criterion_12(tmp: Path) -> Result:
    res = Result(12, "repeated simulate runs write byte-identical files")
    argv = ["simulate", "--scheme", "slimpipe", "--p", "4", "--m", "2", "--n", "8", "--v", "2",
            "--exchange", "on", "--beta-attn", "0.01", "--vocab-parallel"]
    for gantt in ("svg", "json"):
        outs = []
        for rep in range(2):
            out = tmp / f"{gantt}{rep}"
            code = cli.main(argv + ["--gantt", gantt, "--out", str(out)])
            res.checked += 1
            if code != 0:
                res.fail(f"simulate exited {code}")
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        res.checked += 1
        if outs[0] != outs[1]:
            diff = sorted(k for k in outs[0] if outs[0][k] != outs[1].get(k))
            res.fail(f"gantt={gantt}: files differ: {diff}")
        if f"gantt.{gantt}" not in outs[0]:
            res.fail(f"gantt.{gantt} not written")
    return res


# ----------------------------------------------------------------- pytest entry points


@pytest.mark.parametrize("number", range(1, 12))
def test_criterion(number):
    _report(globals()[f"criterion_{number}"]())


def test_criterion_12(tmp_path):
    _report(criterion_12(tmp_path))


if __name__ == "__main__":
    import tempfile

    failed = 0
    for k in range(1, 13):
        t = time.perf_counter()
        if k == 12:
            with tempfile.TemporaryDirectory() as d:
                r = criterion_12(Path(d))
        else:
            r = globals()[f"criterion_{k}"]()
        failed += not r.ok
        print(f"{r.line()}  [{time.perf_counter() - t:.1f} s]", flush=True)
    sys.exit(1 if failed else 0)
