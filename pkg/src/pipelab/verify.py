"""Independent oracles and the check suites behind ``pipelab verify``."""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from . import schedules as S
from .analytics import bubble_bounds, memory_multiplier, slim_acc_memory
from .attention import AttnChunkState, chunk_attention, merge_partials, split_chunks, state_over
from .exchange import balance_tick, cp_comm_volume, exchange_volume, exchange_volume_bound
from .runner import run_point
from .schedules import Pass, PassKind, Scheme, generate, validate_schedule
from .sim import unit_memory_model
from .workload import (GiB, LLAMA_70B, Checkpointing, CostModel, ModelConfig, ParallelismConfig,
                       RunConfig, activation_bytes, logits_bytes)


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    expected: str
    actual: str
    ok: bool

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.suite}/{self.name}: expected {self.expected}, actual {self.actual}"


def _check(suite, name, expected, actual, ok=None) -> Check:
    if ok is None:
        ok = expected == actual
    return Check(suite, name, _show(expected), _show(actual), bool(ok))


def _show(x) -> str:
    if isinstance(x, Fraction):
        return str(x) if x.denominator == 1 else f"{x} ({float(x):.6g})"
    return str(x)


# ----------------------------------------------------------------- attention oracles


def monolithic_attention(query, keys, values, causal: bool = False, query_offset: Optional[int] = None):
    """Plain softmax(Q K^T / sqrt(d)) V over all keys at once (float64)."""
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    scores = q @ k.T / np.sqrt(q.shape[1])
    if causal:
        off = k.shape[0] - q.shape[0] if query_offset is None else query_offset
        mask = np.arange(k.shape[0])[None, :] <= (np.arange(q.shape[0]) + off)[:, None]
        scores = np.where(mask, scores, -np.inf)
    m = scores.max(axis=1)
    e = np.exp(scores - m[:, None])
    l = e.sum(axis=1)
    return (e @ v) / l[:, None]


def attention_query_jacobian(query, keys, values, row: int) -> np.ndarray:
    """d out[row] / d query[row] for non-causal attention: (1/sqrt d) V^T diag(P) (K - P K)."""
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = q.shape[1]
    s = k @ q[row] / np.sqrt(d)
    pr = np.exp(s - s.max())
    pr /= pr.sum()
    kbar = pr @ k
    return (v.T * pr) @ (k - kbar) / np.sqrt(d)


def finite_difference_jacobian(query, keys, values, row: int, eps: float = 1e-6) -> np.ndarray:
    q = np.array(query, dtype=np.float64)
    dv = np.asarray(values).shape[1]
    jac = np.zeros((dv, q.shape[1]))
    for c in range(q.shape[1]):
        hi, lo = q.copy(), q.copy()
        hi[row, c] += eps
        lo[row, c] -= eps
        out_hi, _ = chunk_attention(hi, [(keys, values)])
        out_lo, _ = chunk_attention(lo, [(keys, values)])
        jac[:, c] = (out_hi[row] - out_lo[row]) / (2 * eps)
    return jac


def rel_error(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def random_attention_instance(rng: np.random.Generator, max_rows: int = 1024, max_chunks: int = 16):
    """Random query rows, head dim, and a causal/non-causal chunk split."""
    chunks = int(rng.integers(1, max_chunks + 1))
    rows = int(rng.integers(1, max_rows + 1))
    d = int(rng.integers(4, 65))
    dv = int(rng.integers(4, 65))
    causal = bool(rng.integers(0, 2))
    total = int(rng.integers(max(chunks, rows if causal else 1), max(chunks, rows if causal else 1) + 1024))
    cuts = np.sort(rng.choice(np.arange(1, total), size=chunks - 1, replace=False)) if chunks > 1 else np.array([], int)
    sizes = list(np.diff(np.concatenate([[0], cuts, [total]])).astype(int))
    q = rng.standard_normal((rows, d))
    k = rng.standard_normal((total, d))
    v = rng.standard_normal((total, dv))
    return q, k, v, sizes, causal


# ----------------------------------------------------------------- negative fixtures


def reverse_order_fixture() -> S.Schedule:
    """SlimPipe schedule whose device-1 backward of slice 1 runs before slice 2."""
    sch = generate(Scheme.SLIMPIPE, 4, 2, 8, 1)
    prog = list(sch.program(1))
    a = prog.index(Pass(PassKind.BACKWARD_FUSED, 1, 1, 1, 1))
    b = prog.index(Pass(PassKind.BACKWARD_FUSED, 1, 2, 1, 1))
    prog[a], prog[b] = prog[b], prog[a]
    return replace(sch, programs=(tuple(prog),) + sch.programs[1:])


def missing_pass_fixture() -> S.Schedule:
    """1F1B schedule with one forward dropped from device 2."""
    sch = generate(Scheme.ONE_F_ONE_B, 4, 4)
    drop = Pass(PassKind.FORWARD, 3, 1, 2, 2)
    progs = tuple(tuple(ps for ps in prog if ps != drop) for prog in sch.programs)
    return replace(sch, programs=progs)


def cycle_fixture() -> S.Schedule:
    """GPipe schedule where device 1 starts with the backward of microbatch 1."""
    sch = generate(Scheme.GPIPE, 4, 4)
    prog = list(sch.program(1))
    b = Pass(PassKind.BACKWARD_FUSED, 1, 1, 1, 1)
    prog.remove(b)
    prog.insert(0, b)
    return replace(sch, programs=(tuple(prog),) + sch.programs[1:])


NEGATIVE_FIXTURES: dict[str, tuple[Callable[[], S.Schedule], str]] = {
    "reverse-order": (reverse_order_fixture, S.REVERSE_ORDER),
    "missing-pass": (missing_pass_fixture, S.COVERAGE),
    "cycle": (cycle_fixture, S.CYCLE),
}


# ----------------------------------------------------------------- suites


def suite_formulas() -> list[Check]:
    out = []
    su = "formulas"
    for p, n, want in ((4, 4, Fraction(5, 8)), (8, 8, Fraction(11, 32)), (16, 16, Fraction(23, 128))):
        res = run_point(Scheme.SLIMPIPE, p, 4, n, 1)
        out.append(_check(su, f"eq1 p={p} n={n}", want, res.ledger.peak_fraction(1)))
        out.append(_check(su, f"eq1 closed form p={p} n={n}", want, slim_acc_memory(p, n)))
    grid = [("gpipe", 4, 4, 1, 1), ("terapipe", 4, 4, 4, 1), ("1f1b", 4, 8, 1, 1),
            ("interleaved", 4, 8, 1, 2), ("zbv", 4, 8, 1, 2), ("vhalf", 4, 8, 1, 2),
            ("slimpipe", 4, 4, 8, 1), ("slimpipe", 4, 4, 8, 2)]
    for scheme, p, m, n, v in grid:
        res = run_point(scheme, p, m, n, v)
        out.append(_check(su, f"memory {scheme} p={p} m={m} n={n} v={v}",
                          memory_multiplier(scheme, p, m, n, v, saturate=True), res.ledger.max_peak_fraction))
    for scheme, p, m, n, v in (("gpipe", 4, 4, 1, 1), ("1f1b", 4, 4, 1, 1), ("1f1b", 4, 8, 1, 1),
                               ("interleaved", 4, 8, 1, 2)):
        res = run_point(scheme, p, m, n, v)
        out.append(_check(su, f"bubble {scheme} p={p} m={m} v={v}", bubble_bounds(scheme, p, m, n, v).lower,
                          Fraction(res.metrics.bubble_fraction)))
    for scheme, p, m, n, v in (("terapipe", 4, 4, 4, 1), ("slimpipe", 4, 4, 8, 1), ("slimpipe", 4, 2, 8, 2)):
        res = run_point(scheme, p, m, n, v, exchange="on")
        bound = bubble_bounds(scheme, p, m, n, v).upper
        b = Fraction(res.metrics.bubble_fraction)
        out.append(_check(su, f"bubble {scheme} p={p} m={m} n={n} v={v}", f"<= {bound}", b, ok=b <= bound))
    theta = exchange_volume(4, 8, 1, 1)
    out.append(_check(su, "eq2 p=4 n=8", Fraction(11, 8), theta))
    out.append(_check(su, "eq2 bound p=4 n=8", f"<= {exchange_volume_bound(4, 8, 1, 1)}", theta,
                      ok=theta <= exchange_volume_bound(4, 8, 1, 1)))
    res = run_point(Scheme.SLIMPIPE, 4, 3, 8, 1, exchange="on")
    acc = res.metrics.exchange_accounted
    out.append(_check(su, "eq2 simulated p=4 n=8 (device 2, microbatch 2)", theta, acc.get((2, 2))))
    par = ParallelismConfig(tp=8)
    run = RunConfig(seq_len=1 << 20)
    out.append(_check(su, "activation Llama 70B S=2^20 t=8", Fraction(160 * GiB),
                      activation_bytes(LLAMA_70B, par, run).M_a))
    lg = logits_bytes(ModelConfig(1, 8, 8, 1, vocab=128000), par, RunConfig(seq_len=1 << 18))
    out.append(_check(su, "logits S=2^18 V=128000 t=8 (GiB, 5%)", 16, round(float(lg) / GiB, 4),
                      ok=abs(float(lg) / GiB - 16) <= 0.8))
    out.append(_check(su, "cp kv_ring/commutated n=8", Fraction(9, 2),
                      cp_comm_volume("kv_ring", 8) / cp_comm_volume("commutated", 8)))
    return out


def arithmetic_progressions(max_p: int = 32):
    for p in range(1, max_p + 1):
        for step in range(0, 4):
            for low in (1, 2, 5):
                desc = [low + step * (p - 1 - j) for j in range(p)]
                yield desc
                if step:
                    yield desc[::-1]


def suite_balance(random_cases: int = 1000, seed: int = 0) -> list[Check]:
    su = "balance"
    out = []
    plan = balance_tick([7, 6, 5, 4, 3, 2])
    got = [(t.src, t.dst, t.kv_chunks) for t in plan.transfers]
    out.append(_check(su, "fig7 transfers", [(1, 6, (6, 7)), (2, 5, (6,))], got))
    out.append(_check(su, "fig7 loads", (5, 5, 5, 4, 4, 4), plan.loads_after))
    worst, count = 0, 0
    for loads in arithmetic_progressions():
        pl = balance_tick(loads)
        count += 1
        worst = max(worst, pl.spread)
        if sum(pl.loads_after) != sum(loads):
            out.append(_check(su, f"conservation {loads}", sum(loads), sum(pl.loads_after)))
    out.append(_check(su, f"arithmetic progressions p<=32 ({count} inputs) max spread", "<= 1", worst, ok=worst <= 1))
    rng = random.Random(seed)
    worst = 0
    for _ in range(random_cases):
        p = rng.randint(1, 32)
        loads = [rng.randint(1, 64) for _ in range(p)]
        worst = max(worst, balance_tick(loads).spread)
    out.append(_check(su, f"random inputs ({random_cases}) max spread", "<= 1", worst, ok=worst <= 1))
    return out


def suite_kernel(instances: int = 20, seed: int = 0) -> list[Check]:
    su = "kernel"
    out = []
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        q, k, v, sizes, causal = random_attention_instance(rng, max_rows=256)
        got, _ = chunk_attention(q, split_chunks(k, v, sizes), causal=causal)
        worst = max(worst, rel_error(got, monolithic_attention(q, k, v, causal)))
    out.append(_check(su, f"chunked vs monolithic ({instances} instances)", "<= 1e-06", f"{worst:.3g}",
                      ok=worst <= 1e-6))
    q = rng.standard_normal((16, 8))
    k = rng.standard_normal((40, 8))
    v = rng.standard_normal((40, 8))
    single, _ = chunk_attention(q, [(k, v)])
    out.append(_check(su, "single chunk bit-exact", True, bool(np.array_equal(single, monolithic_attention(q, k, v)))))
    chunks = split_chunks(k, v, [5] * 8)
    full = state_over(q, chunks)
    worst = 0.0
    for j in range(1, 8):
        merged = merge_partials(state_over(q, chunks[:j]), state_over(q, chunks[j:]))
        worst = max(worst, rel_error(merged.partial_output, full.partial_output))
    out.append(_check(su, "split-point sweep", "<= 1e-06", f"{worst:.3g}", ok=worst <= 1e-6))
    a, b, c = state_over(q, chunks[:3]), state_over(q, chunks[3:5]), state_over(q, chunks[5:])
    left = merge_partials(merge_partials(a, b), c)
    right = merge_partials(a, merge_partials(b, c))
    err = rel_error(left.partial_output, right.partial_output)
    out.append(_check(su, "merge associativity", "<= 1e-06", f"{err:.3g}", ok=err <= 1e-6))
    q4 = rng.standard_normal((4, 4))
    k4 = rng.standard_normal((4, 4))
    v4 = rng.standard_normal((4, 4))
    worst = max(rel_error(finite_difference_jacobian(q4, k4, v4, r), attention_query_jacobian(q4, k4, v4, r))
                for r in range(4))
    out.append(_check(su, "query Jacobian finite difference", "<= 1e-04", f"{worst:.3g}", ok=worst <= 1e-4))
    return out


def suite_schedules() -> list[Check]:
    su = "schedules"
    out = []
    grid = [("gpipe", 4, 4, 1, 1), ("terapipe", 4, 4, 4, 1), ("1f1b", 4, 4, 1, 1), ("interleaved", 4, 8, 1, 2),
            ("zbv", 4, 8, 1, 2), ("vhalf", 4, 8, 1, 2), ("slimpipe", 4, 2, 8, 1), ("slimpipe", 4, 2, 8, 2)]
    for scheme, p, m, n, v in grid:
        bad = validate_schedule(generate(scheme, p, m, n, v))
        out.append(_check(su, f"valid {scheme} p={p} m={m} n={n} v={v}", "no violations",
                          "; ".join(map(str, bad)) or "no violations"))
    for name, (build, rule) in NEGATIVE_FIXTURES.items():
        bad = validate_schedule(build())
        out.append(_check(su, f"negative fixture {name}", rule, bad[0].rule if bad else "no violations"))
    return out


SUITES: dict[str, Callable[[], list[Check]]] = {
    "formulas": suite_formulas,
    "balance": suite_balance,
    "kernel": suite_kernel,
    "schedules": suite_schedules,
}


def run_suites(name: str = "all") -> list[Check]:
    names = list(SUITES) if name == "all" else [name]
    out = []
    for nm in names:
        if nm not in SUITES:
            raise ValueError(f"unknown suite {nm!r}")
        out.extend(SUITES[nm]())
    return out
