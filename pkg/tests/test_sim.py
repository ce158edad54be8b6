from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pipelab.runner import run_point
from pipelab.schedules import Scheme, gen_1f1b, gen_gpipe
from pipelab.sim import CommModel, DeadlockError, bubble_fraction, simulate
from pipelab.verify import cycle_fixture
from pipelab.workload import CostModel

POINTS = [("gpipe", 1, 1), ("1f1b", 1, 1), ("interleaved", 1, 2), ("terapipe", 8, 1),
          ("slimpipe", 8, 1), ("slimpipe", 8, 2), ("zbv", 1, 2), ("vhalf", 1, 2)]


def expected_busy(alpha, beta, p, m, n, S):
    # linear work: forward 1, backward 3 (input 2, weight 1); attention has no weight gradient
    linear = 4 * alpha * S * m * p
    attn = 3 * beta * m * p * (Fraction(S * S * (n + 1), 2 * n) if n > 1 else S * S)
    return linear + attn


def test_single_device_is_packed():
    res = simulate(gen_gpipe(1, 3))
    assert res.metrics.bubble_fraction == 0
    assert res.metrics.makespan == res.metrics.busy_total


@pytest.mark.parametrize("p,m", [(4, 4), (8, 4), (4, 8)])
def test_exact_bubbles_linear_costs(p, m):
    if m >= p:
        assert run_point("1f1b", p, m).metrics.bubble_fraction == Fraction(p - 1, m)
    assert run_point("gpipe", p, m).metrics.bubble_fraction == Fraction(p - 1, m)


def test_slimpipe_device1_peak_count():
    res = run_point("slimpipe", 4, 4, 8, 1)
    assert res.metrics.peak_slices == [14, 12, 10, 8]


def test_slimpipe_linear_bubble_under_bound():
    res = run_point("slimpipe", 4, 4, 8, 1, exchange="on")
    assert res.metrics.bubble_fraction <= Fraction(3, 32)


@given(st.integers(0, 3), st.integers(0, 3), st.sampled_from(POINTS))
def test_work_conservation(alpha, beta, point):
    scheme, n, v = point
    cm = CostModel(alpha_linear=alpha, beta_attn=beta)
    sliced = scheme in ("terapipe", "slimpipe")
    res = run_point(scheme, 4, 4, n, v, cost=cm, seq_len=64)
    assert res.metrics.busy_total == expected_busy(alpha, beta, 4, 4, n if sliced else 1, 64)
    if scheme == "slimpipe":
        on = run_point(scheme, 4, 4, n, v, cost=cm, exchange="on", seq_len=64)
        assert on.metrics.busy_total == res.metrics.busy_total


def test_exchange_removes_imbalance_idle():
    cm = CostModel(alpha_linear=0, beta_attn=1)
    off = run_point("slimpipe", 4, 2, 8, 1, cost=cm, exchange="off")
    on = run_point("slimpipe", 4, 2, 8, 1, cost=cm, exchange="on")
    assert max(off.metrics.steady_idle) > 0
    assert sum(on.metrics.steady_idle) < sum(off.metrics.steady_idle)
    assert on.metrics.makespan < off.metrics.makespan


def test_memory_returns_to_zero_and_pool_reuses_chunks():
    for scheme, n, v in POINTS:
        res = run_point(scheme, 4, 4, n, v)
        assert all(b == 0 for b in res.ledger.final_bytes)
        for d, pool in enumerate(res.ledger.pools):
            assert pool.allocated == pool.peak_in_use == res.metrics.peak_slices[d]
            assert pool.in_use == 0
        assert all(b >= 0 for row in res.ledger.series for _, b in row)
    assert run_point("slimpipe", 4, 4, 8, 1).ledger.pools[0].reuses > 0


def test_intervals_respect_program_order_and_latency():
    sch = gen_1f1b(4, 4)
    comm = CommModel(bandwidth=1000, latency=Fraction(1, 4))
    res = simulate(sch, comm_model=comm)
    spans = res.timeline.spans()
    for row in res.timeline.devices:
        for a, b in zip(row, row[1:]):
            assert a.end <= b.start
    for ps, deps in sch.deps.items():
        for dep in deps:
            gap = 0 if dep.device == ps.device else Fraction(1, 4)
            assert spans[ps][0] >= spans[dep][1] + gap
    assert res.metrics.makespan > simulate(sch).metrics.makespan


def test_determinism():
    a = run_point("slimpipe", 4, 2, 8, 2, cost=CostModel(beta_attn=1), exchange="on")
    b = run_point("slimpipe", 4, 2, 8, 2, cost=CostModel(beta_attn=1), exchange="on")
    assert a.timeline == b.timeline
    assert a.metrics == b.metrics


def test_deadlock_names_blocked_passes():
    with pytest.raises(DeadlockError) as err:
        simulate(cycle_fixture())
    assert err.value.blocked


def test_p2p_volume_unchanged_by_slicing():
    a = run_point("1f1b", 4, 4, seq_len=64).metrics
    b = run_point("slimpipe", 4, 4, 8, 1, seq_len=64).metrics
    assert a.comm_bytes == b.comm_bytes


def test_bubble_fraction_helper_matches_metrics():
    res = run_point(Scheme.ONE_F_ONE_B, 4, 8)
    got = bubble_fraction(res.timeline)
    assert got["bubble_fraction"] == res.metrics.bubble_fraction
    assert len(got["per_device"]) == 4
    assert all(i >= 0 for i in res.metrics.idle)
