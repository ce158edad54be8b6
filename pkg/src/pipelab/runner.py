"""Build a schedule from scheme sizes plus options, then simulate it."""

from __future__ import annotations

from typing import Optional

from .exchange import exchange_schedule
from .schedules import Schedule, Scheme, generate, place_vocab, validate_schedule
from .sim import CommModel, SimResult, simulate
from .workload import CostModel, MemoryModel

EXCHANGE_MODES = ("off", "on", "early")


class ScheduleInvalid(ValueError):
    def __init__(self, violations):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


def build_schedule(scheme, p: int, m: int, n: int = 1, v: int = 1, exchange: str = "off",
                   vocab_parallel: Optional[bool] = None, validate: bool = False, **kw) -> Schedule:
    """Generate, optionally validate, then add exchange edges and vocab passes.

    ``vocab_parallel`` None leaves the output layer folded into the last stage;
    False/True add explicit vocab passes on the last device / on every device.
    """
    if exchange not in EXCHANGE_MODES:
        raise ValueError(f"exchange must be one of {EXCHANGE_MODES}, got {exchange!r}")
    sch = generate(scheme, p, m, n, v, **kw)
    if validate:
        bad = validate_schedule(sch)
        if bad:
            raise ScheduleInvalid(bad)
    if exchange != "off" and sch.ticks and p > 1:
        sch = exchange_schedule(sch, early=exchange == "early")
    if vocab_parallel is not None:
        sch = place_vocab(sch, vocab_parallel)
    return sch


def run_point(scheme, p: int, m: int, n: int = 1, v: int = 1, cost: Optional[CostModel] = None,
              exchange: str = "off", vocab_parallel: Optional[bool] = None,
              memory: Optional[MemoryModel] = None, comm: Optional[CommModel] = None,
              seq_len: Optional[int] = None, **kw) -> SimResult:
    sch = build_schedule(Scheme(scheme), p, m, n, v, exchange, vocab_parallel, **kw)
    return simulate(sch, cost, memory, comm, seq_len)
