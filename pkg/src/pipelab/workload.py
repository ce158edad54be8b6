"""Transformer and parallelism configuration, byte arithmetic and pass costs.

All byte quantities are computed with exact rationals (``fractions.Fraction``)
and only rounded up to whole bytes by :func:`ceil_bytes` at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Mapping, Optional

GiB = 1 << 30

Number = int | float | Fraction


class Checkpointing(str, Enum):
    NONE = "none"
    SELECTIVE = "selective"
    FULL = "full"


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    ffn: int
    heads: int
    query_groups: Optional[int] = None
    vocab: int = 128000
    bytes_per_element: int = 2
    loss_bytes_per_element: int = 4
    name: str = ""

    def __post_init__(self):
        for label in ("layers", "hidden", "ffn", "heads", "vocab", "bytes_per_element", "loss_bytes_per_element"):
            if getattr(self, label) < 1:
                raise ValueError(f"ModelConfig.{label} must be positive, got {getattr(self, label)}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.query_groups is not None:
            if self.query_groups < 1 or self.heads % self.query_groups:
                raise ValueError(f"heads {self.heads} not divisible by query_groups {self.query_groups}")

    @property
    def kv_ratio(self) -> Fraction:
        """g/a for grouped-query attention, 1 for plain multi-head attention."""
        if self.query_groups is None:
            return Fraction(1)
        return Fraction(self.query_groups, self.heads)

    def parameter_count(self) -> int:
        """Dense parameter count with one (tied) vocabulary matrix; norms ignored."""
        h, H = self.hidden, self.ffn
        attn = 2 * h * h + 2 * h * int(h * self.kv_ratio)
        mlp = 3 * h * H
        return self.layers * (attn + mlp) + self.vocab * h


@dataclass(frozen=True)
class ParallelismConfig:
    tp: int = 1
    cp: int = 1
    dp: int = 1
    ep: int = 1
    pp: int = 1
    stages_per_device: int = 1

    def __post_init__(self):
        for label in ("tp", "cp", "dp", "ep", "pp", "stages_per_device"):
            if getattr(self, label) < 1:
                raise ValueError(f"ParallelismConfig.{label} must be >= 1")

    @property
    def p(self) -> int:
        return self.pp

    @property
    def v(self) -> int:
        return self.stages_per_device


@dataclass(frozen=True)
class RunConfig:
    seq_len: int
    microbatches: int = 1
    slices: int = 1
    checkpointing: Checkpointing = Checkpointing.FULL
    offload_ratio: float = 0.0
    vocab_parallel: bool = False
    # per-token-per-layer element counts override; keys "hidden", "ffn", "kv"
    coefficients: Optional[Mapping[str, Number]] = None

    def __post_init__(self):
        object.__setattr__(self, "checkpointing", Checkpointing(self.checkpointing))
        if self.seq_len < 0:
            raise ValueError("seq_len must be nonnegative")
        if self.microbatches < 1 or self.slices < 1:
            raise ValueError("microbatches and slices must be >= 1")
        if self.seq_len % self.slices:
            raise ValueError(f"seq_len {self.seq_len} is not divisible by slices {self.slices}")
        if not 0.0 <= self.offload_ratio <= 1.0:
            raise ValueError("offload_ratio must lie in [0, 1]")

    @property
    def slice_tokens(self) -> int:
        return self.seq_len // self.slices


# Elements stored per token per layer, as multiples of h, H and the KV width h*g/a.
#   none:      norm inputs (2h), query (h), attention output (h), keys+values (2 kv),
#              SwiGLU gate, up and product (3H).  Norm outputs are recomputed.
#   selective: the up projection and SwiGLU are recomputed, so only the gate (1H)
#              of the MLP intermediates is kept.
#   full:      a single hidden tensor at each layer boundary.
DEFAULT_COEFFICIENTS: dict[Checkpointing, dict[str, Fraction]] = {
    Checkpointing.NONE: {"hidden": Fraction(4), "kv": Fraction(2), "ffn": Fraction(3)},
    Checkpointing.SELECTIVE: {"hidden": Fraction(4), "kv": Fraction(2), "ffn": Fraction(1)},
    Checkpointing.FULL: {"hidden": Fraction(1), "kv": Fraction(0), "ffn": Fraction(0)},
}


@dataclass(frozen=True)
class MemoryModel:
    """Exact byte sizes derived from a configuration.

    ``per_token_layer_bytes`` is already divided by ``t * c``.  ``embedding_bytes``
    is M_h and ``microbatch_activation_bytes`` is M_a.
    """

    per_token_layer_bytes: Fraction
    embedding_bytes: Fraction
    microbatch_activation_bytes: Fraction
    pp: int = 1
    stages_per_device: int = 1
    slices: int = 1
    layers: int = 1
    logits_bytes: Fraction = Fraction(0)  # full-sequence float32 logits, TP-sharded only

    @property
    def M_a(self) -> Fraction:
        return self.microbatch_activation_bytes

    @property
    def M_h(self) -> Fraction:
        return self.embedding_bytes

    def slice_activation_bytes(self, p: Optional[int] = None, v: Optional[int] = None,
                               n: Optional[int] = None) -> Fraction:
        """Bytes held by one forward pass of one slice on one stage: M_a/(n*p*v)."""
        p = self.pp if p is None else p
        v = self.stages_per_device if v is None else v
        n = self.slices if n is None else n
        return self.microbatch_activation_bytes / (n * p * v)


def ceil_bytes(x: Number) -> int:
    return math.ceil(Fraction(x))


def _coefficients(run: RunConfig) -> dict[str, Fraction]:
    coeffs = dict(DEFAULT_COEFFICIENTS[run.checkpointing])
    if run.coefficients:
        unknown = set(run.coefficients) - set(coeffs)
        if unknown:
            raise ValueError(f"unknown activation coefficient(s): {sorted(unknown)}")
        coeffs.update({k: Fraction(v) for k, v in run.coefficients.items()})
    return coeffs


def per_token_layer_bytes(model: ModelConfig, par: ParallelismConfig, run: RunConfig) -> Fraction:
    c = _coefficients(run)
    elements = c["hidden"] * model.hidden + c["ffn"] * model.ffn + c["kv"] * model.hidden * model.kv_ratio
    resident = 1 - Fraction(run.offload_ratio).limit_denominator(10**9)
    return elements * model.bytes_per_element * resident / (par.tp * par.cp)


def activation_bytes(model: ModelConfig, par: ParallelismConfig, run: RunConfig) -> MemoryModel:
    """M_a, M_h and the per-token-per-layer size for a configuration."""
    if run.seq_len % run.slices:
        raise ValueError(f"seq_len {run.seq_len} is not divisible by slices {run.slices}")
    ptl = per_token_layer_bytes(model, par, run)
    m_h = Fraction(run.seq_len * model.hidden * model.bytes_per_element, par.tp * par.cp)
    m_a = run.seq_len * ptl * model.layers
    logits = logits_bytes(model, par, replace(run, vocab_parallel=False))
    return MemoryModel(ptl, m_h, m_a, par.pp, par.stages_per_device, run.slices, model.layers, logits)


def logits_bytes(model: ModelConfig, par: ParallelismConfig, run: RunConfig) -> Fraction:
    """Float32 logits of one sequence, sharded by TP (and by PP when vocab-parallel)."""
    size = Fraction(run.seq_len * model.vocab * model.loss_bytes_per_element, par.tp)
    if run.vocab_parallel:
        size /= par.pp
    return size


# ---------------------------------------------------------------- costs


@dataclass(frozen=True)
class CostModel:
    alpha_linear: Number = 1
    beta_attn: Number = 0
    bwd_input_mult: Number = 2
    bwd_weight_mult: Number = 1
    vocab_gemm: Number = 0

    def __post_init__(self):
        for label in ("alpha_linear", "beta_attn", "bwd_input_mult", "bwd_weight_mult", "vocab_gemm"):
            if getattr(self, label) < 0:
                raise ValueError(f"CostModel.{label} must be nonnegative")

    def with_(self, **kw) -> "CostModel":
        return replace(self, **kw)


def pass_cost(cm: CostModel, kind, slice_tokens: Number, kv_tokens: Number = 0,
              output_stage: bool = False) -> Number:
    """Work units of one pass.

    ``kind`` is a :class:`pipelab.schedules.PassKind` (or a Pass, whose kind is used).
    ``output_stage`` folds the vocabulary GEMM into the last stage's passes for
    schedules that carry no explicit vocab passes.
    """
    from .schedules import PassKind  # local import: schedules imports this module

    kind = getattr(kind, "kind", kind)
    kind = PassKind(kind)
    if slice_tokens < 0 or kv_tokens < 0:
        raise ValueError("token counts must be nonnegative")
    T = slice_tokens
    linear = cm.alpha_linear * T
    attn = cm.beta_attn * T * kv_tokens
    vocab = cm.vocab_gemm * T if output_stage else 0
    if kind is PassKind.FORWARD:
        return linear + attn + vocab
    if kind is PassKind.BACKWARD_INPUT:
        return cm.bwd_input_mult * (linear + attn + vocab)
    if kind is PassKind.BACKWARD_WEIGHT:
        return cm.bwd_weight_mult * (linear + vocab)
    if kind is PassKind.BACKWARD_FUSED:
        return cm.bwd_input_mult * (linear + attn + vocab) + cm.bwd_weight_mult * (linear + vocab)
    if kind is PassKind.VOCAB_FORWARD:
        return cm.vocab_gemm * T
    if kind is PassKind.VOCAB_BACKWARD:
        return (cm.bwd_input_mult + cm.bwd_weight_mult) * cm.vocab_gemm * T
    raise ValueError(f"unknown pass kind {kind}")


# ---------------------------------------------------------------- presets

LLAMA_13B = ModelConfig(layers=40, hidden=5120, ffn=13824, heads=40, name="llama-13b")
LLAMA_70B = ModelConfig(layers=80, hidden=8192, ffn=28672, heads=64, query_groups=8, name="llama-70b")
LLAMA_149B = ModelConfig(layers=96, hidden=12288, ffn=32768, heads=96, query_groups=8, name="llama-149b")
MIXTRAL_8X7B = ModelConfig(layers=32, hidden=4096, ffn=14336, heads=32, query_groups=8, name="mixtral-8x7b")
MIXTRAL_8X22B = ModelConfig(layers=56, hidden=6144, ffn=16384, heads=48, query_groups=8, name="mixtral-8x22b")

PRESETS = {m.name: m for m in (LLAMA_13B, LLAMA_70B, LLAMA_149B, MIXTRAL_8X7B, MIXTRAL_8X22B)}

# bf16 weights (2) + fp32 gradient accumulator (4) + fp32 master copy and two Adam moments (12)
STATE_BYTES_PER_PARAM = 18


def model_state_bytes(model: ModelConfig, par: ParallelismConfig,
                      bytes_per_param: int = STATE_BYTES_PER_PARAM) -> Fraction:
    return Fraction(model.parameter_count() * bytes_per_param, par.tp * par.pp)


def max_context_solver(model: ModelConfig, par: ParallelismConfig, run_template: RunConfig,
                       budget: Number, scheme: str = "1f1b",
                       bytes_per_param: int = STATE_BYTES_PER_PARAM,
                       limit: int = 1 << 26) -> int:
    """Largest sequence length (a multiple of ``slices``) whose peak device memory fits.

    Peak = model states + memory_multiplier(scheme) * M_a.  Returns 0 when even
    one token per slice does not fit.
    """
    from .analytics import memory_multiplier

    if budget <= 0:
        return 0
    n = run_template.slices
    mult = memory_multiplier(scheme, par.pp, run_template.microbatches, n, par.stages_per_device)
    states = model_state_bytes(model, par, bytes_per_param)

    def fits(seq: int) -> bool:
        run = replace(run_template, seq_len=seq)
        need = states + mult * activation_bytes(model, par, run).M_a
        return need <= budget

    if not fits(n):
        return 0
    lo, hi = 1, 2
    while hi * n <= limit and fits(hi * n):
        lo, hi = hi, hi * 2
    if hi * n > limit:
        hi = limit // n + 1
        if fits((hi - 1) * n):
            return (hi - 1) * n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid * n):
            lo = mid
        else:
            hi = mid
    return lo * n
