"""Chunked causal attention with an online-softmax merge (float64 reference).

A partial result over a subset of KV chunks is an :class:`AttnChunkState`
holding the normalized partial output together with the per-row max logit and
the per-row sum of exponentials relative to that max.  Two states over disjoint
chunk sets merge exactly into the state over their union.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class AttnChunkState:
    partial_output: np.ndarray  # (rows, head_dim), normalized by row_sumexp
    row_max: np.ndarray  # (rows,)
    row_sumexp: np.ndarray  # (rows,)

    @classmethod
    def empty(cls, rows: int, head_dim: int) -> "AttnChunkState":
        return cls(np.zeros((rows, head_dim)), np.full(rows, -np.inf), np.zeros(rows))

    @property
    def shape(self) -> tuple[int, int]:
        return self.partial_output.shape


def merge_partials(a: AttnChunkState, b: AttnChunkState) -> AttnChunkState:
    """Combine two partial states; exact up to rounding, associative and commutative."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = np.maximum(a.row_max, b.row_max)
    finite = np.isfinite(m)
    safe_m = np.where(finite, m, 0.0)
    wa = np.where(np.isfinite(a.row_max), a.row_sumexp * np.exp(a.row_max - safe_m), 0.0)
    wb = np.where(np.isfinite(b.row_max), b.row_sumexp * np.exp(b.row_max - safe_m), 0.0)
    l = wa + wb
    denom = np.where(l > 0, l, 1.0)
    out = (a.partial_output * wa[:, None] + b.partial_output * wb[:, None]) / denom[:, None]
    # an empty side is the identity: pass the other side through untouched
    a_empty = (a.row_sumexp == 0)[:, None]
    b_empty = (b.row_sumexp == 0)[:, None]
    out = np.where(a_empty, b.partial_output, np.where(b_empty, a.partial_output, out))
    m = np.where(a.row_sumexp == 0, b.row_max, np.where(b.row_sumexp == 0, a.row_max, m))
    l = np.where(a.row_sumexp == 0, b.row_sumexp, np.where(b.row_sumexp == 0, a.row_sumexp, l))
    return AttnChunkState(out, m, l)


def _chunk_state(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: Optional[np.ndarray]) -> AttnChunkState:
    scores = q @ k.T / np.sqrt(q.shape[1])
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    m = scores.max(axis=1)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(scores - safe_m[:, None])
    l = e.sum(axis=1)
    denom = np.where(l > 0, l, 1.0)
    return AttnChunkState((e @ v) / denom[:, None], m, l)


def chunk_attention(query: np.ndarray, kv_chunks: Sequence[tuple[np.ndarray, np.ndarray]],
                    causal: bool = False, query_offset: Optional[int] = None):
    """Attention of ``query`` over position-ordered KV chunks, one chunk at a time.

    With ``causal`` the query rows sit at positions ``query_offset ..`` (default:
    the last rows of the concatenated keys, as for the newest slice) and attend
    keys at positions up to their own.  Returns (output, state).
    """
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError("query must be 2-D")
    if not kv_chunks:
        raise ValueError("need at least one KV chunk")
    rows, d = q.shape
    chunks = []
    for keys, values in kv_chunks:
        k = np.asarray(keys, dtype=np.float64)
        v = np.asarray(values, dtype=np.float64)
        if k.ndim != 2 or v.ndim != 2 or k.shape[1] != d or v.shape[0] != k.shape[0]:
            raise ValueError(f"dimension mismatch: query {q.shape}, keys {k.shape}, values {v.shape}")
        chunks.append((k, v))
    dv = chunks[0][1].shape[1]
    if any(v.shape[1] != dv for _, v in chunks):
        raise ValueError("value widths differ between chunks")
    total = sum(k.shape[0] for k, _ in chunks)
    if query_offset is None:
        query_offset = total - rows
    qpos = np.arange(rows) + query_offset

    state = AttnChunkState.empty(rows, dv)
    start = 0
    for k, v in chunks:
        mask = None
        if causal:
            kpos = np.arange(start, start + k.shape[0])
            mask = kpos[None, :] <= qpos[:, None]
        state = merge_partials(state, _chunk_state(q, k, v, mask))
        start += k.shape[0]
    return state.partial_output, state


def split_chunks(keys: np.ndarray, values: np.ndarray, sizes: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    bounds = np.cumsum([0, *sizes])
    if bounds[-1] != keys.shape[0]:
        raise ValueError("chunk sizes must cover all keys")
    return [(keys[a:b], values[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def state_over(query, kv_chunks, causal=False, query_offset=None, start=0) -> AttnChunkState:
    """State over a subset of chunks whose first key sits at position ``start``."""
    q = np.asarray(query, dtype=np.float64)
    rows = q.shape[0]
    dv = np.asarray(kv_chunks[0][1]).shape[1]
    state = AttnChunkState.empty(rows, dv)
    qpos = np.arange(rows) + (0 if query_offset is None else query_offset)
    pos = start
    for keys, values in kv_chunks:
        k = np.asarray(keys, dtype=np.float64)
        mask = None
        if causal:
            kpos = np.arange(pos, pos + k.shape[0])
            mask = kpos[None, :] <= qpos[:, None]
        state = merge_partials(state, _chunk_state(q, k, np.asarray(values, dtype=np.float64), mask))
        pos += k.shape[0]
    return state
