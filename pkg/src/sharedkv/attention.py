"""Exact single-head decode attention over unique and shared KV data.

Attention over a KV sequence is computed chunk by chunk as online-softmax
partial states that merge exactly, so any chunking (and batching of many
queries against one shared chunk) yields the same output as one monolithic
softmax. All math is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .config import PolicySpec

if TYPE_CHECKING:
    from .router import Router


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class KVChunk:
    chunk_id: int
    keys: np.ndarray
    values: np.ndarray
    embedding: np.ndarray

    def __post_init__(self) -> None:
        if self.keys.ndim != 2 or self.keys.shape != self.values.shape:
            raise DimensionError(
                f"keys {self.keys.shape} and values {self.values.shape} must be equal 2-D shapes"
            )
        if self.keys.shape[0] < 1:
            raise DimensionError("a chunk needs at least one KV pair")
        if self.embedding.shape != (self.keys.shape[1],):
            raise DimensionError("embedding length must equal head_dim")

    @classmethod
    def from_kv(cls, chunk_id: int, keys: np.ndarray, values: np.ndarray) -> "KVChunk":
        from .router import chunk_embedding

        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if keys.ndim != 2 or keys.shape[0] < 1:
            raise DimensionError("a chunk needs at least one KV pair")
        return cls(chunk_id, keys, values, chunk_embedding(keys))

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[1]


@dataclass(frozen=True)
class PartialAttention:
    """Online-softmax state: ``acc = sum exp(l_i - m) v_i``, ``s = sum exp(l_i - m)``."""

    acc: np.ndarray
    m: float
    s: float

    @classmethod
    def identity(cls, head_dim: int) -> "PartialAttention":
        return cls(np.zeros(head_dim), -math.inf, 0.0)

    @property
    def is_empty(self) -> bool:
        return self.s == 0.0

    def finalize(self) -> np.ndarray:
        if self.is_empty:
            raise ValueError("cannot finalize attention over zero keys")
        return self.acc / self.s


def default_scale(head_dim: int) -> float:
    return 1.0 / math.sqrt(head_dim)


def _check_query(q: np.ndarray, head_dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (head_dim,):
        raise DimensionError(f"query shape {q.shape} does not match head_dim {head_dim}")
    return q


def attend_chunk(q: np.ndarray, chunk: KVChunk, scale: float | None = None) -> PartialAttention:
    q = _check_query(q, chunk.head_dim)
    if scale is None:
        scale = default_scale(chunk.head_dim)
    logits = scale * (chunk.keys @ q)
    m = float(logits.max())
    w = np.exp(logits - m)
    return PartialAttention(w @ chunk.values, m, float(w.sum()))


def merge_partials(a: PartialAttention, b: PartialAttention) -> PartialAttention:
    if a.acc.shape != b.acc.shape:
        raise DimensionError(f"cannot merge partials of shapes {a.acc.shape} and {b.acc.shape}")
    if a.is_empty:
        return b
    if b.is_empty:
        return a
    m = max(a.m, b.m)
    ca = math.exp(a.m - m)
    cb = math.exp(b.m - m)
    return PartialAttention(a.acc * ca + b.acc * cb, m, a.s * ca + b.s * cb)


def fold_partials(parts: Sequence[PartialAttention], head_dim: int) -> PartialAttention:
    """Left fold of ``merge_partials`` starting from the identity."""
    out = PartialAttention.identity(head_dim)
    for p in parts:
        out = merge_partials(out, p)
    return out


def full_attention(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, scale: float | None = None
) -> np.ndarray:
    """softmax(scale * q K^T) V in a single pass; the monolithic oracle."""
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 2 or keys.shape != values.shape or keys.shape[0] == 0:
        raise DimensionError("keys and values must be equal nonempty 2-D shapes")
    q = _check_query(q, keys.shape[1])
    if scale is None:
        scale = default_scale(keys.shape[1])
    logits = scale * (keys @ q)
    w = np.exp(logits - logits.max())
    return (w / w.sum()) @ values


def batched_shared_attention(
    Q: np.ndarray, chunk: KVChunk, scale: float | None = None
) -> list[PartialAttention]:
    """All N queries against one chunk as two GEMMs: ``S = scale Q K^T``, ``A = P V``."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] < 1 or Q.shape[1] != chunk.head_dim:
        raise DimensionError(f"query matrix {Q.shape} incompatible with head_dim {chunk.head_dim}")
    if scale is None:
        scale = default_scale(chunk.head_dim)
    scores = scale * (Q @ chunk.keys.T)
    m = scores.max(axis=1)
    P = np.exp(scores - m[:, None])
    acc = P @ chunk.values
    s = P.sum(axis=1)
    return [PartialAttention(acc[i], float(m[i]), float(s[i])) for i in range(Q.shape[0])]


@dataclass(frozen=True)
class OpStats:
    """FLOPs and bytes read by one category of work in a decode step.

    ``kind`` is ``"gemv"`` when each query streams its own copy of the KV data
    and ``"gemm"`` when a batch of queries shares one read.
    """

    category: str
    flops: float
    bytes_read: float
    kind: str = "gemv"

    def __post_init__(self) -> None:
        if self.flops < 0 or self.bytes_read < 0:
            raise ValueError("OpStats must be nonnegative")

    @property
    def intensity(self) -> float:
        return self.flops / self.bytes_read if self.bytes_read > 0 else math.inf


@dataclass(frozen=True)
class DecodeResult:
    outputs: np.ndarray
    stats: dict[str, OpStats]
    selected: list[list[int]]


def decode_step(
    queries: np.ndarray,
    unique_stores: Sequence[tuple[np.ndarray, np.ndarray]],
    shared_chunks: Sequence[KVChunk],
    policy: PolicySpec,
    router: "Router | None" = None,
    scale: float | None = None,
    kv_bytes_per_element: int = 8,
) -> DecodeResult:
    """One decode token for N requests: route, shared attention, unique attention, merge.

    Shared partials of each query are folded in ascending chunk_id order and
    then merged onto that query's unique partial.
    """
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] < 1:
        raise DimensionError("queries must be a nonempty N x head_dim matrix")
    n, d = Q.shape
    if len(unique_stores) != n:
        raise DimensionError(f"{len(unique_stores)} unique stores for {n} queries")
    if (router is not None) != policy.sparse_routing:
        raise ValueError(
            f"policy {policy.name!r} sparse_routing={policy.sparse_routing} "
            f"but router {'given' if router is not None else 'missing'}"
        )
    for c in shared_chunks:
        if c.head_dim != d:
            raise DimensionError(f"chunk {c.chunk_id} head_dim {c.head_dim} != {d}")
    if scale is None:
        scale = default_scale(d)

    all_ids = sorted(c.chunk_id for c in shared_chunks)
    by_id = {c.chunk_id: c for c in shared_chunks}
    if len(by_id) != len(shared_chunks):
        raise ValueError("duplicate chunk ids")
    if router is not None and shared_chunks:
        selected = [sorted(router.route(Q[i]).selected) for i in range(n)]
    else:
        selected = [list(all_ids) for _ in range(n)]

    # per-chunk shared partials, keyed (query, chunk_id)
    shared_parts: dict[tuple[int, int], PartialAttention] = {}
    elem = 2 * d * kv_bytes_per_element
    shared_flops = 0.0
    shared_bytes = 0.0
    if policy.shared_batched_gemm:
        for cid in all_ids:
            rows = [i for i in range(n) if cid in selected[i]]
            if not rows:
                continue
            chunk = by_id[cid]
            for i, p in zip(rows, batched_shared_attention(Q[rows], chunk, scale)):
                shared_parts[i, cid] = p
            shared_flops += 4 * len(rows) * len(chunk) * d
            shared_bytes += len(chunk) * elem
    else:
        for i in range(n):
            for cid in selected[i]:
                chunk = by_id[cid]
                shared_parts[i, cid] = attend_chunk(Q[i], chunk, scale)
                shared_flops += 4 * len(chunk) * d
                shared_bytes += len(chunk) * elem

    outputs = np.empty((n, d))
    unique_flops = 0.0
    unique_bytes = 0.0
    for i in range(n):
        keys, values = unique_stores[i]
        keys = np.asarray(keys, dtype=np.float64).reshape(-1, d)
        values = np.asarray(values, dtype=np.float64).reshape(-1, d)
        if keys.shape != values.shape:
            raise DimensionError(f"unique store {i}: keys {keys.shape} != values {values.shape}")
        if len(keys):
            unique = attend_chunk(Q[i], KVChunk(-1, keys, values, np.zeros(d)), scale)
        else:
            unique = PartialAttention.identity(d)
        unique_flops += 4 * len(keys) * d
        unique_bytes += len(keys) * elem
        shared = fold_partials([shared_parts[i, cid] for cid in selected[i]], d)
        outputs[i] = merge_partials(unique, shared).finalize()

    stats = {
        "unique_attention": OpStats("unique_attention", unique_flops, unique_bytes, "gemv"),
        "shared_attention": OpStats(
            "shared_attention",
            shared_flops,
            shared_bytes,
            "gemm" if policy.shared_batched_gemm else "gemv",
        ),
    }
    return DecodeResult(outputs, stats, selected)
