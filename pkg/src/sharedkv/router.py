"""Training-free top-k routing of queries to shared KV chunks.

Each chunk is summarized by the mean of its key rows. A query scores every
chunk by inner product with that embedding and keeps the k best, ties going
to the lower chunk_id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .config import WorkloadSpec, top_k

if TYPE_CHECKING:
    from .attention import KVChunk


def chunk_embedding(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] < 1:
        raise ValueError("cannot embed an empty chunk")
    return keys.mean(axis=0)


@dataclass(frozen=True)
class ChunkIndexEntry:
    chunk_id: int
    embedding: np.ndarray


@dataclass(frozen=True)
class RoutingDecision:
    selected: list[int]
    scores: list[float]


def build_index(chunks: Sequence["KVChunk"]) -> list[ChunkIndexEntry]:
    index = sorted(
        (ChunkIndexEntry(c.chunk_id, np.asarray(c.embedding, dtype=np.float64)) for c in chunks),
        key=lambda e: e.chunk_id,
    )
    if [e.chunk_id for e in index] != list(range(len(index))):
        raise ValueError("chunk ids must be unique and dense from 0")
    for e in index:
        if not np.all(np.isfinite(e.embedding)):
            raise ValueError(f"chunk {e.chunk_id} has a non-finite embedding")
    return index


def chunk_scores(q: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Inner product of ``q`` with each embedding row.

    Elementwise product then a per-row sum, so identical embeddings always
    score identically (a BLAS matrix-vector product does not promise that).
    """
    return (embeddings * np.asarray(q, dtype=np.float64)).sum(axis=1)


def route(q: np.ndarray, index: Sequence[ChunkIndexEntry], k: int) -> RoutingDecision:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not index:
        raise ValueError("cannot route over an empty index")
    ids = np.array([e.chunk_id for e in index])
    emb = np.stack([e.embedding for e in index])
    scores = chunk_scores(q, emb)
    # lexsort: last key is primary -> descending score, then ascending id
    order = np.lexsort((ids, -scores))[: min(k, len(index))]
    return RoutingDecision([int(ids[i]) for i in order], [float(scores[i]) for i in order])


class Router:
    """A fixed index plus k; routes one query at a time."""

    def __init__(self, chunks: Sequence["KVChunk"], k: int):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.index = build_index(chunks)
        self.k = k

    def route(self, q: np.ndarray) -> RoutingDecision:
        return route(q, self.index, self.k)


def derive_k(workload: WorkloadSpec) -> int:
    return max(1, top_k(workload.shared_len, workload.chunk_size, workload.sparsity))
