"""Randomized equivalence checks for the attention pipeline and router.

All random draws (sizes as well as data) come from the portable SplitMix64
stream in :mod:`sharedkv.synthetic`, so a seed identifies the exact cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attention import (
    KVChunk,
    PartialAttention,
    attend_chunk,
    batched_shared_attention,
    decode_step,
    full_attention,
    merge_partials,
)
from .config import CHUNK_ATTENTION, MOSKA
from .router import Router, chunk_scores, route
from .synthetic import derive_seed, gen_queries, gen_synthetic, splitmix64

MAX_TOKENS = 512
MAX_QUERIES = 64
FAULTS = ("merge-sign",)


def rel_err(a, b) -> float:
    """Max-norm relative error of ``a`` against reference ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = float(np.max(np.abs(b))) if b.size else 0.0
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    return diff / denom if denom > 0 else diff


def partial_err(a: PartialAttention, b: PartialAttention, logit_scale: float = 0.0) -> float:
    """Worst relative error over the state.

    The running max is one entry of the logit vector, so its error is measured
    against the largest logit magnitude; a max close to 0 would otherwise
    inflate a 1-ulp difference without bound.
    """
    m_ref = max(abs(b.m), logit_scale)
    m_err = abs(a.m - b.m) / m_ref if m_ref > 0 else abs(a.m - b.m)
    return max(rel_err(a.acc, b.acc), rel_err(a.s, b.s), m_err)


class Draw:
    """Integer draws from one sub-stream."""

    def __init__(self, seed: int):
        self.seed = seed
        self.pos = 0

    def int(self, lo: int, hi: int) -> int:
        """Uniform on [lo, hi] (modulo bias is irrelevant here)."""
        v = int(splitmix64(self.seed, 1, self.pos)[0])
        self.pos += 1
        return lo + v % (hi - lo + 1)

    def cuts(self, n: int, parts: int) -> list[int]:
        """Sorted distinct interior cut points splitting range(n) into ``parts`` pieces."""
        parts = min(parts, n)
        pool = list(range(1, n))
        cuts = []
        for _ in range(parts - 1):
            cuts.append(pool.pop(self.int(0, len(pool) - 1)))
        return sorted(cuts)

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.int(0, i)
            items[i], items[j] = items[j], items[i]
        return items


def _faulty_merge(a: PartialAttention, b: PartialAttention) -> PartialAttention:
    if a.is_empty:
        return b
    if b.is_empty:
        return a
    m = max(a.m, b.m)
    ca = math.exp(a.m - m)
    cb = math.exp(m - b.m)  # sign flipped
    return PartialAttention(a.acc * ca + b.acc * cb, m, a.s * ca + b.s * cb)


def _chunks(keys, values, cuts) -> list[KVChunk]:
    bounds = [0, *cuts, len(keys)]
    return [
        KVChunk.from_kv(i, keys[lo:hi], values[lo:hi])
        for i, (lo, hi) in enumerate(zip(bounds, bounds[1:]))
    ]


def _case(seed: int, draw: Draw, max_tokens: int = MAX_TOKENS):
    n = draw.int(1, max_tokens)
    d = draw.int(4, 128)
    keys, values = gen_synthetic(derive_seed(seed, 1), n, d)
    # widen logits so the softmax is far from uniform
    q = gen_queries(derive_seed(seed, 2), 1, d)[0] * draw.int(1, 16)
    return n, d, keys, values, q


@dataclass
class CheckResult:
    name: str
    cases: int
    max_error: float
    tolerance: float
    failures: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def check_chunking(seed: int, cases: int, merge: Callable = merge_partials) -> CheckResult:
    res = CheckResult("chunking invariance", cases, 0.0, 1e-9)
    for c in range(cases):
        s = derive_seed(seed, 10, c)
        draw = Draw(s)
        n, d, keys, values, q = _case(s, draw)
        chunks = _chunks(keys, values, draw.cuts(n, draw.int(1, 8)))
        out = PartialAttention.identity(d)
        for ch in chunks:
            out = merge(out, attend_chunk(q, ch))
        err = rel_err(out.finalize(), full_attention(q, keys, values))
        res.max_error = max(res.max_error, err)
        if not err <= res.tolerance:
            res.failures.append(s)
    return res


def check_batching(seed: int, cases: int) -> CheckResult:
    res = CheckResult("batching invariance", cases, 0.0, 1e-12)
    for c in range(cases):
        s = derive_seed(seed, 11, c)
        draw = Draw(s)
        n, d, keys, values, _ = _case(s, draw)
        N = draw.int(1, MAX_QUERIES)
        Q = gen_queries(derive_seed(s, 3), N, d) * draw.int(1, 16)
        chunk = KVChunk.from_kv(0, keys, values)
        batched = batched_shared_attention(Q, chunk)
        logit_scale = np.abs(Q @ keys.T).max(axis=1) / math.sqrt(d)
        err = max(
            partial_err(b, attend_chunk(Q[i], chunk), logit_scale[i])
            for i, b in enumerate(batched)
        )
        res.max_error = max(res.max_error, err)
        if not err <= res.tolerance:
            res.failures.append(s)
    return res


def check_associativity(seed: int, cases: int, merge: Callable = merge_partials) -> CheckResult:
    res = CheckResult("merge associativity", cases, 0.0, 1e-12)
    for c in range(cases):
        s = derive_seed(seed, 12, c)
        draw = Draw(s)
        n, d, keys, values, q = _case(s, draw)
        if n < 3:
            n, keys, values = 3, *gen_synthetic(derive_seed(s, 1), 3, d)
        a, b, cc = (attend_chunk(q, ch) for ch in _chunks(keys, values, draw.cuts(n, 3)))
        left = merge(merge(a, b), cc).finalize()
        right = merge(a, merge(b, cc)).finalize()
        err = rel_err(left, right)
        res.max_error = max(res.max_error, err)
        if not err <= res.tolerance:
            res.failures.append(s)
    return res


def check_permutation(seed: int, cases: int, merge: Callable = merge_partials) -> CheckResult:
    res = CheckResult("permutation invariance", cases, 0.0, 1e-12)
    for c in range(cases):
        s = derive_seed(seed, 13, c)
        draw = Draw(s)
        n, d, keys, values, q = _case(s, draw)
        parts = [attend_chunk(q, ch) for ch in _chunks(keys, values, draw.cuts(n, draw.int(1, 8)))]
        ref = PartialAttention.identity(d)
        for p in parts:
            ref = merge(ref, p)
        out = PartialAttention.identity(d)
        for i in draw.permutation(len(parts)):
            out = merge(out, parts[i])
        err = rel_err(out.finalize(), ref.finalize())
        res.max_error = max(res.max_error, err)
        if not err <= res.tolerance:
            res.failures.append(s)
    return res


def check_normalization(seed: int, cases: int) -> CheckResult:
    res = CheckResult("softmax normalization", cases, 0.0, 1e-12)
    for c in range(cases):
        s = derive_seed(seed, 14, c)
        n, d, keys, values, q = _case(s, Draw(s))
        p = attend_chunk(q, KVChunk.from_kv(0, keys, values))
        logits = keys @ q / math.sqrt(d)
        w = np.exp(logits - logits.max())
        err = max(rel_err(p.s, w.sum()), rel_err((w / p.s).sum(), 1.0))
        res.max_error = max(res.max_error, err)
        if not err <= res.tolerance:
            res.failures.append(s)
    return res


def _router_case(s: int, draw: Draw):
    n_chunks = draw.int(1, 16)
    d = draw.int(4, 64)
    chunks = []
    for cid in range(n_chunks):
        k, v = gen_synthetic(derive_seed(s, 20, cid), draw.int(1, 32), d)
        chunks.append(KVChunk.from_kv(cid, k, v))
    return chunks, d


def check_topk_oracle(seed: int, cases: int, trace: list | None = None) -> CheckResult:
    res = CheckResult("router top-k oracle", cases, 0.0, 0.0)
    for c in range(cases):
        s = derive_seed(seed, 15, c)
        draw = Draw(s)
        chunks, d = _router_case(s, draw)
        q = gen_queries(derive_seed(s, 2), 1, d)[0]
        k = draw.int(1, len(chunks) + 1)
        got = route(q, Router(chunks, k).index, k)
        scores = chunk_scores(q, np.stack([ch.embedding for ch in chunks]))
        expect = sorted(range(len(chunks)), key=lambda i: (-scores[i], i))[:k]
        if trace is not None and c < 8:
            trace.append((c, got.selected, got.scores))
        if got.selected != expect:
            res.failures.append(s)
    return res


def check_router_properties(seed: int, cases: int) -> CheckResult:
    """Positive rescaling of q keeps the selection; the top-k list is a prefix of top-(k+1)."""
    res = CheckResult("routing stability and monotone pruning", cases, 0.0, 0.0)
    for c in range(cases):
        s = derive_seed(seed, 16, c)
        draw = Draw(s)
        chunks, d = _router_case(s, draw)
        router = Router(chunks, len(chunks))
        q = gen_queries(derive_seed(s, 2), 1, d)[0]
        full = route(q, router.index, len(chunks)).selected
        scaled = route(q * 2.0 ** draw.int(-8, 8), router.index, len(chunks)).selected
        prefixes_ok = all(
            route(q, router.index, k).selected == full[:k] for k in range(1, len(chunks) + 1)
        )
        if scaled != full or not prefixes_ok:
            res.failures.append(s)
    return res


def _pipeline_case(s: int, draw: Draw):
    d = draw.int(4, 64)
    N = draw.int(1, 16)
    n_chunks = draw.int(1, 8)
    chunks = []
    for cid in range(n_chunks):
        k, v = gen_synthetic(derive_seed(s, 30, cid), draw.int(1, 64), d)
        chunks.append(KVChunk.from_kv(cid, k, v))
    unique = [gen_synthetic(derive_seed(s, 31, i), draw.int(0, 64), d) for i in range(N)]
    Q = gen_queries(derive_seed(s, 2), N, d) * draw.int(1, 8)
    return Q, unique, chunks


def check_router_coverage(seed: int, cases: int) -> CheckResult:
    res = CheckResult("router coverage", cases, 0.0, 0.0)
    for c in range(cases):
        s = derive_seed(seed, 17, c)
        Q, unique, chunks = _pipeline_case(s, Draw(s))
        routed = decode_step(Q, unique, chunks, MOSKA, Router(chunks, len(chunks)))
        plain = decode_step(Q, unique, chunks, CHUNK_ATTENTION)
        if not np.array_equal(routed.outputs, plain.outputs):
            res.max_error = max(res.max_error, rel_err(routed.outputs, plain.outputs))
            res.failures.append(s)
    return res


def check_pipeline(seed: int, cases: int) -> CheckResult:
    """Unrouted decode_step against one softmax over unique + shared KV."""
    res = CheckResult("pipeline equivalence", cases, 0.0, 1e-9)
    for c in range(cases):
        s = derive_seed(seed, 18, c)
        Q, unique, chunks = _pipeline_case(s, Draw(s))
        out = decode_step(Q, unique, chunks, CHUNK_ATTENTION).outputs
        err = 0.0
        for i, (uk, uv) in enumerate(unique):
            keys = np.vstack([uk, *(ch.keys for ch in chunks)])
            values = np.vstack([uv, *(ch.values for ch in chunks)])
            err = max(err, rel_err(out[i], full_attention(Q[i], keys, values)))
        res.max_error = max(res.max_error, err)
        if not err <= res.tolerance:
            res.failures.append(s)
    return res


def run_verify(
    seed: int = 0, cases: int = 200, fault: str | None = None, trace: list | None = None
) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    merge = _faulty_merge if fault == "merge-sign" else merge_partials
    return [
        check_chunking(seed, cases, merge),
        check_batching(seed, cases),
        check_associativity(seed, cases, merge),
        check_permutation(seed, cases, merge),
        check_normalization(seed, cases),
        check_topk_oracle(seed, cases, trace),
        check_router_properties(seed, cases),
        check_router_coverage(seed, max(1, cases // 4)),
        check_pipeline(seed, max(1, cases // 4)),
    ]
