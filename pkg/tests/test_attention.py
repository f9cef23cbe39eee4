import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharedkv.attention import (
    DimensionError,
    KVChunk,
    PartialAttention,
    attend_chunk,
    batched_shared_attention,
    decode_step,
    fold_partials,
    full_attention,
    merge_partials,
)
from sharedkv.config import CHUNK_ATTENTION, FLASH_ATTENTION, MOSKA, SGLANG
from sharedkv.router import Router
from sharedkv.synthetic import gen_queries, gen_synthetic
from sharedkv.verify import partial_err, rel_err


def chunk(keys, values, cid=0):
    return KVChunk.from_kv(cid, np.asarray(keys, float), np.asarray(values, float))


def split(keys, values, cuts):
    bounds = [0, *cuts, len(keys)]
    return [chunk(keys[a:b], values[a:b], i) for i, (a, b) in enumerate(zip(bounds, bounds[1:]))]


def test_single_pair_returns_value():
    p = attend_chunk(np.array([0.3, -1.0]), chunk([[1.0, 2.0]], [[5.0, -7.0]]))
    assert p.s == 1.0
    assert np.array_equal(p.finalize(), [5.0, -7.0])


def test_orthogonal_query_gives_column_mean():
    keys = [[0.0, 1.0], [0.0, -2.0], [0.0, 5.0]]
    values = [[1.0, 2.0], [3.0, 4.0], [8.0, 0.0]]
    out = attend_chunk(np.array([1.0, 0.0]), chunk(keys, values)).finalize()
    np.testing.assert_allclose(out, [4.0, 2.0], rtol=1e-15)


def test_two_keys_hand_softmax():
    # logits (0, ln 3) -> weights (1/4, 3/4)
    keys = [[0.0, 0.0], [math.log(3.0), 0.0]]
    values = [[1.0, 2.0], [3.0, 4.0]]
    out = attend_chunk(np.array([1.0, 0.0]), chunk(keys, values), scale=1.0).finalize()
    np.testing.assert_allclose(out, [2.5, 3.5], rtol=1e-15)


def test_dimension_mismatch():
    c = chunk([[1.0, 2.0]], [[1.0, 2.0]])
    with pytest.raises(DimensionError):
        attend_chunk(np.zeros(3), c)
    with pytest.raises(DimensionError):
        merge_partials(PartialAttention.identity(2), PartialAttention.identity(3))
    with pytest.raises(DimensionError):
        full_attention(np.zeros(3), np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(DimensionError):
        batched_shared_attention(np.zeros((4, 3)), c)
    with pytest.raises(DimensionError):
        KVChunk(0, np.ones((2, 2)), np.ones((3, 2)), np.zeros(2))


def test_merge_identity():
    keys, values = gen_synthetic(1, 10, 6)
    p = attend_chunk(gen_queries(2, 1, 6)[0], chunk(keys, values))
    e = PartialAttention.identity(6)
    for merged in (merge_partials(p, e), merge_partials(e, p)):
        assert merged.m == p.m and merged.s == p.s and np.array_equal(merged.acc, p.acc)


def test_merge_halves_equals_whole():
    keys, values = gen_synthetic(3, 64, 16)
    q = gen_queries(4, 1, 16)[0] * 4
    whole = attend_chunk(q, chunk(keys, values)).finalize()
    halves = merge_partials(
        attend_chunk(q, chunk(keys[:32], values[:32])),
        attend_chunk(q, chunk(keys[32:], values[32:])),
    ).finalize()
    assert rel_err(halves, whole) <= 1e-12


def test_merge_symmetric_when_maxima_equal():
    a = PartialAttention(np.array([1.0, 2.0]), 0.5, 3.0)
    b = PartialAttention(np.array([-4.0, 0.25]), 0.5, 1.5)
    ab, ba = merge_partials(a, b), merge_partials(b, a)
    assert np.array_equal(ab.acc, ba.acc) and ab.s == ba.s and ab.m == ba.m


def test_full_attention_single_pair_and_single_chunk():
    assert np.array_equal(full_attention(np.ones(3), np.ones((1, 3)), [[1.0, 2.0, 3.0]]), [1, 2, 3])
    keys, values = gen_synthetic(5, 40, 8)
    q = gen_queries(6, 1, 8)[0]
    assert rel_err(attend_chunk(q, chunk(keys, values)).finalize(), full_attention(q, keys, values)) <= 1e-15


def test_batched_n1_identical_to_attend():
    keys, values = gen_synthetic(7, 33, 12)
    q = gen_queries(8, 1, 12)
    c = chunk(keys, values)
    (b,) = batched_shared_attention(q, c)
    a = attend_chunk(q[0], c)
    assert rel_err(b.acc, a.acc) <= 1e-12 and rel_err(b.s, a.s) <= 1e-12 and rel_err(b.m, a.m) <= 1e-12


def test_batched_matches_loop_n8():
    keys, values = gen_synthetic(9, 100, 32)
    Q = gen_queries(10, 8, 32) * 3
    c = chunk(keys, values)
    for i, b in enumerate(batched_shared_attention(Q, c)):
        a = attend_chunk(Q[i], c)
        assert max(rel_err(b.acc, a.acc), rel_err(b.s, a.s), rel_err(b.m, a.m)) <= 1e-12


def test_batched_duplicate_rows_identical():
    keys, values = gen_synthetic(11, 20, 4)
    q = gen_queries(12, 1, 4)
    out = batched_shared_attention(np.vstack([q, q, q]), chunk(keys, values))
    assert all(np.array_equal(o.acc, out[0].acc) and o.s == out[0].s for o in out)


# --------------------------------------------------------------- properties

sizes = st.tuples(
    st.integers(0, 2**32), st.integers(1, 512), st.integers(4, 128), st.integers(1, 8)
)


@settings(max_examples=60, deadline=None)
@given(sizes, st.data())
def test_chunking_invariance(params, data):
    seed, n, d, parts = params
    keys, values = gen_synthetic(seed, n, d)
    q = gen_queries(seed + 1, 1, d)[0] * data.draw(st.floats(0.1, 20.0))
    cuts = sorted(data.draw(st.sets(st.integers(1, n - 1), max_size=parts - 1))) if n > 1 else []
    parts = [attend_chunk(q, c) for c in split(keys, values, cuts)]
    out = fold_partials(parts, d).finalize()
    assert rel_err(out, full_attention(q, keys, values)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 64), st.integers(1, 256), st.integers(4, 128))
def test_batching_invariance(seed, N, n, d):
    keys, values = gen_synthetic(seed, n, d)
    Q = gen_queries(seed + 7, N, d) * 5
    c = chunk(keys, values)
    logit_scale = np.abs(Q @ keys.T).max(axis=1) / math.sqrt(d)
    for i, b in enumerate(batched_shared_attention(Q, c)):
        assert partial_err(b, attend_chunk(Q[i], c), logit_scale[i]) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(3, 300), st.integers(4, 64), st.permutations(range(3)))
def test_merge_associative_and_permutation_invariant(seed, n, d, perm):
    keys, values = gen_synthetic(seed, n, d)
    q = gen_queries(seed + 3, 1, d)[0] * 8
    a, b, c = (attend_chunk(q, ch) for ch in split(keys, values, [n // 3, 2 * n // 3]))
    left = merge_partials(merge_partials(a, b), c).finalize()
    right = merge_partials(a, merge_partials(b, c)).finalize()
    assert rel_err(left, right) <= 1e-12
    parts = [a, b, c]
    permuted = fold_partials([parts[i] for i in perm], d).finalize()
    assert rel_err(permuted, left) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 300), st.integers(4, 64))
def test_softmax_normalization(seed, n, d):
    keys, values = gen_synthetic(seed, n, d)
    q = gen_queries(seed + 1, 1, d)[0] * 10
    p = attend_chunk(q, chunk(keys, values))
    logits = keys @ q / math.sqrt(d)
    w = np.exp(logits - logits.max())
    assert abs((w / p.s).sum() - 1.0) <= 1e-12
    assert np.isfinite(p.acc).all() and p.s > 0


# --------------------------------------------------------------- decode_step


def pipeline(seed, N=5, d=16, n_chunks=4, unique_len=20):
    chunks = [chunk(*gen_synthetic(seed + 100 + c, 30 + c, d), cid=c) for c in range(n_chunks)]
    unique = [gen_synthetic(seed + 200 + i, unique_len, d) for i in range(N)]
    Q = gen_queries(seed, N, d) * 4
    return Q, unique, chunks


def concat_oracle(q, uk, uv, chunks):
    keys = np.vstack([uk, *(c.keys for c in chunks)])
    values = np.vstack([uv, *(c.values for c in chunks)])
    return full_attention(q, keys, values)


@pytest.mark.parametrize("policy", [FLASH_ATTENTION, SGLANG, CHUNK_ATTENTION])
def test_decode_unrouted_one_chunk_equals_concatenation(policy):
    Q, unique, chunks = pipeline(1, n_chunks=1)
    res = decode_step(Q, unique, chunks, policy)
    for i, (uk, uv) in enumerate(unique):
        assert rel_err(res.outputs[i], concat_oracle(Q[i], uk, uv, chunks)) <= 1e-9


def test_decode_many_chunks_equals_concatenation():
    Q, unique, chunks = pipeline(2, n_chunks=6)
    res = decode_step(Q, unique, chunks, CHUNK_ATTENTION)
    for i, (uk, uv) in enumerate(unique):
        assert rel_err(res.outputs[i], concat_oracle(Q[i], uk, uv, chunks)) <= 1e-9


def test_decode_full_topk_equals_unrouted_exactly():
    Q, unique, chunks = pipeline(3)
    routed = decode_step(Q, unique, chunks, MOSKA, Router(chunks, len(chunks)))
    plain = decode_step(Q, unique, chunks, CHUNK_ATTENTION)
    assert np.array_equal(routed.outputs, plain.outputs)


def test_decode_sparse_routing_uses_selected_chunks_only():
    Q, unique, chunks = pipeline(4, n_chunks=6)
    router = Router(chunks, 2)
    res = decode_step(Q, unique, chunks, MOSKA, router)
    for i, (uk, uv) in enumerate(unique):
        sel = sorted(router.route(Q[i]).selected)
        assert res.selected[i] == sel
        assert rel_err(res.outputs[i], concat_oracle(Q[i], uk, uv, [chunks[c] for c in sel])) <= 1e-9


def test_decode_empty_unique_store():
    Q, _, chunks = pipeline(5, N=3)
    empty = [(np.zeros((0, 16)), np.zeros((0, 16)))] * 3
    res = decode_step(Q, empty, chunks, CHUNK_ATTENTION)
    keys = np.vstack([c.keys for c in chunks])
    values = np.vstack([c.values for c in chunks])
    for i in range(3):
        assert rel_err(res.outputs[i], full_attention(Q[i], keys, values)) <= 1e-9


def test_decode_policy_router_mismatch():
    Q, unique, chunks = pipeline(6)
    with pytest.raises(ValueError, match="router missing"):
        decode_step(Q, unique, chunks, MOSKA)
    with pytest.raises(ValueError, match="router given"):
        decode_step(Q, unique, chunks, CHUNK_ATTENTION, Router(chunks, 1))


def test_decode_opstats_gemm_vs_gemv():
    N, d, unique_len = 5, 16, 20
    Q, unique, chunks = pipeline(7, N=N, d=d, unique_len=unique_len)
    shared_tokens = sum(len(c) for c in chunks)
    elem = 8
    batched = decode_step(Q, unique, chunks, CHUNK_ATTENTION).stats
    looped = decode_step(Q, unique, chunks, SGLANG).stats
    assert batched["shared_attention"].kind == "gemm"
    assert looped["shared_attention"].kind == "gemv"
    assert batched["shared_attention"].flops == looped["shared_attention"].flops == 4 * N * shared_tokens * d
    assert batched["shared_attention"].bytes_read == shared_tokens * 2 * d * elem
    assert looped["shared_attention"].bytes_read == N * shared_tokens * 2 * d * elem
    assert batched["unique_attention"].flops == 4 * N * unique_len * d
    assert batched["shared_attention"].intensity == N * looped["shared_attention"].intensity


def test_partial_err_running_max_near_zero():
    a = PartialAttention(np.ones(2), -8e-7, 1.5)
    b = PartialAttention(np.ones(2), -8e-7 + 1.5e-16, 1.5)
    assert partial_err(a, b) > 1e-12
    assert partial_err(a, b, logit_scale=3.0) <= 1e-12
