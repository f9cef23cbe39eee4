"""Analytical decode-phase roofline model for the five serving policies.

Every decode step is split into three components, each timed as
``max(bytes / bandwidth, flops / peak_flops)``:

* unique attention: each request streams its own unique KV (GEMV),
* shared attention: over the shared context, or the routed fraction of it when
  the policy routes sparsely; read once per step when the policy batches
  queries into a GEMM, once per request otherwise,
* weights/FFN: all parameters read once per step, 2 FLOPs per parameter per
  request.

The ``"sum"`` overlap model adds component times (serial execution). The
``"max"`` model lets everything overlap: the step takes
``max(total bytes / bandwidth, total flops / peak)``.

Assumptions: router scoring is free, inter-node transfers are free, softmax
FLOPs are ignored, prefill is not modeled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .attention import OpStats
from .config import (
    BASELINE,
    MOSKA,
    HardwareSpec,
    ModelSpec,
    PolicySpec,
    WorkloadSpec,
    kv_bytes_per_token,
    weights_bytes,
)

OVERLAP_MODELS = ("sum", "max")


def per_request_kv_bytes(
    policy: PolicySpec, workload: WorkloadSpec, model: ModelSpec
) -> tuple[int, int]:
    """(bytes held per request, bytes held once system-wide)."""
    kv = kv_bytes_per_token(model)
    unique = workload.unique_len * kv
    shared = workload.shared_len * kv
    if policy.kv_reuse:
        return unique, shared
    # no reuse: every request carries a private copy of the shared context,
    # even when it only attends to part of it
    return unique + shared, 0


def max_batch(
    policy: PolicySpec, workload: WorkloadSpec, model: ModelSpec, hw: HardwareSpec
) -> int:
    per_request, once = per_request_kv_bytes(policy, workload, model)
    free = hw.aggregate_capacity - weights_bytes(model) - once
    if free <= 0:
        return 0
    return int(free // per_request)


def effective_shared_len(policy: PolicySpec, workload: WorkloadSpec) -> float:
    if policy.sparse_routing:
        return workload.shared_len * (1.0 - workload.sparsity)
    return float(workload.shared_len)


def attention_flops_per_token(model: ModelSpec, context_len: float) -> float:
    """QK^T plus PV for one query token: 2 + 2 FLOPs per key per head dim, every q head."""
    return 4.0 * context_len * model.num_layers * model.num_q_heads * model.head_dim


def op_stats(
    policy: PolicySpec, workload: WorkloadSpec, model: ModelSpec, batch: int
) -> list[OpStats]:
    kv = kv_bytes_per_token(model)
    l_eff = effective_shared_len(policy, workload)
    replicas = 1 if policy.shared_batched_gemm else batch
    return [
        OpStats(
            "unique_attention",
            batch * attention_flops_per_token(model, workload.unique_len),
            batch * workload.unique_len * kv,
            "gemv",
        ),
        OpStats(
            "shared_attention",
            batch * attention_flops_per_token(model, l_eff),
            l_eff * kv * replicas,
            "gemm" if policy.shared_batched_gemm else "gemv",
        ),
        OpStats("weights_ffn", 2.0 * model.param_count * batch, weights_bytes(model), "gemm"),
    ]


@dataclass(frozen=True)
class ComponentTime:
    stats: OpStats
    bandwidth_time: float
    compute_time: float

    @property
    def time(self) -> float:
        return max(self.bandwidth_time, self.compute_time)

    @property
    def compute_bound(self) -> bool:
        return self.compute_time > self.bandwidth_time


@dataclass(frozen=True)
class StepCost:
    components: list[ComponentTime]
    latency: float

    @property
    def flops(self) -> float:
        return sum(c.stats.flops for c in self.components)

    @property
    def bytes_read(self) -> float:
        return sum(c.stats.bytes_read for c in self.components)

    def component(self, category: str) -> ComponentTime:
        for c in self.components:
            if c.stats.category == category:
                return c
        raise KeyError(category)


def roofline(
    stats: Iterable[OpStats], bandwidth: float, peak_flops: float, overlap: str = "sum"
) -> StepCost:
    if overlap not in OVERLAP_MODELS:
        raise ValueError(f"overlap model must be one of {OVERLAP_MODELS}, got {overlap!r}")
    comps = [ComponentTime(s, s.bytes_read / bandwidth, s.flops / peak_flops) for s in stats]
    if overlap == "sum":
        latency = sum(c.time for c in comps)
    else:
        latency = max(
            sum(c.bandwidth_time for c in comps), sum(c.compute_time for c in comps)
        )
    return StepCost(comps, latency)


def attention_times(
    policy: PolicySpec,
    workload: WorkloadSpec,
    model: ModelSpec,
    hw: HardwareSpec,
    batch: int,
    overlap: str = "sum",
) -> StepCost:
    """Per-token step cost on the aggregate hardware (all nodes pooled)."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return roofline(
        op_stats(policy, workload, model, batch),
        hw.aggregate_bandwidth,
        hw.aggregate_flops,
        overlap,
    )


def token_rate(latency: float, target_rate: float, slo_cap: bool = True) -> float:
    rate = 1.0 / latency
    return min(rate, target_rate) if slo_cap else rate


@dataclass(frozen=True)
class SweepRow:
    policy: str
    shared_len: int
    row_kind: str  # "batch" or "max" (the per-(policy, shared_len) summary)
    batch: int
    max_batch: int
    feasible: bool
    latency_per_token: float
    rate_per_request: float
    system_throughput: float
    normalized_throughput: float


def _serve(
    policy: PolicySpec,
    workload: WorkloadSpec,
    model: ModelSpec,
    hw: HardwareSpec,
    batch: int,
    slo_cap: bool,
    overlap: str,
) -> tuple[float, float, float]:
    """(latency, per-request rate, system throughput) when serving ``batch`` requests."""
    if batch <= 0:
        return math.inf, 0.0, 0.0
    latency = attention_times(policy, workload, model, hw, batch, overlap).latency
    rate = token_rate(latency, workload.target_rate, slo_cap)
    return latency, rate, batch * rate


def _ratio(value: float, base: float) -> float:
    if base > 0:
        return value / base
    return math.inf if value > 0 else 0.0


def throughput(
    policy: PolicySpec,
    workload: WorkloadSpec,
    model: ModelSpec,
    hw: HardwareSpec,
    slo_cap: bool = True,
    overlap: str = "sum",
    baseline: PolicySpec = BASELINE,
) -> list[SweepRow]:
    """Rows for every (shared_len, batch) of the workload plus one summary row per shared_len.

    A batch above ``max_batch`` cannot be held in memory; such a row reports
    ``feasible=False`` and the throughput of the largest batch that fits. Each
    row is normalized to the baseline policy serving the same batch (capped at
    the baseline's own max batch); summary rows compare the two policies at
    their respective max batches.
    """
    rows = []
    for shared_len in workload.shared_lens:
        wl = workload.with_shared_len(shared_len)
        mb = max_batch(policy, wl, model, hw)
        base_mb = max_batch(baseline, wl, model, hw)
        for batch in wl.batch_sizes:
            eff = min(batch, mb)
            latency, rate, thr = _serve(policy, wl, model, hw, eff, slo_cap, overlap)
            *_, base = _serve(baseline, wl, model, hw, min(batch, base_mb), slo_cap, overlap)
            norm = 1.0 if policy == baseline else _ratio(thr, base)
            rows.append(
                SweepRow(policy.name, shared_len, "batch", batch, mb, batch <= mb,
                         latency, rate, thr, norm)
            )
        latency, rate, thr = _serve(policy, wl, model, hw, mb, slo_cap, overlap)
        *_, base = _serve(baseline, wl, model, hw, base_mb, slo_cap, overlap)
        norm = 1.0 if policy == baseline else _ratio(thr, base)
        rows.append(SweepRow(policy.name, shared_len, "max", mb, mb, mb > 0,
                             latency, rate, thr, norm))
    return rows


def sweep(
    policies: Sequence[PolicySpec],
    workload: WorkloadSpec,
    model: ModelSpec,
    hw: HardwareSpec,
    slo_cap: bool = True,
    overlap: str = "sum",
) -> list[SweepRow]:
    """Rows ordered by policy (config order), shared_len, then batch rows before the summary."""
    rows = []
    for p in policies:
        rows.extend(throughput(p, workload, model, hw, slo_cap, overlap))
    return rows


def peak_normalized(rows: Sequence[SweepRow], policy: str = MOSKA.name) -> float:
    vals = [r.normalized_throughput for r in rows if r.policy == policy and r.row_kind == "max"]
    return max(vals) if vals else math.nan


# ------------------------------------------------------------ disaggregated nodes


@dataclass(frozen=True)
class NodeProfile:
    role: str  # unique_node | shared_node | monolithic
    shared_len: int
    batch: int
    capacity_used: float
    bandwidth_time: float
    compute_time: float
    mfu: float
    bw_util: float
    cap_util: float
    feasible: bool


def _profile(
    role: str,
    stats: list[OpStats],
    capacity_used: float,
    nodes: int,
    hw: HardwareSpec,
    workload: WorkloadSpec,
    batch: int,
    feasible: bool,
    slo_cap: bool,
    overlap: str,
) -> NodeProfile:
    bw, peak, cap = hw.node_bandwidth(nodes), hw.node_flops(nodes), hw.node_capacity(nodes)
    cost = roofline(stats, bw, peak, overlap)
    bw_time = sum(c.bandwidth_time for c in cost.components)
    compute_time = sum(c.compute_time for c in cost.components)
    # occupancy: token steps per second actually run, below 1/latency when
    # the SLO cap leaves the node idle part of the time
    rate = token_rate(cost.latency, workload.target_rate, slo_cap) if cost.latency > 0 else 0.0
    return NodeProfile(
        role,
        workload.shared_len,
        batch,
        capacity_used,
        bw_time,
        compute_time,
        mfu=min(1.0, compute_time * rate),
        bw_util=min(1.0, bw_time * rate),
        cap_util=min(1.0, capacity_used / cap),
        feasible=feasible,
    )


def node_utilization(
    workload: WorkloadSpec,
    model: ModelSpec,
    hw: HardwareSpec,
    batch: int,
    slo_cap: bool = True,
    overlap: str = "sum",
) -> list[NodeProfile]:
    """Unique node (unique attention + weights/FFN) and shared node (shared attention only).

    The point is infeasible when the unique node cannot hold the weights plus
    ``batch`` unique caches, or the shared node cannot hold the shared store.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    unique_stats, shared_stats, ffn_stats = op_stats(MOSKA, workload, model, batch)
    per_request, shared_store = per_request_kv_bytes(MOSKA, workload, model)
    unique_used = weights_bytes(model) + batch * per_request
    feasible = (
        unique_used <= hw.node_capacity(hw.num_unique_nodes)
        and shared_store <= hw.node_capacity(hw.num_shared_nodes)
    )
    return [
        _profile("unique_node", [unique_stats, ffn_stats], unique_used, hw.num_unique_nodes,
                 hw, workload, batch, feasible, slo_cap, overlap),
        _profile("shared_node", [shared_stats], shared_store, hw.num_shared_nodes,
                 hw, workload, batch, feasible, slo_cap, overlap),
    ]


def utilization_sweep(
    workload: WorkloadSpec,
    model: ModelSpec,
    hw: HardwareSpec,
    slo_cap: bool = True,
    overlap: str = "sum",
) -> list[NodeProfile]:
    """Ordered by node role, shared_len, batch."""
    profiles = [
        p
        for shared_len in workload.shared_lens
        for batch in workload.batch_sizes
        if batch >= 1
        for p in node_utilization(workload.with_shared_len(shared_len), model, hw, batch,
                                  slo_cap, overlap)
    ]
    order = {"unique_node": 0, "shared_node": 1}
    return sorted(profiles, key=lambda p: (order[p.role], p.shared_len, p.batch))


# ------------------------------------------------------------ KV-size scaling

FIG1_FLAGS = ("gqa", "sparse", "quant")
# element width assumed before quantization
UNQUANTIZED_KV_BYTES = 2


def reduction_factors(model: ModelSpec, workload: WorkloadSpec) -> dict[str, float]:
    return {
        "gqa": model.num_q_heads / model.num_kv_heads,
        "sparse": 1.0 / (1.0 - workload.sparsity),
        "quant": UNQUANTIZED_KV_BYTES / model.kv_bytes_per_element,
    }


@dataclass(frozen=True)
class ScalingRow:
    flags: str
    batch: int
    seq_len: int
    kv_bytes: float
    normalized: float


def kv_size_scaling(
    model: ModelSpec,
    workload: WorkloadSpec,
    flags: Iterable[str] = (),
    batches: Sequence[int] | None = None,
    seq_lens: Sequence[int] | None = None,
) -> list[ScalingRow]:
    """KV footprint over (batch, seq_len) with the chosen optimizations applied.

    The reference point is an unoptimized model (one KV head per query head,
    16-bit elements, dense attention) at batch 1 and the shortest sequence;
    ``normalized`` is relative to it.
    """
    flags = tuple(sorted(set(flags), key=FIG1_FLAGS.index)) if flags else ()
    unknown = set(flags) - set(FIG1_FLAGS)
    if unknown:
        raise ValueError(f"unknown optimization flags {sorted(unknown)}")
    batches = list(batches or workload.batch_sizes)
    seq_lens = list(seq_lens or workload.shared_lens)
    factors = reduction_factors(model, workload)
    reduction = math.prod(factors[f] for f in flags)
    per_token = 2 * model.num_layers * model.num_q_heads * model.head_dim * UNQUANTIZED_KV_BYTES
    ref = per_token * min(seq_lens)
    label = "+".join(flags) or "none"
    return [
        ScalingRow(label, b, s, b * s * per_token / reduction, b * s * per_token / reduction / ref)
        for b in batches
        for s in seq_lens
    ]


@dataclass(frozen=True)
class BandwidthScalingRow:
    policy: str
    batch: int
    capacity_bytes: float
    bytes_per_step: float


def bandwidth_scaling(
    policies: Sequence[PolicySpec],
    workload: WorkloadSpec,
    model: ModelSpec,
    batches: Sequence[int] | None = None,
) -> list[BandwidthScalingRow]:
    """KV capacity and per-step KV traffic versus batch, per policy."""
    rows = []
    for p in policies:
        per_request, once = per_request_kv_bytes(p, workload, model)
        for b in batches or workload.batch_sizes:
            if b < 1:
                continue
            kv_traffic = sum(
                s.bytes_read for s in op_stats(p, workload, model, b) if s.category != "weights_ffn"
            )
            rows.append(BandwidthScalingRow(p.name, b, once + b * per_request, kv_traffic))
    return rows
