"""Model, hardware, workload and policy specifications plus the YAML config loader.

Defaults reproduce the evaluation setup: Llama 3.1 8B in FP8 on two DGX H200
nodes (one unique-KV node, one shared-KV node), 64K unique tokens per request,
1M-16M shared tokens, 75% routing sparsity and a 35 tok/s per-request target.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for missing files, schema violations and invariant violations."""


KIB = 1024
MIB = KIB**2
GIB = KIB**3
TIB = KIB**4

_BYTE_SUFFIXES = {"": 1, "B": 1, "KB": KIB, "MB": MIB, "GB": GIB, "TB": TIB}
_COUNT_SUFFIXES = {"": 1, "K": KIB, "M": MIB, "G": GIB}


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int = 32
    num_q_heads: int = 32
    num_kv_heads: int = 8
    head_dim: int = 128
    param_count: int = 8_030_000_000
    weight_bytes_per_param: int = 1
    kv_bytes_per_element: int = 1

    def __post_init__(self) -> None:
        for name in ("num_layers", "num_q_heads", "num_kv_heads", "head_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be > 0 (all counts > 0)")
        if self.param_count < 0 or self.weight_bytes_per_param <= 0:
            raise ConfigError("model.param_count must be >= 0 and weight_bytes_per_param > 0")
        if self.num_q_heads % self.num_kv_heads:
            raise ConfigError(
                "model.num_q_heads must be a positive multiple of num_kv_heads"
            )
        if self.kv_bytes_per_element not in (1, 2, 4):
            raise ConfigError("model.kv_bytes_per_element must be one of {1, 2, 4}")


@dataclass(frozen=True)
class HardwareSpec:
    """Per-GPU figures; aggregates multiply by GPUs per node and node count."""

    gpus_per_node: int = 8
    mem_capacity_per_gpu: float = 141e9
    mem_bandwidth_per_gpu: float = 4.8e12
    peak_flops_per_gpu: float = 1979e12
    num_unique_nodes: int = 1
    num_shared_nodes: int = 1
    # Fraction of capacity held back for activations etc. Unstated in the
    # evaluation setup, so 0 by default.
    mem_reserve_fraction: float = 0.0

    def __post_init__(self) -> None:
        for name in (
            "gpus_per_node",
            "mem_capacity_per_gpu",
            "mem_bandwidth_per_gpu",
            "peak_flops_per_gpu",
            "num_unique_nodes",
            "num_shared_nodes",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"hardware.{name} must be > 0")
        if not 0.0 <= self.mem_reserve_fraction < 1.0:
            raise ConfigError("hardware.mem_reserve_fraction must be in [0, 1)")

    @property
    def num_nodes(self) -> int:
        return self.num_unique_nodes + self.num_shared_nodes

    def node_capacity(self, nodes: int = 1) -> float:
        usable = self.mem_capacity_per_gpu * (1.0 - self.mem_reserve_fraction)
        return usable * self.gpus_per_node * nodes

    def node_bandwidth(self, nodes: int = 1) -> float:
        return self.mem_bandwidth_per_gpu * self.gpus_per_node * nodes

    def node_flops(self, nodes: int = 1) -> float:
        return self.peak_flops_per_gpu * self.gpus_per_node * nodes

    @property
    def aggregate_capacity(self) -> float:
        return self.node_capacity(self.num_nodes)

    @property
    def aggregate_bandwidth(self) -> float:
        return self.node_bandwidth(self.num_nodes)

    @property
    def aggregate_flops(self) -> float:
        return self.node_flops(self.num_nodes)


def _default_shared_lens() -> tuple[int, ...]:
    return tuple(n * MIB for n in (1, 2, 4, 8, 16))


def _default_batches() -> tuple[int, ...]:
    return tuple(2**i for i in range(9))


@dataclass(frozen=True)
class WorkloadSpec:
    shared_len: int = 16 * MIB
    unique_len: int = 64 * KIB
    chunk_size: int = 4096
    sparsity: float = 0.75
    target_rate: float = 35.0
    batch_sizes: tuple[int, ...] = field(default_factory=_default_batches)
    # Shared lengths covered by the throughput/utilization sweeps.
    shared_lens: tuple[int, ...] = field(default_factory=_default_shared_lens)

    def __post_init__(self) -> None:
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        object.__setattr__(self, "shared_lens", tuple(int(s) for s in self.shared_lens))
        if self.chunk_size <= 0:
            raise ConfigError("workload.chunk_size must be > 0")
        if self.unique_len <= 0:
            raise ConfigError("workload.unique_len must be > 0")
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError(
                "workload.sparsity must be in [0, 1) (top-k must be >= 1)"
            )
        if self.target_rate <= 0:
            raise ConfigError("workload.target_rate must be > 0")
        if any(b < 0 for b in self.batch_sizes):
            raise ConfigError("workload.batch_sizes must be nonnegative")
        for s in (self.shared_len, *self.shared_lens):
            if s < 0 or s % self.chunk_size:
                raise ConfigError(
                    f"shared length {s} is not a nonnegative multiple of chunk_size "
                    f"{self.chunk_size}"
                )
        if self.shared_len and top_k(self.shared_len, self.chunk_size, self.sparsity) < 1:
            raise ConfigError("derived top-k must be >= 1")

    @property
    def num_chunks(self) -> int:
        return self.shared_len // self.chunk_size

    def with_shared_len(self, shared_len: int) -> "WorkloadSpec":
        d = asdict(self)
        d["shared_len"] = shared_len
        return WorkloadSpec(**d)


def top_k(shared_len: int, chunk_size: int, sparsity: float) -> int:
    """ceil((1 - sparsity) * num_chunks), computed exactly on the decimal value."""
    kept = (1 - Fraction(repr(float(sparsity)))) * (shared_len // chunk_size)
    return math.ceil(kept)


@dataclass(frozen=True)
class PolicySpec:
    name: str
    kv_reuse: bool = False
    shared_batched_gemm: bool = False
    sparse_routing: bool = False

    def __post_init__(self) -> None:
        if self.shared_batched_gemm and not self.kv_reuse:
            raise ConfigError(
                f"policy {self.name!r}: shared_batched_gemm requires kv_reuse"
            )


FLASH_ATTENTION = PolicySpec("FlashAttention")
SGLANG = PolicySpec("SGLang", kv_reuse=True)
LONGHEADS = PolicySpec("LongHeads", sparse_routing=True)
CHUNK_ATTENTION = PolicySpec("ChunkAttention", kv_reuse=True, shared_batched_gemm=True)
MOSKA = PolicySpec("MoSKA", kv_reuse=True, shared_batched_gemm=True, sparse_routing=True)

BUILTIN_POLICIES: dict[str, PolicySpec] = {
    p.name: p for p in (FLASH_ATTENTION, SGLANG, LONGHEADS, CHUNK_ATTENTION, MOSKA)
}
BASELINE = FLASH_ATTENTION


def kv_bytes_per_token(model: ModelSpec) -> int:
    # 2 = one K and one V vector per KV head per layer
    return 2 * model.num_layers * model.num_kv_heads * model.head_dim * model.kv_bytes_per_element


def weights_bytes(model: ModelSpec) -> int:
    return model.param_count * model.weight_bytes_per_param


@dataclass(frozen=True)
class Config:
    model: ModelSpec = field(default_factory=ModelSpec)
    hardware: HardwareSpec = field(default_factory=HardwareSpec)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    policies: tuple[PolicySpec, ...] = tuple(BUILTIN_POLICIES.values())

    def __iter__(self):
        # allows `model, hw, workload, policies = load_config(path)`
        return iter((self.model, self.hardware, self.workload, list(self.policies)))


# ---------------------------------------------------------------- parsing

_QTY = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*([A-Za-z]*)\s*(?:/s)?\s*$")


def parse_bytes(value: Any) -> float:
    """Parse a byte quantity; suffixes KB/MB/GB/TB are powers of 1024.

    >>> parse_bytes("2KB")
    2048.0
    """
    if isinstance(value, bool):
        raise ConfigError(f"expected a byte quantity, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    m = _QTY.match(str(value))
    if not m or m.group(2).upper() not in _BYTE_SUFFIXES:
        raise ConfigError(f"cannot parse byte quantity {value!r}")
    return float(m.group(1)) * _BYTE_SUFFIXES[m.group(2).upper()]


def parse_count(value: Any) -> int:
    """Parse a token/param count; K/M/G suffixes are powers of 1024."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a count, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise ConfigError(f"expected an integer count, got {value!r}")
        return int(value)
    m = _QTY.match(str(value))
    if not m or m.group(2).upper() not in _COUNT_SUFFIXES:
        raise ConfigError(f"cannot parse count {value!r}")
    n = float(m.group(1)) * _COUNT_SUFFIXES[m.group(2).upper()]
    if not n.is_integer():
        raise ConfigError(f"expected an integer count, got {value!r}")
    return int(n)


def _parse_float(value: Any) -> float:
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a number, got {value!r}") from None


def _parse_bool(value: Any) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"expected true/false, got {value!r}")
    return value


def _parse_count_list(value: Any) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"expected a list, got {value!r}")
    return tuple(parse_count(v) for v in value)


_SCHEMA: dict[str, dict[str, Any]] = {
    "model": {
        "num_layers": parse_count,
        "num_q_heads": parse_count,
        "num_kv_heads": parse_count,
        "head_dim": parse_count,
        "param_count": parse_count,
        "weight_bytes_per_param": parse_count,
        "kv_bytes_per_element": parse_count,
    },
    "hardware": {
        "gpus_per_node": parse_count,
        "mem_capacity_per_gpu": parse_bytes,
        "mem_bandwidth_per_gpu": parse_bytes,
        "peak_flops_per_gpu": _parse_float,
        "num_unique_nodes": parse_count,
        "num_shared_nodes": parse_count,
        "mem_reserve_fraction": _parse_float,
    },
    "workload": {
        "shared_len": parse_count,
        "unique_len": parse_count,
        "chunk_size": parse_count,
        "sparsity": _parse_float,
        "target_rate": _parse_float,
        "batch_sizes": _parse_count_list,
        "shared_lens": _parse_count_list,
    },
}
_SPEC_TYPES = {"model": ModelSpec, "hardware": HardwareSpec, "workload": WorkloadSpec}


def _parse_section(section: str, raw: Any) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    kwargs = {}
    for key, value in raw.items():
        parser = _SCHEMA[section].get(key)
        if parser is None:
            raise ConfigError(f"unknown key {section}.{key}")
        try:
            kwargs[key] = parser(value)
        except ConfigError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from None
    return _SPEC_TYPES[section](**kwargs)


def _parse_policy(raw: Any) -> PolicySpec:
    if isinstance(raw, str):
        if raw not in BUILTIN_POLICIES:
            raise ConfigError(f"unknown built-in policy {raw!r}")
        return BUILTIN_POLICIES[raw]
    if not isinstance(raw, dict) or "name" not in raw:
        raise ConfigError("policies entries must be a built-in name or a mapping with 'name'")
    allowed = {f.name for f in fields(PolicySpec)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key policies.{key}")
    flags = {k: _parse_bool(v) for k, v in raw.items() if k != "name"}
    return PolicySpec(name=str(raw["name"]), **flags)


def parse_config(data: Any) -> Config:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    for key in data:
        if key not in (*_SCHEMA, "policies"):
            raise ConfigError(f"unknown key {key}")
    model = _parse_section("model", data.get("model"))
    hardware = _parse_section("hardware", data.get("hardware"))
    workload = _parse_section("workload", data.get("workload"))
    raw_policies = data.get("policies")
    if raw_policies is None:
        policies = tuple(BUILTIN_POLICIES.values())
    else:
        if not isinstance(raw_policies, list) or not raw_policies:
            raise ConfigError("policies must be a nonempty list")
        policies = tuple(_parse_policy(p) for p in raw_policies)
        names = [p.name for p in policies]
        if len(set(names)) != len(names):
            raise ConfigError("policies names must be unique")
    return Config(model, hardware, workload, policies)


def load_config(path: str | Path | None = None) -> Config:
    """Load and validate a YAML config; ``None`` yields the default setup."""
    if path is None:
        return Config()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return parse_config(data)


def config_to_dict(cfg: Config) -> dict[str, Any]:
    """Plain-data form of ``cfg``; ``parse_config`` inverts it exactly."""
    workload = asdict(cfg.workload)
    workload["batch_sizes"] = list(cfg.workload.batch_sizes)
    workload["shared_lens"] = list(cfg.workload.shared_lens)
    return {
        "model": asdict(cfg.model),
        "hardware": asdict(cfg.hardware),
        "workload": workload,
        "policies": [asdict(p) for p in cfg.policies],
    }


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
