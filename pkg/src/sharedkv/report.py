"""CSV/JSON report writing with a run manifest header.

Data files are RFC-4180 CSV with LF line endings. The first line is
``# manifest: {...}`` (JSON); it is the only line that carries a timestamp,
so everything after it is byte-identical across runs with the same config,
seed and tool version.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import Config, dump_config
from .perf import NodeProfile, SweepRow

SWEEP_COLUMNS = tuple(f.name for f in fields(SweepRow))
UTIL_COLUMNS = ("node_role", "shared_len", "batch", "mfu", "bw_util", "cap_util", "feasible")
VERIFY_COLUMNS = ("check", "cases", "max_rel_error", "tolerance", "status", "failing_seeds")
TRACE_COLUMNS = ("query_id", "selected_chunk_ids", "scores")

MANIFEST_PREFIX = "# manifest: "


@dataclass(frozen=True)
class RunManifest:
    config_digest: str
    seed: int
    tool_version: str
    timestamp: str

    @classmethod
    def create(cls, cfg: Config, seed: int) -> "RunManifest":
        digest = hashlib.sha256(dump_config(cfg).encode()).hexdigest()
        now = datetime.now(timezone.utc).replace(microsecond=0).isoformat()
        return cls(digest, seed, __version__, now)


def fmt(value: Any) -> str:
    """Cell formatting: ints verbatim, bools lowercase, floats at 6 significant digits."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.6g}"
    return str(value)


def sweep_records(rows: Sequence[SweepRow]) -> list[dict[str, Any]]:
    return [asdict(r) for r in rows]


def util_records(profiles: Sequence[NodeProfile]) -> list[dict[str, Any]]:
    return [
        {
            "node_role": p.role,
            "shared_len": p.shared_len,
            "batch": p.batch,
            "mfu": p.mfu,
            "bw_util": p.bw_util,
            "cap_util": p.cap_util,
            "feasible": p.feasible,
        }
        for p in profiles
    ]


def render_csv(columns: Sequence[str], records: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for rec in records:
        writer.writerow([fmt(rec[c]) for c in columns])
    return buf.getvalue()


def render_json(records: Sequence[dict[str, Any]], extra: dict[str, Any] | None = None) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return fmt(v)
        return v

    body = {"rows": [{k: clean(v) for k, v in r.items()} for r in records]}
    body.update(extra or {})
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


def manifest_line(manifest: RunManifest) -> str:
    return MANIFEST_PREFIX + json.dumps(asdict(manifest), sort_keys=True) + "\n"


def data_section(text: str) -> str:
    """Everything after the manifest line."""
    if text.startswith(MANIFEST_PREFIX):
        return text.split("\n", 1)[1]
    return text


def write_report(path: str | Path, manifest: RunManifest, body: str) -> None:
    Path(path).write_text(manifest_line(manifest) + body, newline="\n")


def write_json(path: str | Path, manifest: RunManifest, body: str) -> None:
    doc = json.loads(body)
    doc["manifest"] = asdict(manifest)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
