import json
from pathlib import Path

import pytest

from sharedkv.cli import CONFIG_ENV, main
from sharedkv.report import (
    MANIFEST_PREFIX,
    SWEEP_COLUMNS,
    UTIL_COLUMNS,
    VERIFY_COLUMNS,
    data_section,
    fmt,
)

GOLDEN = Path(__file__).parent / "golden"
SMALL = str(GOLDEN / "small.yaml")


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_schema_headers_pinned():
    assert ",".join(SWEEP_COLUMNS) == (
        "policy,shared_len,row_kind,batch,max_batch,feasible,latency_per_token,"
        "rate_per_request,system_throughput,normalized_throughput"
    )
    assert ",".join(UTIL_COLUMNS) == "node_role,shared_len,batch,mfu,bw_util,cap_util,feasible"
    assert ",".join(VERIFY_COLUMNS) == "check,cases,max_rel_error,tolerance,status,failing_seeds"


@pytest.mark.parametrize("cmd", ["sweep", "util"])
def test_golden_outputs(capsys, cmd):
    code, out, _ = run(capsys, cmd, "--config", SMALL)
    assert code == 0
    assert out == (GOLDEN / f"{cmd}_small.csv").read_text()


def test_fmt():
    assert fmt(1) == "1" and fmt(True) == "true" and fmt(1 / 3) == "0.333333"
    assert fmt(1e-20) == "1e-20" and fmt(float("inf")) == "inf"


def test_sweep_file_with_manifest(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    code, _, err = run(capsys, "sweep", "--config", SMALL, "--out", str(out), "--json")
    assert code == 0 and "reported: 538.7x" in err
    text = out.read_text()
    header, body = text.split("\n", 1)
    assert header.startswith(MANIFEST_PREFIX)
    manifest = json.loads(header[len(MANIFEST_PREFIX):])
    assert set(manifest) == {"config_digest", "seed", "tool_version", "timestamp"}
    assert body == (GOLDEN / "sweep_small.csv").read_text()
    doc = json.loads(out.with_suffix(".json").read_text())
    assert doc["reported_peak_normalized_throughput"] == 538.7
    assert doc["peak_normalized_throughput"] > 100
    assert len(doc["rows"]) == body.count("\n") - 1


def test_default_sweep_covers_paper_grid(capsys):
    code, out, _ = run(capsys, "sweep")
    rows = [line.split(",") for line in out.splitlines()[1:]]
    assert {r[0] for r in rows} == {"FlashAttention", "SGLang", "LongHeads", "ChunkAttention", "MoSKA"}
    assert {int(r[1]) for r in rows} == {n * 2**20 for n in (1, 2, 4, 8, 16)}
    assert {r[9] for r in rows if r[0] == "FlashAttention"} == {"1"}


def test_single_policy_single_length_counts(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("workload: {shared_len: 1M, shared_lens: [1M], batch_sizes: [1, 2, 8]}\npolicies: [SGLang]\n")
    _, out, _ = run(capsys, "sweep", "--config", str(cfg))
    assert len(out.splitlines()) == 1 + 3 + 1


def test_util_soft_infeasible(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("workload: {shared_lens: [16M], batch_sizes: [1, 256, 512]}\n")
    code, out, _ = run(capsys, "util", "--config", str(cfg))
    assert code == 0
    rows = [r.split(",") for r in out.splitlines()[1:]]
    assert [r[-1] for r in rows if r[2] == "512"] == ["false", "false"]
    unique_caps = [float(r[5]) for r in rows if r[0] == "unique_node" and r[-1] == "true"]
    assert unique_caps == sorted(unique_caps) and len(set(unique_caps)) == len(unique_caps)


def test_env_var_config(monkeypatch, capsys):
    monkeypatch.setenv(CONFIG_ENV, SMALL)
    _, out, _ = run(capsys, "sweep")
    assert out == (GOLDEN / "sweep_small.csv").read_text()


def test_config_error_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("workload: {sparsity: 1.0}\n")
    code, _, err = run(capsys, "sweep", "--config", str(cfg))
    assert code == 2 and "sparsity" in err
    code, _, _ = run(capsys, "util", "--config", str(tmp_path / "missing.yaml"))
    assert code == 2


def test_unwritable_output_exit_2(tmp_path, capsys):
    code, _, _ = run(capsys, "sweep", "--out", str(tmp_path / "no" / "dir" / "x.csv"))
    assert code == 2


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_verify_passes(capsys):
    code, out, err = run(capsys, "verify", "--seed", "11", "--cases", "30")
    assert code == 0
    assert "all 9 properties passed" in err
    assert all(line.endswith("pass,") for line in out.splitlines()[1:])


def test_verify_fault_injection_names_invariant(capsys):
    code, _, err = run(capsys, "verify", "--cases", "20", "--inject-fault", "merge-sign")
    assert code == 1
    assert "violated: chunking invariance" in err


def test_verify_trace_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        assert run(capsys, "verify", "--seed", "5", "--cases", "20", "--trace", "--out", str(path))[0] == 0
    assert data_section(a.read_text()) == data_section(b.read_text())
    trace = data_section(a.with_suffix(".trace.csv").read_text()).splitlines()
    assert trace[0] == "query_id,selected_chunk_ids,scores"
    assert len(trace) == 9
    qid, selected, scores = trace[1].split(",")
    assert len(selected.split()) == len(scores.split())
