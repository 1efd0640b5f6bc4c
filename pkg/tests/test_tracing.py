import hashlib
from pathlib import Path

import pytest

from clvs.engine import TokenLayout
from clvs.errors import TraceParseError, TraceValidationError
from clvs.harness.runner import run_mode
from clvs.harness.synth import gen_model, random_prompt
from clvs.smoothing import ClvsConfig
from clvs.tracing import TraceFile, checksum, read_trace, serialize, write_trace

GOLDEN = Path(__file__).parent / "data" / "golden.clvstrace.jsonl"
# frozen from the seeded run in golden_run() below
GOLDEN_FILE_SHA256 = "a3577b78a199edf7d63a81fbc976675c489d1044029949c50c46b15d178e9491"
GOLDEN_ROUNDED_SHA256 = "e93091553f8327bb277e856f10037fa3c326374e44456cba9c1088ece3491b07"


def golden_run():
    model = gen_model(2024, {"n_layers": 6, "n_heads": 2, "head_dim": 8, "vocab": 32, "logit_scale": 4.0})
    layout = TokenLayout(2, 4, 3)
    return run_mode(model, layout, random_prompt(2024, 9, 32), 3, ClvsConfig(), True, "clvs")


@pytest.fixture(scope="module")
def trace():
    return golden_run().trace


def test_round_trip(tmp_path, trace):
    path = tmp_path / "t.clvstrace.jsonl"
    write_trace(path, trace)
    again = read_trace(path)
    assert again.header == trace.header
    assert again.records == trace.records


def test_canonical_bytes(tmp_path, trace):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_trace(a, trace)
    write_trace(b, read_trace(a))
    assert a.read_bytes() == b.read_bytes()


def test_empty_trace_is_header_only(tmp_path, trace):
    path = tmp_path / "empty.jsonl"
    write_trace(path, TraceFile(trace.header, []))
    assert path.read_text().count("\n") == 1
    assert read_trace(path).records == []


def test_shuffled_records_rejected(tmp_path, trace):
    lines = serialize(trace).splitlines()
    lines[2], lines[3] = lines[3], lines[2]
    path = tmp_path / "shuffled.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceValidationError, match="sorted"):
        read_trace(path)


def test_incomplete_step_rejected(tmp_path, trace):
    lines = serialize(trace).splitlines()[:-1]
    path = tmp_path / "short.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceValidationError):
        read_trace(path)


def test_truncated_line_names_line(tmp_path, trace):
    text = serialize(trace)
    path = tmp_path / "cut.jsonl"
    path.write_text(text[: len(text) - 40])
    n_lines = text.count("\n")
    with pytest.raises(TraceParseError, match=f"line {n_lines}"):
        read_trace(path)


def test_malformed_middle_line(tmp_path, trace):
    lines = serialize(trace).splitlines()
    lines[4] = lines[4][:-5]
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceParseError, match="line 5"):
        read_trace(path)


def test_uncertainty_below_gate_rejected(trace):
    bad = TraceFile(trace.header, list(trace.records))
    bad.records[0] = type(bad.records[0])(**{**bad.records[0].to_dict(), "uncertainty": 0.3})
    with pytest.raises(TraceValidationError, match="gate"):
        serialize(bad)


def test_golden_fixture_loads_with_frozen_checksum():
    assert hashlib.sha256(GOLDEN.read_bytes()).hexdigest() == GOLDEN_FILE_SHA256
    loaded = read_trace(GOLDEN)
    assert checksum(loaded, digits=10) == GOLDEN_ROUNDED_SHA256


def test_golden_fixture_regenerates(trace):
    # rounded form absorbs last-ulp libm differences across platforms
    assert checksum(trace, digits=10) == GOLDEN_ROUNDED_SHA256
    assert checksum(golden_run().trace) == checksum(trace)
