"""JSON-Lines persistence of per-step, per-layer attention traces.

Line 1 is the header object; each following line is one record. Keys are
written in a fixed order and floats use Python's shortest round-trip repr, so
serialization is canonical: the same trace always yields the same bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import TraceParseError, TraceValidationError

TRACE_SUFFIX = ".clvstrace.jsonl"
SLICE_SUM_TOL = 1e-9


@dataclass
class TraceRecord:
    step: int
    layer: int
    pre_visual_attention: list[list[float]]
    post_visual_attention: list[list[float]]
    memory: list[float]
    uncertainty: float | None
    terminated: bool
    layer_argmax_token: int

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


RECORD_FIELDS = tuple(f.name for f in fields(TraceRecord))


@dataclass
class TraceFile:
    header: dict
    records: list[TraceRecord] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return int(self.header["model"]["n_layers"])

    @property
    def gate_start_layer(self) -> int | None:
        clvs = self.header.get("clvs") or {}
        return clvs.get("gate_start_layer")

    def steps(self) -> list[list[TraceRecord]]:
        """Records grouped by step, each group ordered by layer."""
        L = self.n_layers
        return [self.records[i : i + L] for i in range(0, len(self.records), L)]


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def serialize(trace: TraceFile) -> str:
    validate(trace)
    lines = [_dumps(trace.header)]
    lines.extend(_dumps(r.to_dict()) for r in trace.records)
    return "\n".join(lines) + "\n"


def write_trace(file_path, trace: TraceFile) -> None:
    text = serialize(trace)
    # newline="" keeps "\n" on every platform so bytes match across OSes
    with open(file_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _record_from(obj, lineno) -> TraceRecord:
    if not isinstance(obj, dict) or set(obj) != set(RECORD_FIELDS):
        raise TraceParseError(f"record must have exactly the fields {RECORD_FIELDS}", lineno)
    return TraceRecord(**obj)


def read_trace(file_path) -> TraceFile:
    text = Path(file_path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        # no terminating newline: the last line was cut short
        try:
            json.loads(lines[-1])
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"truncated line: {exc.msg}", len(lines)) from exc
    if not lines:
        raise TraceParseError("empty trace file", 1)

    parsed = []
    for lineno, line in enumerate(lines, start=1):
        try:
            parsed.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise TraceParseError(f"invalid JSON: {exc.msg}", lineno) from exc
    header = parsed[0]
    if not isinstance(header, dict) or "model" not in header:
        raise TraceParseError("header object with a 'model' entry expected", 1)
    records = [_record_from(obj, i) for i, obj in enumerate(parsed[1:], start=2)]
    trace = TraceFile(header, records)
    validate(trace)
    return trace


def validate(trace: TraceFile) -> None:
    """Check ordering, completeness and per-record invariants."""
    L = trace.n_layers
    gate = trace.gate_start_layer
    keys = [(r.step, r.layer) for r in trace.records]
    if keys != sorted(keys):
        raise TraceValidationError("records are not sorted by (step, layer)")
    if len(trace.records) % L:
        raise TraceValidationError(f"{len(trace.records)} records is not a whole number of {L}-layer steps")
    for s, group in enumerate(trace.steps()):
        if [(r.step, r.layer) for r in group] != [(s, l) for l in range(1, L + 1)]:
            raise TraceValidationError(f"step {s} does not hold layers 1..{L} exactly once")
        for r in group:
            for name in ("pre_visual_attention", "post_visual_attention"):
                for row in getattr(r, name):
                    if any(v < 0 for v in row) or sum(row) > 1 + SLICE_SUM_TOL:
                        raise TraceValidationError(f"step {s} layer {r.layer}: {name} is not a normalized slice")
            if r.uncertainty is not None and (gate is None or r.layer < gate):
                raise TraceValidationError(f"step {s} layer {r.layer}: uncertainty recorded below the gate layer")


def checksum(trace: TraceFile, digits: int | None = None) -> str:
    """SHA-256 of the canonical serialization.

    With ``digits`` set, floats are rounded to that many significant digits
    first, which absorbs last-ulp libm differences between platforms.
    """
    if digits is None:
        return hashlib.sha256(serialize(trace).encode()).hexdigest()

    def rnd(obj):
        if isinstance(obj, float):
            return float(f"{obj:.{digits}g}")
        if isinstance(obj, list):
            return [rnd(x) for x in obj]
        if isinstance(obj, dict):
            return {k: rnd(v) for k, v in obj.items()}
        return obj

    lines = [_dumps(rnd(trace.header))] + [_dumps(rnd(r.to_dict())) for r in trace.records]
    return hashlib.sha256(("\n".join(lines) + "\n").encode()).hexdigest()
