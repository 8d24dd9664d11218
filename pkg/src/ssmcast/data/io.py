"""File formats: events JSONL, gridded records JSONL/CSV, JSON sidecars.

Floats are written with ``repr`` precision so every round trip is lossless.
Non-finite record cells (not yet imputed) are stored as ``null`` in JSONL and
``nan`` in CSV.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from ssmcast.data.records import KINDS, DataFormatError, Event, EventStream, PatientRecord

EVENT_KEYS = ("patient_id", "time_h", "channel", "value", "kind")


def dump_json(obj) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dump_json(obj), encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc.msg})", exc.lineno) from None


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                yield n, line


def _parse_event(obj, n: int) -> tuple[str, Event]:
    if not isinstance(obj, dict):
        raise DataFormatError("expected a JSON object", n)
    missing = [k for k in EVENT_KEYS if k not in obj]
    if missing:
        raise DataFormatError(f"missing field(s): {', '.join(missing)}", n)
    kind = obj["kind"]
    if kind not in KINDS:
        raise DataFormatError(f"unknown kind {kind!r} (expected 'obs' or 'int')", n)
    pid, channel = obj["patient_id"], obj["channel"]
    if not isinstance(pid, str) or not isinstance(channel, str):
        raise DataFormatError("patient_id and channel must be strings", n)
    try:
        time, value = float(obj["time_h"]), float(obj["value"])
    except (TypeError, ValueError):
        raise DataFormatError("time_h and value must be numbers", n) from None
    if isinstance(obj["time_h"], bool) or isinstance(obj["value"], bool):
        raise DataFormatError("time_h and value must be numbers", n)
    if not math.isfinite(time) or time < 0:
        raise DataFormatError(f"time_h must be finite and non-negative, got {obj['time_h']!r}", n)
    if not math.isfinite(value):
        raise DataFormatError("value must be finite", n)
    return pid, Event(time, channel, value, kind)


def read_events(path) -> list[EventStream]:
    """Streams in order of first appearance; events keep file order."""
    streams: dict[str, EventStream] = {}
    for n, line in _lines(path):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"malformed JSON ({exc.msg})", n) from None
        pid, event = _parse_event(obj, n)
        streams.setdefault(pid, EventStream(pid)).events.append(event)
    return list(streams.values())


def events_jsonl(streams: Iterable[EventStream]) -> str:
    out = io.StringIO()
    for s in streams:
        for e in s.events:
            row = {"patient_id": s.patient_id, "time_h": e.time, "channel": e.channel, "value": e.value, "kind": e.kind}
            out.write(json.dumps(row, allow_nan=False) + "\n")
    return out.getvalue()


def write_events(path, streams: Iterable[EventStream]) -> int:
    text = events_jsonl(streams)
    Path(path).write_text(text, encoding="utf-8")
    return text.count("\n")


def _matrix_to_json(a: np.ndarray) -> list:
    return [[float(v) if math.isfinite(v) else None for v in row] for row in a.tolist()]


def _matrix_from_json(rows, width: int, what: str, n: int) -> np.ndarray:
    try:
        a = np.array([[np.nan if v is None else float(v) for v in row] for row in rows], dtype=np.float64)
    except (TypeError, ValueError):
        raise DataFormatError(f"{what} must be a matrix of numbers", n) from None
    if a.size == 0:
        a = a.reshape(len(rows), width)
    if a.ndim != 2 or a.shape[1] != width:
        raise DataFormatError(f"{what} has the wrong number of columns", n)
    return a


def record_to_json(r: PatientRecord) -> dict:
    return {
        "patient_id": r.patient_id,
        "grid_step_h": float(r.grid_step),
        "obs_channels": list(r.obs_channels),
        "int_channels": list(r.int_channels),
        "x": _matrix_to_json(r.x),
        "x_mask": r.x_mask.astype(int).tolist(),
        "u": _matrix_to_json(r.u),
        "u_mask": r.u_mask.astype(int).tolist(),
    }


def record_from_json(obj, n: int | None = None) -> PatientRecord:
    keys = ("patient_id", "grid_step_h", "obs_channels", "int_channels", "x", "x_mask", "u", "u_mask")
    if not isinstance(obj, dict):
        raise DataFormatError("expected a JSON object", n)
    missing = [k for k in keys if k not in obj]
    if missing:
        raise DataFormatError(f"missing field(s): {', '.join(missing)}", n)
    oc, ic = list(obj["obs_channels"]), list(obj["int_channels"])
    x = _matrix_from_json(obj["x"], len(oc), "x", n)
    u = _matrix_from_json(obj["u"], len(ic), "u", n)
    xm = _matrix_from_json(obj["x_mask"], len(oc), "x_mask", n).astype(bool)
    um = _matrix_from_json(obj["u_mask"], len(ic), "u_mask", n).astype(bool)
    try:
        return PatientRecord(obj["patient_id"], x, xm, u, um, oc, ic, float(obj["grid_step_h"]))
    except DataFormatError as exc:
        raise DataFormatError(str(exc), n) from None


def records_jsonl(records: Iterable[PatientRecord]) -> str:
    return "".join(json.dumps(record_to_json(r), allow_nan=False) + "\n" for r in records)


def _csv_header(oc: Sequence[str], ic: Sequence[str]) -> list[str]:
    return (
        ["patient_id", "grid_step_h", "t"]
        + [f"x:{c}" for c in oc] + [f"x_mask:{c}" for c in oc]
        + [f"u:{c}" for c in ic] + [f"u_mask:{c}" for c in ic]
    )


def records_csv(records: Sequence[PatientRecord]) -> str:
    """Wide CSV, one row per (patient, step); ``t`` is 1-based."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    if not records:
        return ""
    oc, ic = records[0].obs_channels, records[0].int_channels
    w.writerow(_csv_header(oc, ic))
    for r in records:
        if r.obs_channels != oc or r.int_channels != ic:
            raise ValueError("CSV output needs one channel set for all records")
        for t in range(r.T):
            w.writerow(
                [r.patient_id, repr(float(r.grid_step)), t + 1]
                + [repr(float(v)) for v in r.x[t]] + [int(v) for v in r.x_mask[t]]
                + [repr(float(v)) for v in r.u[t]] + [int(v) for v in r.u_mask[t]]
            )
    return out.getvalue()


def _read_records_csv(path) -> list[PatientRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        oc = [h[2:] for h in header if h.startswith("x:")]
        ic = [h[2:] for h in header if h.startswith("u:")]
        if header != _csv_header(oc, ic):
            raise DataFormatError("unrecognised record CSV header", 1)
        rows: dict[str, list] = {}
        steps: dict[str, float] = {}
        no, ni = len(oc), len(ic)
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", n)
            try:
                pid, step, t = row[0], float(row[1]), int(row[2])
                vals = [float(v) for v in row[3:]]
            except ValueError:
                raise DataFormatError("non-numeric field", n) from None
            rows.setdefault(pid, [])
            steps[pid] = step
            if t != len(rows[pid]) + 1:
                raise DataFormatError(f"patient {pid}: expected t={len(rows[pid]) + 1}, got {t}", n)
            rows[pid].append(vals)
    out = []
    for pid, vals in rows.items():
        a = np.array(vals)
        x, xm = a[:, :no], a[:, no:2 * no].astype(bool)
        u, um = a[:, 2 * no:2 * no + ni], a[:, 2 * no + ni:].astype(bool)
        out.append(PatientRecord(pid, x, xm, u, um, list(oc), list(ic), steps[pid]))
    return out


def _is_csv(path) -> bool:
    return str(path).lower().endswith(".csv")


def write_records(path, records: Sequence[PatientRecord]) -> None:
    text = records_csv(records) if _is_csv(path) else records_jsonl(records)
    Path(path).write_text(text, encoding="utf-8")


def read_records(path) -> list[PatientRecord]:
    """Read records; the format follows the file extension (``.csv`` or JSONL)."""
    if _is_csv(path):
        return _read_records_csv(path)
    out = []
    for n, line in _lines(path):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"malformed JSON ({exc.msg})", n) from None
        out.append(record_from_json(obj, n))
    return out
