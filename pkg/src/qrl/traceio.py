"""Trace persistence: packed binary and CSV, with atomic writes.

Binary layout (little-endian): header ``magic "QRT1", version u16,
sample_dt_ns f64, n_records u64, samples_per_record u64`` followed by
one block per record: ``prepared_label u8, marker times t_s/t_a/t_b/t_d
as 4 x f64 ns (t_s is NaN when there is no herald), samples f32[]``.
Version 1 files carry no hidden truth; version 2 appends to each record
``initial_state u8, n_transitions u32`` and then ``time f64, state u8``
per transition.  Hidden truth is written only on request so that the
analysis inputs stay honest by default.

Files are written to a temporary sibling and renamed into place, so a
failed write never leaves a partial file behind.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
import tempfile
from typing import Optional, Sequence

import numpy as np

from .trajectory import (
    ExperimentRecord,
    HomodyneTrace,
    PulseSequence,
    QubitState,
    StatePath,
)

__all__ = ["TraceFormatError", "export_traces", "import_traces"]

MAGIC = b"QRT1"
_HEADER = struct.Struct("<4sHdQQ")
_REC_FIXED = struct.Struct("<B4d")
_TRUTH_HEAD = struct.Struct("<BI")
_TRANSITION = struct.Struct("<dB")

_EQUILIBRATION_FALLBACK_NS = 90.0  # window inference for imported records


class TraceFormatError(ValueError):
    """Corrupt, truncated or unsupported trace file."""


def _atomic_write(path: str, writer) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".qrl-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _marker_tuple(seq: PulseSequence) -> tuple[float, float, float, float]:
    t_s = math.nan if seq.t_s is None else seq.t_s
    return (t_s, seq.t_a, seq.t_b, seq.t_d)


def export_traces(
    records: Sequence[ExperimentRecord],
    path: str,
    fmt: str,
    *,
    include_truth: bool = False,
) -> int:
    """Write records to ``path``; returns the number written."""
    if fmt == "packed-binary":
        return _export_binary(records, path, include_truth)
    if fmt == "csv":
        if include_truth:
            raise ValueError("hidden truth export is only supported by packed-binary")
        return _export_csv(records, path)
    raise ValueError(f"unknown format {fmt!r}; choose 'csv' or 'packed-binary'")


def _export_binary(records, path, include_truth) -> int:
    n = len(records)
    samples_per = len(records[0].trace.samples) if n else 0
    dt = records[0].trace.sample_dt_ns if n else 0.0
    version = 2 if include_truth else 1

    def write(fh):
        fh.write(_HEADER.pack(MAGIC, version, dt, n, samples_per))
        for rec in records:
            if len(rec.trace.samples) != samples_per:
                raise ValueError("records must share their trace length")
            fh.write(_REC_FIXED.pack(int(rec.prepared_label), *_marker_tuple(rec.sequence)))
            fh.write(np.ascontiguousarray(rec.trace.samples, dtype="<f4").tobytes())
            if include_truth:
                truth = rec.truth
                if truth is None:
                    raise ValueError("record has no hidden truth to export")
                fh.write(_TRUTH_HEAD.pack(int(truth.initial), len(truth.transitions)))
                for t, s in truth.transitions:
                    fh.write(_TRANSITION.pack(t, int(s)))

    _atomic_write(path, write)
    return n


def _export_csv(records, path) -> int:
    n = len(records)
    samples_per = len(records[0].trace.samples) if n else 0
    dt = records[0].trace.sample_dt_ns if n else 0.0

    def write(fh):
        text = io.TextIOWrapper(fh, encoding="utf-8", newline="")
        text.write(f"# qrl-traces v1 sample_dt_ns={dt!r}\n")
        writer = csv.writer(text)
        header = ["record", "label", "t_s_ns", "t_a_ns", "t_b_ns", "t_d_ns"]
        header += [f"v{i:04d}" for i in range(samples_per)]
        writer.writerow(header)
        for i, rec in enumerate(records):
            if len(rec.trace.samples) != samples_per:
                raise ValueError("records must share their trace length")
            t_s, t_a, t_b, t_d = _marker_tuple(rec.sequence)
            row = [
                i,
                "excited" if rec.prepared_label == QubitState.EXCITED else "ground",
                "" if math.isnan(t_s) else repr(t_s),
                repr(t_a),
                repr(t_b),
                repr(t_d),
            ]
            # nine significant digits round-trip float32 exactly
            row += [f"{v:.9g}" for v in rec.trace.samples]
            writer.writerow(row)
        text.flush()
        text.detach()

    _atomic_write(path, write)
    return n


def _rebuild_sequence(dt, n_samples, t_s, t_a, t_b, t_d) -> PulseSequence:
    """Reconstruct a sequence from markers alone.

    The readout window is inferred to open one equilibration time before
    t_a and to close at the end of the trace; a herald window, when t_s
    is present, is assumed to span from the start of the trace to one
    bin past t_s.
    """
    duration = n_samples * dt
    r0 = max(0.0, t_a - _EQUILIBRATION_FALLBACK_NS)
    herald = None
    ts_val: Optional[float] = None
    if t_s is not None and not math.isnan(t_s):
        herald = (0.0, min(t_s + dt, r0))
        ts_val = t_s
    seq = PulseSequence(
        readout_window=(r0, duration),
        t_a=t_a,
        t_b=t_b,
        t_d=t_d,
        herald_window=herald,
        t_s=ts_val,
    )
    seq.validate(dt)
    return seq


def import_traces(path: str) -> list[ExperimentRecord]:
    """Read records written by export_traces (either format)."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
        fh.seek(0)
        if head.startswith(b"#"):
            return _import_csv(io.TextIOWrapper(fh, encoding="utf-8", newline=""), path)
        return _import_binary(fh, path)


def _read_exact(fh, n, what, path):
    data = fh.read(n)
    if len(data) != n:
        raise TraceFormatError(
            f"{path}: truncated file while reading {what} "
            f"(offset {fh.tell() - len(data)})"
        )
    return data


def _import_binary(fh, path) -> list[ExperimentRecord]:
    raw = _read_exact(fh, _HEADER.size, "header", path)
    magic, version, dt, n_records, samples_per = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise TraceFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version not in (1, 2):
        raise TraceFormatError(f"{path}: unsupported format version {version}")
    records: list[ExperimentRecord] = []
    for i in range(n_records):
        fixed = _read_exact(fh, _REC_FIXED.size, f"record {i} markers", path)
        label_raw, t_s, t_a, t_b, t_d = _REC_FIXED.unpack(fixed)
        if label_raw not in (0, 1):
            raise TraceFormatError(f"{path}: record {i} has bad label {label_raw}")
        payload = _read_exact(fh, 4 * samples_per, f"record {i} samples", path)
        samples = np.frombuffer(payload, dtype="<f4").copy()
        truth = None
        if version == 2:
            th = _read_exact(fh, _TRUTH_HEAD.size, f"record {i} truth", path)
            initial_raw, n_trans = _TRUTH_HEAD.unpack(th)
            transitions = []
            for k in range(n_trans):
                tr = _read_exact(fh, _TRANSITION.size, f"record {i} transition {k}", path)
                t, s = _TRANSITION.unpack(tr)
                transitions.append((t, QubitState(s)))
            truth = StatePath(
                initial=QubitState(initial_raw),
                transitions=tuple(transitions),
                duration_ns=samples_per * dt,
            )
        seq = _rebuild_sequence(dt, samples_per, t_s, t_a, t_b, t_d)
        records.append(
            ExperimentRecord(
                sequence=seq,
                trace=HomodyneTrace(
                    sample_dt_ns=dt, samples=samples, readout_window=seq.readout_window
                ),
                truth=truth,
                prepared_label=QubitState(label_raw),
            )
        )
    trailing = fh.read(1)
    if trailing:
        raise TraceFormatError(f"{path}: trailing bytes after {n_records} records")
    return records


def _import_csv(text, path) -> list[ExperimentRecord]:
    first = text.readline()
    if not first.startswith("# qrl-traces v1"):
        raise TraceFormatError(f"{path}: missing qrl-traces header line")
    try:
        dt = float(first.rsplit("sample_dt_ns=", 1)[1])
    except (IndexError, ValueError):
        raise TraceFormatError(f"{path}: header line lacks sample_dt_ns") from None
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise TraceFormatError(f"{path}: missing column header") from None
    n_samples = len(header) - 6
    if n_samples < 0 or header[:6] != ["record", "label", "t_s_ns", "t_a_ns", "t_b_ns", "t_d_ns"]:
        raise TraceFormatError(f"{path}: unexpected column header")
    records: list[ExperimentRecord] = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(header):
            raise TraceFormatError(
                f"{path}: row {len(records)} has {len(row)} fields, expected {len(header)}"
            )
        label = QubitState.EXCITED if row[1] == "excited" else QubitState.GROUND
        t_s = float(row[2]) if row[2] else math.nan
        t_a, t_b, t_d = (float(x) for x in row[3:6])
        samples = np.asarray(row[6:], dtype=np.float64).astype(np.float32)
        seq = _rebuild_sequence(dt, n_samples, t_s, t_a, t_b, t_d)
        records.append(
            ExperimentRecord(
                sequence=seq,
                trace=HomodyneTrace(
                    sample_dt_ns=dt, samples=samples, readout_window=seq.readout_window
                ),
                truth=None,
                prepared_label=label,
            )
        )
    return records
