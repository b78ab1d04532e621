"""File formats: binary/CSV time traces, spectrum CSV, fit JSON, result tables."""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .dynamics import TimeTrace

MAGIC = b"LEVICAV1"


def _g9(x) -> str:
    return format(float(x), ".9g")


def write_trace(path, trace: TimeTrace) -> None:
    """Binary trace: magic, uint32 header length, JSON header, column-major float64 data."""
    header = json.dumps({
        "labels": list(trace.labels),
        "dt": trace.dt,
        "seed": trace.seed,
        "t0": trace.t0,
        "n_samples": trace.n_samples,
        "dtype": "<f8",
        "order": "F",
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.asfortranarray(trace.samples, dtype="<f8").tobytes(order="F"))


def read_trace(path) -> TimeTrace:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            if path.suffix.lower() == ".csv":
                return read_trace_csv(path)
            raise ValueError(f"{path}: not a trace file (bad magic {magic!r})")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        data = np.frombuffer(fh.read(), dtype=header["dtype"])
    shape = (header["n_samples"], len(header["labels"]))
    if data.size != shape[0] * shape[1]:
        raise ValueError(f"{path}: truncated data ({data.size} values, expected {shape[0] * shape[1]})")
    samples = data.reshape(shape, order="F").astype(float)
    return TimeTrace(header["dt"], header["labels"], samples, header["seed"], header.get("t0", 0.0))


def write_trace_csv(path, trace: TimeTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", *trace.labels])
        for t, row in zip(trace.times, trace.samples):
            w.writerow([_g9(t), *map(_g9, row)])


def read_trace_csv(path) -> TimeTrace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    data = np.array(rows[1:], dtype=float)
    t = data[:, 0]
    dt = float(np.mean(np.diff(t)))
    return TimeTrace(dt, labels, data[:, 1:], None, float(t[0] - dt))


def write_spectrum_csv(path, spectrum) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frequency_hz", "psd"])
        for f, p in zip(spectrum.freqs, spectrum.psd):
            w.writerow([_g9(f), _g9(p)])


def write_fit_json(path, fit) -> None:
    Path(path).write_text(json.dumps(fit.as_dict(), indent=2, sort_keys=True) + "\n")


def write_table(path, columns, rows) -> None:
    """CSV with a header row; floats at 9 significant digits, None as empty."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if v is None else (_g9(v) if isinstance(v, (float, np.floating)) else v)
                    for v in row])
    Path(path).write_text(buf.getvalue())


def read_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
