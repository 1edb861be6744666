"""Plain-text dataset files: contrasts, measurements and traces.

Reals are written with 17 significant digits, which round-trips every
double exactly.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .errors import ParseError
from .inversion import TRACE_COLUMNS, InversionTrace, TraceRow
from .model import MeasurementSet

_FMT = "%.17g"
_INT_COLUMNS = {"iter", "op_count"}


def _fmt(v) -> str:
    return _FMT % v


def _pair(z) -> str:
    return f"{_fmt(z.real)} {_fmt(z.imag)}"


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def _parse_header(line, keyword, keys, lineno=1):
    parts = line.split()
    if not parts or parts[0] != keyword:
        raise ParseError(f"expected a '{keyword}' header, got {line!r}", lineno)
    fields = parts[1:]
    if len(fields) != 2 * len(keys) or fields[::2] != list(keys):
        raise ParseError(f"header must read '{keyword} " + " ".join(f"{k} <{k}>" for k in keys) + "'", lineno)
    return dict(zip(fields[::2], fields[1::2]))


def _parse_complex(lines, start, count, path):
    out = np.empty(count, dtype=complex)
    for j in range(count):
        lineno = start + j + 1
        if start + j >= len(lines):
            raise ParseError(f"{path}: file ends early, expected {count - j} more value line(s)", lineno)
        parts = lines[start + j].split()
        if len(parts) != 2:
            raise ParseError(f"expected 're im', got {lines[start + j]!r}", lineno)
        try:
            out[j] = complex(float(parts[0]), float(parts[1]))
        except ValueError:
            raise ParseError(f"not a number pair: {lines[start + j]!r}", lineno) from None
    return out


def _check_tail(lines, used):
    for j in range(used, len(lines)):
        if lines[j].strip():
            raise ParseError("unexpected trailing content", j + 1)


def _int(text, name, lineno):
    try:
        v = int(text)
    except ValueError:
        raise ParseError(f"{name} must be an integer, got {text!r}", lineno) from None
    if v < 1:
        raise ParseError(f"{name} must be positive", lineno)
    return v


def write_contrast(path, x) -> None:
    x = np.asarray(x, dtype=complex).ravel()
    ns = math.isqrt(x.size)
    if ns * ns != x.size:
        raise ValueError(f"contrast of length {x.size} is not a square grid")
    lines = [f"contrast n_side {ns}"] + [_pair(z) for z in x]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_contrast(path) -> np.ndarray:
    lines = _read_lines(path)
    if not lines:
        raise ParseError("empty file", 1)
    ns = _int(_parse_header(lines[0], "contrast", ["n_side"])["n_side"], "n_side", 1)
    x = _parse_complex(lines, 1, ns * ns, path)
    _check_tail(lines, 1 + ns * ns)
    return x


def write_measurements(path, m: MeasurementSet, frequency=None) -> None:
    M, N = m.data.shape
    freq = frequency if frequency is not None else m.frequency
    if freq is None:
        raise ValueError("measurement file needs a frequency")
    lines = [f"measurements M {M} N {N} freq_hz {_fmt(freq)} snr_db {_fmt(m.snr_db)}"]
    lines += [_pair(z) for z in m.data.ravel()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_measurements(path) -> MeasurementSet:
    lines = _read_lines(path)
    if not lines:
        raise ParseError("empty file", 1)
    h = _parse_header(lines[0], "measurements", ["M", "N", "freq_hz", "snr_db"])
    M, N = _int(h["M"], "M", 1), _int(h["N"], "N", 1)
    try:
        freq, snr = float(h["freq_hz"]), float(h["snr_db"])
    except ValueError:
        raise ParseError("freq_hz and snr_db must be numbers", 1) from None
    data = _parse_complex(lines, 1, M * N, path).reshape(M, N)
    _check_tail(lines, 1 + M * N)
    return MeasurementSet(data, snr_db=snr, frequency=freq)


def write_trace(path, trace: InversionTrace) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace.rows:
            vals = [getattr(row, "lam" if c == "lambda" else c) for c in TRACE_COLUMNS]
            w.writerow([str(int(v)) if c in _INT_COLUMNS else _fmt(v) for c, v in zip(TRACE_COLUMNS, vals)])


def read_trace(path) -> InversionTrace:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRACE_COLUMNS:
        raise ParseError("trace header must be " + ",".join(TRACE_COLUMNS), 1)
    trace = InversionTrace()
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(TRACE_COLUMNS):
            raise ParseError(f"expected {len(TRACE_COLUMNS)} fields, got {len(r)}", lineno)
        try:
            vals = [int(v) if c in _INT_COLUMNS else float(v) for c, v in zip(TRACE_COLUMNS, r)]
        except ValueError:
            raise ParseError(f"bad number in {r!r}", lineno) from None
        trace.rows.append(TraceRow(*vals))
    return trace
