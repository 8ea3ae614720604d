"""Canonical serialization and dataset ingestion.

JSON payloads are emitted in a canonical byte form so identical runs produce
identical files: UTF-8, keys sorted, floats rendered with 17 significant
digits (enough to round-trip a double), no NaN/Inf.  CSV files are an
RFC-4180 subset: comma-separated, "." decimal point, UTF-8, CRLF or LF
accepted on input.
"""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .errors import ContractViolationError, DomainError
from .losses import DataSet

__all__ = ["canon_json", "load_dataset_csv", "write_csv"]


def _canon_number(x: float) -> str:
    if isinstance(x, bool):  # bool is an int subclass; keep JSON booleans
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    xf = float(x)
    if not np.isfinite(xf):
        raise DomainError("cannot serialize non-finite float to JSON")
    s = format(xf, ".17g")
    return s


def _canon_emit(obj, out: list):
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, float, np.integer, np.floating)):
        out.append(_canon_number(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _canon_emit(v, out)
        out.append("]")
    elif isinstance(obj, np.ndarray):
        _canon_emit(obj.tolist(), out)
    elif isinstance(obj, dict):
        out.append("{")
        for i, k in enumerate(sorted(obj)):
            if not isinstance(k, str):
                raise ContractViolationError("JSON object keys must be strings")
            if i:
                out.append(",")
            out.append(json.dumps(k, ensure_ascii=False))
            out.append(":")
            _canon_emit(obj[k], out)
        out.append("}")
    else:
        raise ContractViolationError(f"cannot serialize type {type(obj).__name__}")


def canon_json(obj) -> str:
    """Canonical JSON text (sorted keys, .17g floats, no whitespace)."""
    out: list[str] = []
    _canon_emit(obj, out)
    return "".join(out)


def load_dataset_csv(path, split_index: int | None = None, header: bool = False) -> DataSet:
    """Read a rectangular numeric CSV into a DataSet.

    Raises a parse error naming the offending line (and column for a bad
    cell).  CRLF and LF files parse identically.
    """
    rows = []
    width = None
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and header:
                width = len(row)
                continue
            if not row:
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DomainError(
                    f"{path}: line {lineno}: expected {width} columns, found {len(row)}"
                )
            parsed = []
            for col, cell in enumerate(row, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DomainError(
                        f"{path}: line {lineno}, column {col}: non-numeric cell {cell!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise DomainError(f"{path}: no data rows")
    return DataSet(np.asarray(rows, dtype=float), split_index=split_index)


def write_csv(path, header: list, rows: list):
    """Write rows (lists of numbers/strings) with a header line."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(
            [_canon_number(v) if isinstance(v, (int, float, np.integer, np.floating)) else v
             for v in row]
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
