"""Output helpers: JSON and CSV with 17-significant-digit floats and a header block."""

from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DIGITS = 17


def fmt_float(x: float) -> str:
    return format(float(x), f".{DIGITS}g")


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def json_text(obj, indent: int | None = None) -> str:
    """JSON with every float written at 17 significant digits; NaN and infinities become null."""
    obj = _plain(obj)

    def enc(o, level):
        pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
        end = "" if indent is None else "\n" + " " * (indent * level)
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, int):
            return str(o)
        if isinstance(o, float):
            return fmt_float(o) if math.isfinite(o) else "null"
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, dict):
            if not o:
                return "{}"
            colon = ": " if indent is not None else ":"
            items = [json.dumps(k) + colon + enc(v, level + 1) for k, v in o.items()]
            return "{" + pad + ("," + pad).join(items) + end + "}"
        if isinstance(o, list):
            if not o:
                return "[]"
            return "[" + pad + ("," + pad).join(enc(v, level + 1) for v in o) + end + "]"
        raise TypeError(f"cannot encode {type(o).__name__}")

    return enc(obj, 0)


def header_lines(header: Mapping) -> list[str]:
    return ["# " + line for line in json_text(header, indent=1).splitlines()]


def csv_text(columns: Sequence[str], rows: Iterable[Sequence], header: Mapping | None = None) -> str:
    buf = _io.StringIO()
    if header is not None:
        buf.write("\n".join(header_lines(header)) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, columns, rows, header=None) -> Path:
    path = Path(path)
    path.write_text(csv_text(columns, rows, header))
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json_text(obj, indent=2) + "\n")
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    """Columns and rows of a CSV written by write_csv (header comments skipped)."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]
