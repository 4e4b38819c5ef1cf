"""Deterministic JSON and CSV output with 17 significant digits."""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

import numpy as np

_MARK = "\x00"
_MARKED = re.compile(r'"\\u0000([^"\\]*)\\u0000"')


def fmt(v) -> str:
    """Render a number with 17 significant digits; non-finite values as empty."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    v = float(v)
    if not math.isfinite(v):
        return ""
    return format(v, ".17g")


def _prepare(obj):
    if isinstance(obj, dict):
        return {str(k): _prepare(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_prepare(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_prepare(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return f"{_MARK}{format(v, '.17g')}{_MARK}" if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    """JSON text with sorted keys, two-space indent and 17-digit floats."""
    text = json.dumps(_prepare(obj), indent=2, sort_keys=True, ensure_ascii=False)
    return _MARKED.sub(r"\1", text) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) for c in r])
