"""CSV and manifest writers.

Every CSV opens with ``# key=value`` lines (``seed``, ``scenario`` and
``h`` first), then one header row and rectangular numeric rows printed
with 17 significant digits so they parse back to the same doubles.
"""

from __future__ import annotations

import json
import os
from typing import Iterable, Sequence

import numpy as np

HEADER_KEYS = ("seed", "scenario", "h")


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header: dict, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise ValueError(f"CSV header lacks required keys {missing}")
    keys = list(HEADER_KEYS) + [k for k in header if k not in HEADER_KEYS]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in keys:
            fh.write(f"# {k}={header[k]}\n")
        fh.write(",".join(columns) + "\n")
        width = len(columns)
        for row in rows:
            if len(row) != width:
                raise ValueError(f"row has {len(row)} fields, expected {width}")
            fh.write(",".join(format_value(v) for v in row) + "\n")


def read_csv(path) -> tuple[dict, list[str], np.ndarray]:
    """Parse a file written by :func:`write_csv` into (header, columns, data)."""
    header: dict = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines) and lines[i].startswith("# "):
        key, _, val = lines[i][2:].partition("=")
        header[key] = val
        i += 1
    columns = lines[i].split(",")
    body = [[float(v) for v in ln.split(",")] for ln in lines[i + 1:] if ln]
    data = np.array(body, dtype=float).reshape(len(body), len(columns))
    return header, columns, data


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
