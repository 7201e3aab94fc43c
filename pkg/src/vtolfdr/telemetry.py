"""CSV telemetry tables.

A table is an ordered ``dict`` mapping column name to a 1-D float array.
Floats are written with ``repr`` so a write/read cycle is bit-exact.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping

import numpy as np

Table = dict[str, np.ndarray]


class TelemetryParseError(ValueError):
    """Raised when a telemetry CSV cannot be parsed."""


def _parse_cell(text: str, row: int, column: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise TelemetryParseError(f"row {row}, column {column!r}: not a number: {text!r}") from None


def read_csv(path: str | Path) -> Table:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return {}
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise TelemetryParseError(f"{path}: duplicate column names in header")
        cols: list[list[float]] = [[] for _ in header]
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TelemetryParseError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
            for j, cell in enumerate(row):
                cols[j].append(_parse_cell(cell, i, header[j]))
    return {name: np.asarray(values, dtype=float) for name, values in zip(header, cols)}


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    return repr(float(value))


def write_csv(path: str | Path, table: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(table)
    columns = [np.asarray(table[n]) for n in names]
    length = len(columns[0]) if columns else 0
    if any(len(c) != length for c in columns):
        raise ValueError("all columns must have the same length")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for i in range(length):
            writer.writerow([_fmt(c[i]) for c in columns])
    return path


def table_length(table: Mapping[str, np.ndarray]) -> int:
    for col in table.values():
        return len(col)
    return 0
