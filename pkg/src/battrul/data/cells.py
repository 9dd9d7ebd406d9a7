"""Per-cell cycle records and the CSV / manifest interchange formats."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MIT7 = "MIT7"
HUST5 = "HUST5"
SYNTH = "SYNTH"

MIT7_COLUMNS = (
    "discharge_capacity",
    "internal_resistance",
    "charge_capacity",
    "temp_avg",
    "temp_min",
    "temp_max",
    "charge_time",
)
HUST_BASE_COLUMNS = ("charge_voltage", "discharge_capacity", "charge_capacity")
HUST5_COLUMNS = HUST_BASE_COLUMNS + ("delta_charge_voltage_10", "delta_charge_capacity_10")

# synthetic cells carry the MIT channel set
SCHEMA_COLUMNS = {MIT7: MIT7_COLUMNS, HUST5: HUST5_COLUMNS, SYNTH: MIT7_COLUMNS}

MANIFEST_FORMAT = "battrul-manifest"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, path, message: str, row: int | None = None):
        self.path = str(path)
        self.row = row
        where = f"{path}" if row is None else f"{path}, row {row}"
        super().__init__(f"{where}: {message}")


@dataclass
class CellSeries:
    cell_id: str
    schema: str
    features: np.ndarray  # (n_cycles, n_f); row k is cycle k + 1
    feature_names: tuple[str, ...]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise DataError(f"cell {self.cell_id}: needs a non-empty (cycles, features) array")
        if self.features.shape[1] != len(self.feature_names):
            raise DataError(
                f"cell {self.cell_id}: {self.features.shape[1]} values per cycle "
                f"but {len(self.feature_names)} feature names"
            )

    @property
    def eol(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def column(self, name: str) -> np.ndarray:
        try:
            return self.features[:, self.feature_names.index(name)]
        except ValueError:
            raise DataError(f"cell {self.cell_id} has no feature {name!r}") from None


def _required_columns(schema: str) -> tuple[str, ...]:
    if schema == HUST5:
        return HUST_BASE_COLUMNS
    if schema in SCHEMA_COLUMNS:
        return SCHEMA_COLUMNS[schema]
    raise DataError(f"unknown schema {schema!r}; expected one of {sorted(SCHEMA_COLUMNS)}")


def load_cell_csv(path, schema: str, cell_id: str | None = None) -> CellSeries:
    """Read one cell. HUST files need only the base columns; the two
    difference features are derived with :func:`build_hust_features`."""
    path = Path(path)
    required = _required_columns(schema)
    if not path.exists():
        raise ParseError(path, "file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(path, "empty file", row=1) from None
        if "cycle" not in header:
            raise ParseError(path, "missing column 'cycle'", row=1)
        for col in required:
            if col not in header:
                raise ParseError(path, f"missing column {col!r}", row=1)
        idx = [header.index(c) for c in required]
        cidx = header.index("cycle")
        rows = []
        expected = 1
        for rowno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(path, f"expected {len(header)} fields, got {len(rec)}", row=rowno)
            try:
                cyc = float(rec[cidx])
            except ValueError:
                raise ParseError(path, f"non-numeric cycle {rec[cidx]!r}", row=rowno) from None
            if cyc != int(cyc):
                raise ParseError(path, f"non-integer cycle {rec[cidx]!r}", row=rowno)
            if int(cyc) != expected:
                if int(cyc) > expected:
                    raise ParseError(path, f"gap at cycle {expected}", row=rowno)
                raise ParseError(path, f"cycle index not increasing at {int(cyc)}", row=rowno)
            expected += 1
            vals = []
            for col, k in zip(required, idx):
                try:
                    v = float(rec[k])
                except ValueError:
                    raise ParseError(path, f"non-numeric value {rec[k]!r} in column {col!r}", row=rowno) from None
                if not math.isfinite(v):
                    raise ParseError(path, f"non-finite value in column {col!r}", row=rowno)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError(path, "no cycle rows")
    cid = cell_id if cell_id is not None else path.stem
    if schema == HUST5:
        return build_hust_features(CellSeries(cid, HUST5, np.array(rows), HUST_BASE_COLUMNS))
    return CellSeries(cid, schema, np.array(rows), required)


def write_cell_csv(cell: CellSeries, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cycle",) + tuple(cell.feature_names))
        for k, row in enumerate(cell.features, start=1):
            w.writerow([k] + [repr(float(v)) for v in row])


def build_hust_features(cell: CellSeries) -> CellSeries:
    """Append the charge-voltage and charge-capacity differences to cycle 10."""
    if cell.eol < 10:
        raise DataError(f"cell {cell.cell_id}: {cell.eol} cycles, need at least 10 for HUST features")
    base = np.column_stack([cell.column(c) for c in HUST_BASE_COLUMNS])
    dv = base[:, 0] - base[9, 0]
    dq = base[:, 2] - base[9, 2]
    return CellSeries(cell.cell_id, HUST5, np.column_stack([base, dv, dq]), HUST5_COLUMNS)


@dataclass
class ManifestEntry:
    cell_id: str
    path: str
    schema: str


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path}: invalid JSON ({exc})") from exc
    items = doc["cells"] if isinstance(doc, dict) else doc
    out = []
    for k, item in enumerate(items):
        try:
            entry = ManifestEntry(str(item["cell_id"]), str(item["path"]), str(item["schema"]))
        except (KeyError, TypeError):
            raise DataError(f"manifest {path}: entry {k} needs cell_id, path, schema") from None
        p = Path(entry.path)
        if not p.is_absolute():
            entry.path = str(path.parent / p)
        out.append(entry)
    ids = [e.cell_id for e in out]
    if len(set(ids)) != len(ids):
        raise DataError(f"manifest {path}: duplicate cell_id")
    return out


def write_manifest(entries: list[ManifestEntry], path) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "cells": [{"cell_id": e.cell_id, "path": e.path, "schema": e.schema} for e in entries],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest_cells(path) -> list[CellSeries]:
    return [load_cell_csv(e.path, e.schema, cell_id=e.cell_id) for e in read_manifest(path)]
