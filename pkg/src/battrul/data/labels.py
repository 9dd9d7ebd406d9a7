"""Health-state and RUL-percentage labels."""

from __future__ import annotations

import math

import numpy as np

from battrul.data.cells import CellSeries, DataError

UNLABELED = -1
HEALTHY = 0
UNHEALTHY = 1


def _eol(cell) -> int:
    return cell.eol if isinstance(cell, CellSeries) else int(cell)


def label_hs(cell, p: float = 0.10) -> np.ndarray:
    """Per-cycle labels: first ``floor(EOL*p)`` cycles healthy, last
    ``floor(EOL*p)`` unhealthy, the rest :data:`UNLABELED`.

    Index ``k`` of the result is cycle ``k + 1``.
    """
    if not 0.0 < p < 0.5:
        raise ValueError(f"label fraction p must satisfy 0 < p < 0.5, got {p}")
    eol = _eol(cell)
    n = math.floor(eol * p)
    labels = np.full(eol, UNLABELED, dtype=np.int8)
    if n:
        labels[:n] = HEALTHY
        labels[eol - n:] = UNHEALTHY
    return labels


def label_rul(cell, fpc: int) -> np.ndarray:
    """RUL fraction ``(EOL - j) / (EOL - FPC)`` per cycle; NaN before ``fpc``."""
    eol = _eol(cell)
    fpc = int(fpc)
    if fpc >= eol:
        raise DataError(f"fpc {fpc} must be below eol {eol}")
    if fpc < 1:
        raise DataError(f"fpc {fpc} must be a cycle number >= 1")
    j = np.arange(1, eol + 1, dtype=np.float64)
    y = (eol - j) / float(eol - fpc)
    y[: fpc - 1] = np.nan
    return y
