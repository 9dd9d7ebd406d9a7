from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from battrul.data.cells import CellSeries, DataError
from battrul.data.labels import UNLABELED
from battrul.data.norm import NormStats, apply_norm


@dataclass
class WindowSample:
    cell_id: str
    end_cycle: int
    matrix: np.ndarray  # (n_f, n_w), columns are cycles end_cycle-n_w+1 .. end_cycle
    hs_label: int | None = None
    rul_label: float | None = None


def window_ends(eol: int, n_w: int, step: int = 1, start: int | None = None) -> np.ndarray:
    first = n_w if start is None else max(n_w, int(start))
    return np.arange(first, eol + 1, step, dtype=np.int64)


def window_array(features: np.ndarray, n_w: int, ends) -> np.ndarray:
    """Stack ``(N, n_f, n_w)`` windows ending at the 1-based cycles ``ends``."""
    view = np.lib.stride_tricks.sliding_window_view(features, n_w, axis=0)
    return np.ascontiguousarray(view[np.asarray(ends) - n_w])


def make_windows(
    cell: CellSeries,
    n_w: int = 50,
    step: int = 1,
    norm: NormStats | None = None,
    hs_labels: np.ndarray | None = None,
    rul_labels: np.ndarray | None = None,
) -> list[WindowSample]:
    """One window per end cycle ``j`` in ``[n_w, eol]``; labels come from cycle ``j``."""
    if cell.eol < n_w:
        raise DataError(f"cell {cell.cell_id}: eol {cell.eol} shorter than window {n_w}")
    if step < 1:
        raise ValueError("step must be >= 1")
    feats = apply_norm(norm, cell.features) if norm is not None else cell.features
    ends = window_ends(cell.eol, n_w, step)
    mats = window_array(feats, n_w, ends)
    out = []
    for j, m in zip(ends, mats):
        hs = None
        if hs_labels is not None and hs_labels[j - 1] != UNLABELED:
            hs = int(hs_labels[j - 1])
        rul = None
        if rul_labels is not None and not np.isnan(rul_labels[j - 1]):
            rul = float(rul_labels[j - 1])
        out.append(WindowSample(cell.cell_id, int(j), m, hs, rul))
    return out
