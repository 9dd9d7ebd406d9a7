from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-8


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    feature_names: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            np.asarray(d["mean"], dtype=np.float64),
            np.asarray(d["std"], dtype=np.float64),
            tuple(d.get("feature_names", ())),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, s: str) -> "NormStats":
        return cls.from_dict(json.loads(s))


def fit_norm(cells) -> NormStats:
    """Per-feature z-score statistics over every cycle of ``cells``.

    Pass training-fold cells only.
    """
    cells = list(cells)
    if not cells:
        raise ValueError("fit_norm needs at least one cell")
    stacked = np.concatenate([c.features for c in cells], axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return NormStats(stacked.mean(axis=0), std, tuple(cells[0].feature_names))


def apply_norm(stats: NormStats, values: np.ndarray) -> np.ndarray:
    """Normalize ``(..., n_f)`` arrays of raw features. Pure."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"expected {stats.mean.shape[0]} features, got {values.shape[-1]}")
    return (values - stats.mean) / stats.std
