from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass
class Fold:
    fold_index: int
    train_ids: list[str]
    test_ids: list[str]
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def kfold_split(cell_ids, k: int = 5, seed: int = 0) -> list[Fold]:
    """Partition cells (never windows) into ``k`` shuffled test folds."""
    ids = list(cell_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate cell ids")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of cells ({len(ids)})")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for i, chunk in enumerate(np.array_split(order, k)):
        test = {int(c) for c in chunk}
        folds.append(
            Fold(
                fold_index=i,
                train_ids=[ids[c] for c in range(len(ids)) if c not in test],
                test_ids=[ids[c] for c in sorted(test)],
                seed=seed,
            )
        )
    return folds


def write_fold_file(fold: Fold, path) -> None:
    Path(path).write_text(json.dumps(fold.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_fold_file(path) -> Fold:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return Fold(int(d["fold_index"]), list(d["train_ids"]), list(d["test_ids"]), int(d["seed"]))
