"""Cross-validated experiment runner: stage 1 -> FPC -> stage 2 per fold."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from battrul.data.cells import CellSeries, DataError, load_manifest_cells, read_manifest
from battrul.data.folds import Fold, kfold_split, write_fold_file
from battrul.data.labels import label_hs, label_rul
from battrul.data.norm import NormStats, apply_norm, fit_norm
from battrul.data.windows import window_array, window_ends
from battrul.hs import (
    HsClassifier,
    HsConfig,
    TriggerConfig,
    detect_fpc,
    fpc_capacity_pct,
    hs_training_set,
    save_hs,
    train_hs,
)
from battrul.stman import MAPE_LABEL_FLOOR, StManConfig, StManModel, estimate_flops, rul_to_cycles, save_stman, train_rul
from battrul.training import TrainConfig, batched_predict

log = logging.getLogger(__name__)

REPORT_FORMAT = "battrul-report"
REPORT_SCHEMA_VERSION = 1
FPC_REPORT_FORMAT = "battrul-fpc-report"
MAPE_EXCLUDE_BELOW = 0.01


class ConfigError(ValueError):
    """A config document failed validation; ``path`` is the dotted field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class LeakageError(AssertionError):
    pass


# ---------------------------------------------------------------------------
# metrics


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("metric of an empty vector")
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    return p, y


def metric_mae(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(np.abs(p - y)))


def metric_mse(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean((p - y) ** 2))


def metric_mape(preds, labels, exclude_below: float = MAPE_EXCLUDE_BELOW) -> float:
    """Mean absolute percentage error in percent, skipping labels below ``exclude_below``."""
    p, y = _pair(preds, labels)
    keep = y >= exclude_below
    if not keep.any():
        raise ValueError(f"no labels >= {exclude_below} left for MAPE")
    return float(100.0 * np.mean(np.abs(p[keep] - y[keep]) / y[keep]))


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    manifest: str = ""
    schema: str | None = None
    knees: str | None = None
    n_w: int = 50
    step: int = 1
    hs_train_step: int = 1
    rul_train_step: int = 1
    rul_mape_floor: float = MAPE_LABEL_FLOOR
    p: float = 0.10
    k: int = 5
    seed: int = 0
    val_fraction: float = 0.10
    folds: list[int] | None = None
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    hs: HsConfig = field(default_factory=HsConfig)
    stman: StManConfig = field(default_factory=StManConfig)
    hs_train: TrainConfig = field(default_factory=TrainConfig)
    rul_train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        checks = [
            ("n_w", self.n_w >= 1, "must be >= 1"),
            ("step", self.step >= 1, "must be >= 1"),
            ("hs_train_step", self.hs_train_step >= 1, "must be >= 1"),
            ("rul_train_step", self.rul_train_step >= 1, "must be >= 1"),
            ("rul_mape_floor", self.rul_mape_floor > 0, "must be > 0"),
            ("p", 0.0 < self.p < 0.5, "must be in (0, 0.5)"),
            ("k", self.k >= 2, "must be >= 2"),
            ("val_fraction", 0.0 <= self.val_fraction < 1.0, "must be in [0, 1)"),
        ]
        for stage in ("hs_train", "rul_train"):
            tc = getattr(self, stage)
            checks += [
                (f"{stage}.lr", tc.lr > 0, "must be > 0"),
                (f"{stage}.batch_size", tc.batch_size >= 1, "must be >= 1"),
                (f"{stage}.epochs", tc.epochs >= 1, "must be >= 1"),
                (f"{stage}.patience", tc.patience >= 1, "must be >= 1"),
            ]
        for path, ok, msg in checks:
            if not ok:
                raise ConfigError(path, msg)

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(data: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from a JSON-like mapping layered over ``base``.

    Unknown keys and wrongly typed values raise :class:`ConfigError` naming
    the dotted path of the offending field.
    """
    merged = _deep_merge(asdict(base or ExperimentConfig()), data, "")
    return _build(ExperimentConfig, merged, "")


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("", f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("", f"{path}: top level must be an object")
    doc.pop("format", None)
    doc.pop("schema_version", None)
    cfg = config_from_dict(doc)
    if doc.get("manifest") and not Path(cfg.manifest).is_absolute():
        cfg.manifest = str(path.parent / cfg.manifest)
    if doc.get("knees") and not Path(cfg.knees).is_absolute():
        cfg.knees = str(path.parent / cfg.knees)
    if overrides:
        cfg = config_from_dict(overrides, cfg)
    return cfg


def _deep_merge(base: dict, new: dict, path: str) -> dict:
    if not isinstance(new, dict):
        raise ConfigError(path, f"expected an object, got {type(new).__name__}")
    out = dict(base)
    for key, val in new.items():
        sub = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(sub, "unknown field")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _deep_merge(out[key], val, sub)
        else:
            out[key] = val
    return out


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        kwargs[f.name] = _coerce(hints[f.name], data[f.name], sub)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}.{exc.path}" if path else exc.path, str(exc).split(": ", 1)[-1]) from None
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(inner, value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, np.number)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldArtifacts:
    """In-memory products of one fold, alongside the JSON fragment."""

    report: dict
    hs_model: HsClassifier
    rul_model: StManModel
    norm: NormStats
    predictions: list[dict]


def _check_disjoint(stage: str, used: set[str], test: set[str], fold: int) -> dict:
    overlap = sorted(used & test)
    if overlap:
        raise LeakageError(f"fold {fold}: test cells {overlap} used in stage '{stage}'")
    return {"n_cells": len(used), "disjoint_from_test": True}


def split_validation(train_ids: list[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    if fraction <= 0 or len(train_ids) < 3:
        return list(train_ids), []
    n_val = max(1, int(round(fraction * len(train_ids))))
    pick = set(np.random.default_rng(seed).choice(len(train_ids), size=n_val, replace=False).tolist())
    fit_ids = [c for i, c in enumerate(train_ids) if i not in pick]
    val_ids = [c for i, c in enumerate(train_ids) if i in pick]
    return fit_ids, val_ids


def _rul_set(cells, fpcs: dict, norm: NormStats, n_w: int, step: int):
    """Post-FPC windows with their RUL labels, plus ``(cell_id, cycle)`` per row."""
    Xs, ys, keys = [], [], []
    for cell in cells:
        fpc = fpcs.get(cell.cell_id)
        if fpc is None or fpc >= cell.eol:
            continue
        ends = window_ends(cell.eol, n_w, step, start=fpc)
        labels = label_rul(cell, fpc)
        Xs.append(window_array(apply_norm(norm, cell.features), n_w, ends))
        ys.append(labels[ends - 1])
        keys += [(cell.cell_id, int(j), fpc) for j in ends]
    if not Xs:
        n_f = cells[0].n_features if cells else 0
        return np.zeros((0, n_f, n_w)), np.zeros(0), []
    return np.concatenate(Xs), np.concatenate(ys), keys


def _hs_accuracy(model, norm, cells, p, n_w):
    correct = total = 0
    for cell in cells:
        labels = label_hs(cell, p)
        ends = window_ends(cell.eol, n_w)
        ends = ends[labels[ends - 1] >= 0]
        if len(ends) == 0:
            continue
        probs = batched_predict(model, window_array(apply_norm(norm, cell.features), n_w, ends))
        correct += int(np.sum((probs >= 0.5) == (labels[ends - 1] == 1)))
        total += len(ends)
    return (correct / total if total else None), total


def train_stage1(config: ExperimentConfig, fit_cells, val_cells, norm: NormStats, seed: int):
    """Fit the health-state classifier on head/tail windows of ``fit_cells``."""
    labels = {c.cell_id: label_hs(c, config.p) for c in list(fit_cells) + list(val_cells)}
    X, y = hs_training_set(fit_cells, labels, norm, config.n_w, config.hs_train_step)
    Xv = yv = None
    if val_cells:
        Xv, yv = hs_training_set(val_cells, labels, norm, config.n_w, config.hs_train_step)
    model = HsClassifier(fit_cells[0].n_features, config.n_w, config.hs, seed=seed)
    history = train_hs(model, X, y, dataclasses.replace(config.hs_train, seed=seed), Xv, yv)
    return model, history, int(len(y))


def fpc_table(model: HsClassifier, norm: NormStats, cells, trigger: TriggerConfig,
              split: dict[str, str] | None = None, knees: dict[str, int] | None = None):
    """FPC of every cell from the trained classifier: ``({cell_id: fpc | None}, rows)``."""
    fpcs: dict[str, int | None] = {}
    rows = []
    for cell in cells:
        res, _, _ = detect_fpc(model, norm, cell, trigger)
        fpc = None if res is None else res.fpc_cycle
        fpcs[cell.cell_id] = fpc
        row = {
            "cell_id": cell.cell_id,
            "split": (split or {}).get(cell.cell_id, "all"),
            "eol": cell.eol,
            "triggered": res is not None,
            "fpc_cycle": fpc,
            "fpc_capacity_pct": None if fpc is None else fpc_capacity_pct(cell, fpc),
            "trigger_cycles": None if res is None else res.trigger_cycles,
        }
        if knees and cell.cell_id in knees:
            row["knee_cycle"] = int(knees[cell.cell_id])
            row["fpc_knee_offset_frac"] = None if fpc is None else (fpc - knees[cell.cell_id]) / cell.eol
        rows.append(row)
    return fpcs, rows


def write_fpc_report(path, rows: list[dict]) -> None:
    doc = {"format": FPC_REPORT_FORMAT, "version": 1, "cells": rows}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def train_stage2(config: ExperimentConfig, fit_cells, val_cells, fpcs: dict, norm: NormStats, seed: int):
    """Fit ST-MAN on post-FPC windows of ``fit_cells`` (cells without an FPC contribute nothing)."""
    X, y, _ = _rul_set(fit_cells, fpcs, norm, config.n_w, config.rul_train_step)
    Xv, yv, _ = _rul_set(val_cells, fpcs, norm, config.n_w, config.rul_train_step)
    n_f = (list(fit_cells) + list(val_cells))[0].n_features
    model = StManModel(n_f, config.n_w, config.stman, seed=seed)
    history = train_rul(model, X, y, dataclasses.replace(config.rul_train, seed=seed),
                        Xv if len(yv) else None, yv if len(yv) else None, config.rul_mape_floor)
    return model, history, int(len(y))


def predict_cells(model: StManModel, norm: NormStats, cells, fpcs: dict, step: int = 1):
    """Prediction rows for every post-FPC window, plus the raw prediction/label vectors."""
    eol = {c.cell_id: c.eol for c in cells}
    X, y, keys = _rul_set(cells, fpcs, norm, model.n_w, step)
    preds = batched_predict(model, X) if len(y) else np.zeros(0)
    rows = []
    for (cid, j, fpc), pr, lab in zip(keys, preds, y):
        rows.append({
            "cell_id": cid,
            "cycle": j,
            "fpc_cycle": fpc,
            "rul_pct_pred": float(pr),
            "rul_pct_label": float(lab),
            "remaining_cycles_pred": rul_to_cycles(float(pr), j, fpc) if j > fpc and pr < 1 else math.nan,
            "remaining_cycles_true": eol[cid] - j,
        })
    return rows, preds, y


def run_fold(config: ExperimentConfig, fold: Fold, cells: list[CellSeries], out_dir,
             knees: dict[str, int] | None = None) -> FoldArtifacts:
    """Train both stages on the fold's training cells and evaluate its test cells.

    Every stage records which cells it touched; any overlap with the test
    cells raises :class:`LeakageError` before training proceeds.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {c.cell_id: c for c in cells}
    missing = [c for c in fold.train_ids + fold.test_ids if c not in by_id]
    if missing:
        raise DataError(f"fold {fold.fold_index}: unknown cell ids {missing}")
    test_set = set(fold.test_ids)
    seed = config.seed * 1000 + fold.fold_index
    fit_ids, val_ids = split_validation(fold.train_ids, config.val_fraction, seed)
    fit_cells = [by_id[c] for c in fit_ids]
    val_cells = [by_id[c] for c in val_ids]
    train_cells = [by_id[c] for c in fold.train_ids]
    test_cells = [by_id[c] for c in fold.test_ids]
    write_fold_file(fold, out / "fold.json")
    leakage = {}

    def guard(stage, used):
        leakage[stage] = _check_disjoint(stage, set(used), test_set, fold.fold_index)

    guard("norm", fit_ids)
    norm = fit_norm(fit_cells)

    guard("hs_train", fit_ids)
    guard("hs_val", val_ids)
    hs_model, hs_hist, hs_n_train = train_stage1(config, fit_cells, val_cells, norm, seed)
    hs_acc, hs_n = _hs_accuracy(hs_model, norm, test_cells, config.p, config.n_w)

    split = {c: ("test" if c in test_set else "train") for c in by_id}
    fpcs, fpc_rows = fpc_table(hs_model, norm, train_cells + test_cells, config.trigger, split, knees)
    write_fpc_report(out / "fpc-report.json", fpc_rows)

    guard("rul_train", fit_ids)
    guard("rul_val", val_ids)
    rul_model, rul_hist, rul_n_train = train_stage2(config, fit_cells, val_cells, fpcs, norm, seed)

    rows, preds, labels = predict_cells(rul_model, norm, test_cells, fpcs, config.step)
    write_predictions(out / "predictions.csv", rows)
    metrics = evaluate_predictions(preds, labels)

    save_hs(out / "hs.npz", hs_model, norm, cells[0].schema, {"fold_index": fold.fold_index})
    save_stman(out / "stman.npz", rul_model, norm, cells[0].schema, {"fold_index": fold.fold_index})
    (out / "history.json").write_text(json.dumps({"hs": hs_hist, "rul": rul_hist}, indent=2) + "\n",
                                      encoding="utf-8")

    test_rows = [r for r in fpc_rows if r["split"] == "test"]
    report = {
        "fold_index": fold.fold_index,
        "train_ids": list(fold.train_ids),
        "val_ids": val_ids,
        "test_ids": list(fold.test_ids),
        "hs": {
            "test_accuracy": hs_acc,
            "n_test_windows": hs_n,
            "n_train_windows": hs_n_train,
            "epochs_run": len(hs_hist),
        },
        "fpc": {
            "untriggered_test": sum(not r["triggered"] for r in test_rows),
            "untriggered_train": sum(not r["triggered"] for r in fpc_rows if r["split"] == "train"),
            "cells": fpc_rows,
        },
        "rul": {"n_train_windows": rul_n_train, "epochs_run": len(rul_hist)},
        "metrics": metrics,
        "leakage": leakage,
    }
    return FoldArtifacts(report, hs_model, rul_model, norm, rows)


def evaluate_predictions(preds, labels) -> dict:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.size == 0:
        return {"mae": None, "mse": None, "mape_pct": None, "n_windows": 0, "n_mape_windows": 0}
    keep = labels >= MAPE_EXCLUDE_BELOW
    return {
        "mae": metric_mae(preds, labels),
        "mse": metric_mse(preds, labels),
        "mape_pct": metric_mape(preds, labels) if keep.any() else None,
        "n_windows": int(preds.size),
        "n_mape_windows": int(keep.sum()),
    }


PREDICTION_COLUMNS = ("cell_id", "cycle", "fpc_cycle", "rul_pct_pred", "rul_pct_label",
                      "remaining_cycles_pred", "remaining_cycles_true")


def write_predictions(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in PREDICTION_COLUMNS])


def read_predictions(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = {"cell_id": np.array([r["cell_id"] for r in rows])}
    for c in PREDICTION_COLUMNS[1:]:
        out[c] = np.array([float(r[c]) for r in rows], dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# experiment


def _summary(values: list) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "values": values}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "values": values}


def load_knees(path) -> dict[str, int]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {str(r["cell_id"]): int(r["knee_cycle"]) for r in doc["cells"]}


def run_experiment(config: ExperimentConfig, out_dir, cells: list[CellSeries] | None = None) -> dict:
    """Run every fold and write ``report.json`` (deterministic) and ``timing.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if cells is None:
        if not config.manifest:
            raise DataError("no dataset manifest configured")
        entries = read_manifest(config.manifest)
        if config.schema and any(e.schema != config.schema for e in entries):
            raise DataError(f"manifest schema does not match configured schema {config.schema}")
        cells = load_manifest_cells(config.manifest)
    if not cells:
        raise DataError("empty dataset")
    if len({c.n_features for c in cells}) != 1:
        raise DataError("cells disagree on the number of features")
    knees = load_knees(config.knees) if config.knees else None
    folds = kfold_split([c.cell_id for c in cells], config.k, config.seed)
    if config.folds is not None:
        bad = [i for i in config.folds if not 0 <= i < config.k]
        if bad:
            raise ConfigError("folds", f"fold indices {bad} outside 0..{config.k - 1}")
        folds = [f for f in folds if f.fold_index in config.folds]

    handler = logging.FileHandler(out / "train.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(name)s %(levelname)s %(message)s"))
    root = logging.getLogger("battrul")
    prev_level = root.level
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    fold_reports, timings = [], []
    try:
        for fold in folds:
            tf = time.perf_counter()
            log.info("fold %d: %d train / %d test cells", fold.fold_index, len(fold.train_ids),
                     len(fold.test_ids))
            art = run_fold(config, fold, cells, out / f"fold-{fold.fold_index}", knees)
            fold_reports.append(art.report)
            timings.append({"fold_index": fold.fold_index, "seconds": time.perf_counter() - tf})
    finally:
        root.removeHandler(handler)
        root.setLevel(prev_level)
        handler.close()

    probe = StManModel(cells[0].n_features, config.n_w, config.stman)
    hs_probe = HsClassifier(cells[0].n_features, config.n_w, config.hs)
    aggregate = {
        name: _summary([f["metrics"][name] for f in fold_reports]) for name in ("mae", "mse", "mape_pct")
    }
    aggregate["hs_test_accuracy"] = _summary([f["hs"]["test_accuracy"] for f in fold_reports])
    test_fpc = [r for f in fold_reports for r in f["fpc"]["cells"] if r["split"] == "test"]
    caps = [r["fpc_capacity_pct"] for r in test_fpc if r["triggered"]]
    report = {
        "format": REPORT_FORMAT,
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": config.to_dict(),
        "mape_exclude_labels_below": MAPE_EXCLUDE_BELOW,
        "std_convention": "population std (ddof=0) across folds",
        "model": {
            "stman_parameters": probe.count_parameters(),
            "stman_flops": estimate_flops(probe),
            "hs_parameters": hs_probe.count_parameters(),
        },
        "folds": fold_reports,
        "aggregate": aggregate,
        "fpc_summary": {
            "n_test_cells": len(test_fpc),
            "n_untriggered_test": sum(not r["triggered"] for r in test_fpc),
            "mean_capacity_pct": float(np.mean(caps)) if caps else None,
        },
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    timing = {"total_seconds": time.perf_counter() - t0, "folds": timings}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    return report


def summary_row(report: dict) -> str:
    """One summary line: ``MAE mean ± std | MSE ... | MAPE ...``."""
    agg = report["aggregate"]

    def cell(name, fmt):
        m, s = agg[name]["mean"], agg[name]["std"]
        return "n/a" if m is None else f"{m:{fmt}} ± {s:{fmt}}"

    return (f"MAE {cell('mae', '.4f')} | MSE {cell('mse', '.5f')} | "
            f"MAPE {cell('mape_pct', '.2f')} %")
