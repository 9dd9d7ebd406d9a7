"""Command-line entry point: ``battrul <subcommand>``.

Precedence for settings: command-line flags > ``--config`` file > defaults.
Every command writes its resolved config next to its outputs. Exit codes:
0 success, 2 usage or config error, 3 data error, 4 training failure; on
failure a single JSON object ``{"error": {...}}`` is written to stderr.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from battrul import __version__
from battrul.data.cells import (
    DataError,
    ManifestEntry,
    load_cell_csv,
    load_manifest_cells,
    write_cell_csv,
    write_manifest,
)
from battrul.data.folds import read_fold_file
from battrul.data.norm import fit_norm
from battrul.data.synth import SynthSpec, generate_synthetic
from battrul.harness import (
    ConfigError,
    ExperimentConfig,
    LeakageError,
    split_validation,
    config_from_dict,
    evaluate_predictions,
    fpc_table,
    load_config,
    predict_cells,
    run_experiment,
    summary_row,
    train_stage1,
    train_stage2,
    write_fpc_report,
    write_predictions,
)
from battrul.hs import load_hs, save_hs
from battrul.stman import load_stman, save_stman
from battrul.training import TrainingError

EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 2, 3, 4
CONFIG_ECHO_FORMAT = "battrul-resolved-config"


class UsageFailure(Exception):
    pass


def _fail(kind: str, message: str, code: int):
    click.echo(json.dumps({"error": {"type": kind, "message": message, "exit_code": code}}), err=True)
    sys.exit(code)


def guarded(fn):
    """Translate library exceptions into exit codes and a JSON stderr record."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (UsageFailure, ConfigError) as exc:
            _fail(type(exc).__name__, str(exc), EXIT_USAGE)
        except (DataError, FileNotFoundError, LeakageError) as exc:
            _fail(type(exc).__name__, str(exc), EXIT_DATA)
        except TrainingError as exc:
            _fail(type(exc).__name__, str(exc), EXIT_TRAINING)
        except PermissionError as exc:
            _fail(type(exc).__name__, str(exc), EXIT_DATA)

    return wrapper


def _resolve(ctx, overrides: dict) -> ExperimentConfig:
    """Defaults < --config file < global --seed < command flags."""
    obj = ctx.obj
    cfg = load_config(obj["config"]) if obj["config"] else ExperimentConfig()
    layer = {}
    if obj["seed"] is not None:
        layer["seed"] = obj["seed"]
    layer.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(layer, cfg) if layer else cfg


def _out_dir(ctx, default: str = ".") -> Path:
    out = Path(ctx.obj["out_dir"] or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _echo_config(out: Path, command: str, resolved: dict) -> None:
    doc = {"format": CONFIG_ECHO_FORMAT, "version": 1, "command": command,
           "battrul_version": __version__, "config": resolved}
    (out / f"{command}-config.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _cells_for(manifest: str, fold_file: str | None, part: str):
    cells = load_manifest_cells(manifest)
    if fold_file is None:
        return cells
    fold = read_fold_file(fold_file)
    keep = set(fold.train_ids if part == "train" else fold.test_ids)
    return [c for c in cells if c.cell_id in keep]


@click.group()
@click.version_option(__version__, prog_name="battrul")
@click.option("--seed", type=int, default=None, help="Global seed (overrides the config file).")
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
              help="JSON experiment config; flags override its values.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Directory for all outputs.")
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch losses to stderr.")
@click.pass_context
def main(ctx, seed, config, out_dir, verbose):
    """Two-stage battery RUL prediction: health-state FPC detection + ST-MAN regression."""
    ctx.ensure_object(dict)
    ctx.obj.update(seed=seed, config=config, out_dir=out_dir)
    if verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")


@main.command("synth-gen")
@click.option("--cells", "n_cells", type=int, default=20, show_default=True)
@click.option("--eol-min", type=int, default=400, show_default=True)
@click.option("--eol-max", type=int, default=800, show_default=True)
@click.option("--seed", "local_seed", type=int, default=None, help="Overrides the global --seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Dataset directory (default: --out-dir).")
@click.pass_context
@guarded
def synth_gen(ctx, n_cells, eol_min, eol_max, local_seed, out):
    """Generate a synthetic corpus: cell CSVs, manifest.json and knees.json."""
    if n_cells < 1:
        raise UsageFailure("--cells must be >= 1")
    if eol_min > eol_max:
        raise UsageFailure(f"--eol-min ({eol_min}) exceeds --eol-max ({eol_max})")
    seed = local_seed if local_seed is not None else (ctx.obj["seed"] or 0)
    try:
        spec = SynthSpec(n_cells=n_cells, eol_range=(eol_min, eol_max), seed=seed)
    except ValueError as exc:
        raise UsageFailure(str(exc)) from None
    if out is not None:
        ctx.obj["out_dir"] = out
    root = _out_dir(ctx)
    cell_dir = root / "cells"
    cell_dir.mkdir(exist_ok=True)
    entries, knees = [], []
    for sc in generate_synthetic(spec):
        name = f"{sc.cell.cell_id}.csv"
        write_cell_csv(sc.cell, cell_dir / name)
        entries.append(ManifestEntry(sc.cell.cell_id, f"cells/{name}", sc.cell.schema))
        knees.append({"cell_id": sc.cell.cell_id, "eol": sc.cell.eol, "knee_cycle": sc.knee_cycle,
                      "knee_frac": sc.knee_frac, "exponent": sc.exponent})
    write_manifest(entries, root / "manifest.json")
    (root / "knees.json").write_text(
        json.dumps({"format": "battrul-knees", "version": 1, "cells": knees}, indent=2) + "\n",
        encoding="utf-8")
    _echo_config(root, "synth-gen", spec.to_dict())
    click.echo(f"wrote {len(entries)} cells to {root}")


@main.command("train-hs")
@click.option("--manifest", type=str, default=None, help="Dataset manifest (default: config).")
@click.option("--fold-file", type=click.Path(dir_okay=False), default=None,
              help="Train only on this fold's train_ids.")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.pass_context
@guarded
def train_hs_cmd(ctx, manifest, fold_file, epochs, lr, batch_size):
    """Train the health-state classifier; writes hs.npz and hs-history.json."""
    hs_train = {k: v for k, v in dict(epochs=epochs, lr=lr, batch_size=batch_size).items() if v is not None}
    cfg = _resolve(ctx, {"manifest": manifest, "hs_train": hs_train or None})
    out = _out_dir(ctx)
    cells = _cells_for(cfg.manifest, fold_file, "train")
    if not cells:
        raise DataError("no training cells")
    fit_ids, val_ids = split_validation([c.cell_id for c in cells], cfg.val_fraction, cfg.seed)
    by_id = {c.cell_id: c for c in cells}
    fit_cells, val_cells = [by_id[c] for c in fit_ids], [by_id[c] for c in val_ids]
    norm = fit_norm(fit_cells)
    model, history, n = train_stage1(cfg, fit_cells, val_cells, norm, cfg.seed)
    save_hs(out / "hs.npz", model, norm, cells[0].schema, {"train_ids": fit_ids, "val_ids": val_ids})
    (out / "hs-history.json").write_text(json.dumps(history, indent=2) + "\n", encoding="utf-8")
    _echo_config(out, "train-hs", cfg.to_dict())
    click.echo(f"trained on {n} windows from {len(fit_ids)} cells; {len(history)} epochs -> {out / 'hs.npz'}")


@main.command("detect-fpc")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--cell", "cell_path", required=True, type=click.Path(dir_okay=False))
@click.option("--schema", default=None, help="Cell CSV schema (default: the checkpoint's).")
@click.pass_context
@guarded
def detect_fpc_cmd(ctx, model_path, cell_path, schema):
    """Run the classifier + trigger over one cell; writes fpc-report.json."""
    cfg = _resolve(ctx, {})
    out = _out_dir(ctx)
    model, norm, meta = load_hs(model_path)
    cell = load_cell_csv(cell_path, schema or meta["schema"])
    if cell.n_features != model.n_f:
        raise DataError(f"checkpoint expects {model.n_f} features, cell {cell.cell_id} has {cell.n_features}")
    if cell.eol < model.n_w:
        raise DataError(f"cell {cell.cell_id} has {cell.eol} cycles, fewer than the window {model.n_w}")
    fpcs, rows = fpc_table(model, norm, [cell], cfg.trigger)
    write_fpc_report(out / "fpc-report.json", rows)
    _echo_config(out, "detect-fpc", cfg.to_dict())
    click.echo(json.dumps(rows[0]))


@main.command("train-rul")
@click.option("--manifest", type=str, default=None)
@click.option("--hs-model", required=True, type=click.Path(dir_okay=False),
              help="Stage-1 checkpoint used to place each training cell's FPC.")
@click.option("--fold-file", type=click.Path(dir_okay=False), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.pass_context
@guarded
def train_rul_cmd(ctx, manifest, hs_model, fold_file, epochs, lr, batch_size):
    """Train ST-MAN on post-FPC windows; writes stman.npz and rul-history.json."""
    rul_train = {k: v for k, v in dict(epochs=epochs, lr=lr, batch_size=batch_size).items() if v is not None}
    cfg = _resolve(ctx, {"manifest": manifest, "rul_train": rul_train or None})
    out = _out_dir(ctx)
    cells = _cells_for(cfg.manifest, fold_file, "train")
    hs, norm, meta = load_hs(hs_model)
    fpcs, rows = fpc_table(hs, norm, cells, cfg.trigger)
    fit_ids, val_ids = split_validation([c.cell_id for c in cells], cfg.val_fraction, cfg.seed)
    by_id = {c.cell_id: c for c in cells}
    model, history, n = train_stage2(cfg, [by_id[c] for c in fit_ids], [by_id[c] for c in val_ids],
                                     fpcs, norm, cfg.seed)
    save_stman(out / "stman.npz", model, norm, cells[0].schema, {"train_ids": fit_ids, "val_ids": val_ids})
    (out / "rul-history.json").write_text(json.dumps(history, indent=2) + "\n", encoding="utf-8")
    write_fpc_report(out / "train-fpc-report.json", rows)
    _echo_config(out, "train-rul", cfg.to_dict())
    click.echo(f"trained on {n} post-FPC windows; {len(history)} epochs -> {out / 'stman.npz'}")


@main.command("evaluate")
@click.option("--manifest", type=str, default=None)
@click.option("--hs-model", required=True, type=click.Path(dir_okay=False))
@click.option("--rul-model", required=True, type=click.Path(dir_okay=False))
@click.option("--fold-file", type=click.Path(dir_okay=False), default=None,
              help="Evaluate only this fold's test_ids.")
@click.pass_context
@guarded
def evaluate_cmd(ctx, manifest, hs_model, rul_model, fold_file):
    """Predict RUL after each cell's detected FPC; writes predictions.csv and metrics.json."""
    cfg = _resolve(ctx, {"manifest": manifest})
    out = _out_dir(ctx)
    cells = _cells_for(cfg.manifest, fold_file, "test")
    hs, hs_norm, _ = load_hs(hs_model)
    rul, rul_norm, _ = load_stman(rul_model)
    fpcs, fpc_rows = fpc_table(hs, hs_norm, cells, cfg.trigger)
    rows, preds, labels = predict_cells(rul, rul_norm, cells, fpcs, cfg.step)
    write_predictions(out / "predictions.csv", rows)
    write_fpc_report(out / "fpc-report.json", fpc_rows)
    metrics = evaluate_predictions(preds, labels)
    metrics["untriggered"] = sum(not r["triggered"] for r in fpc_rows)
    doc = {"format": "battrul-metrics", "version": 1, **metrics}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    _echo_config(out, "evaluate", cfg.to_dict())
    click.echo(json.dumps(metrics))


@main.command("run-cv")
@click.option("--manifest", type=str, default=None)
@click.option("--knees", type=str, default=None, help="Ground-truth knees file (synthetic data).")
@click.option("--k", type=int, default=None, help="Number of folds.")
@click.option("--epochs", type=int, default=None, help="Epoch cap for both stages.")
@click.pass_context
@guarded
def run_cv_cmd(ctx, manifest, knees, k, epochs):
    """Full k-fold experiment; writes report.json, timing.json and per-fold artifacts."""
    over = {"manifest": manifest, "knees": knees, "k": k}
    if epochs is not None:
        over["hs_train"] = {"epochs": epochs}
        over["rul_train"] = {"epochs": epochs}
    cfg = _resolve(ctx, over)
    if not cfg.manifest:
        raise UsageFailure("no manifest: pass --manifest or set it in --config")
    if not Path(cfg.manifest).exists():
        raise DataError(f"manifest not found: {cfg.manifest}")
    out = _out_dir(ctx)
    _echo_config(out, "run-cv", cfg.to_dict())
    report = run_experiment(cfg, out)
    click.echo(summary_row(report))


@main.command("report")
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Print the aggregate block as JSON.")
@guarded
def report_cmd(report_path, as_json):
    """Print the per-fold and aggregate summary of a run-cv report."""
    path = Path(report_path)
    if not path.exists():
        raise DataError(f"report not found: {path}")
    try:
        rep = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if rep.get("format") != "battrul-report":
        raise DataError(f"{path}: not a battrul report")
    if as_json:
        click.echo(json.dumps(rep["aggregate"], indent=2))
        return
    click.echo(summary_row(rep))
    for f in rep["folds"]:
        m = f["metrics"]
        fmt = lambda v, spec: "n/a" if v is None else format(v, spec)  # noqa: E731
        click.echo(f"fold {f['fold_index']}: MAE {fmt(m['mae'], '.4f')} MSE {fmt(m['mse'], '.5f')} "
                   f"MAPE {fmt(m['mape_pct'], '.2f')} % | HS acc {fmt(f['hs']['test_accuracy'], '.3f')} "
                   f"| untriggered {f['fpc']['untriggered_test']}")
    mdl = rep["model"]
    click.echo(f"ST-MAN parameters {mdl['stman_parameters']}, FLOPs {mdl['stman_flops']}")


if __name__ == "__main__":  # pragma: no cover
    main()
