from __future__ import annotations

import json

import numpy as np
import pytest
from conftest import tiny_config

from battrul.data import Fold, kfold_split
from battrul.harness import (
    ConfigError,
    ExperimentConfig,
    LeakageError,
    config_from_dict,
    evaluate_predictions,
    load_config,
    metric_mae,
    metric_mape,
    metric_mse,
    read_predictions,
    run_experiment,
    run_fold,
    split_validation,
    summary_row,
)
from battrul.training import TrainConfig


class TestMetrics:
    def test_equal(self):
        y = [0.2, 0.5, 0.9]
        assert metric_mae(y, y) == metric_mse(y, y) == metric_mape(y, y) == 0.0

    def test_single(self):
        assert np.isclose(metric_mae([0.4], [0.5]), 0.1)
        assert np.isclose(metric_mse([0.4], [0.5]), 0.01)
        assert np.isclose(metric_mape([0.4], [0.5]), 20.0)

    def test_permutation_invariant(self, rng):
        p, y = rng.random(30), rng.random(30) + 0.05
        perm = rng.permutation(30)
        for f in (metric_mae, metric_mse, metric_mape):
            assert np.isclose(f(p, y), f(p[perm], y[perm]), rtol=1e-14)

    def test_mape_excludes_small_labels(self):
        assert np.isclose(metric_mape([0.4, 0.5], [0.5, 0.0]), 20.0)
        with pytest.raises(ValueError):
            metric_mape([0.1], [0.001])

    def test_errors(self):
        with pytest.raises(ValueError):
            metric_mae([], [])
        with pytest.raises(ValueError):
            metric_mse([1.0, 2.0], [1.0])

    def test_evaluate_empty(self):
        assert evaluate_predictions([], [])["n_windows"] == 0


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.n_w, cfg.p, cfg.k) == (50, 0.10, 5)
        assert cfg.trigger.consecutive_required == 5
        assert cfg.hs_train.lr == 1e-4 and cfg.hs_train.batch_size == 8 and cfg.hs_train.epochs == 100

    def test_nested_merge(self):
        cfg = config_from_dict({"hs_train": {"epochs": 3}, "stman": {"d_h": 16}})
        assert cfg.hs_train.epochs == 3 and cfg.hs_train.lr == 1e-4
        assert cfg.stman.d_h == 16

    def test_unknown_field_path(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"hs_train": {"epoch": 3}})
        assert exc.value.path == "hs_train.epoch"

    def test_type_error_path(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"trigger": {"consecutive_required": "five"}})
        assert exc.value.path == "trigger.consecutive_required"

    def test_value_error_path(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"rul_train": {"lr": -1.0}})
        assert exc.value.path == "rul_train.lr"
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"p": 0.5})
        assert exc.value.path == "p"

    def test_nested_validation_path(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"stman": {"d_model": 7}})
        assert exc.value.path == "stman"

    def test_int_accepted_as_float(self):
        assert config_from_dict({"rul_train": {"lr": 1}}).rul_train.lr == 1.0

    def test_load_resolves_relative_paths(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"manifest": "data/m.json", "k": 3}))
        cfg = load_config(tmp_path / "cfg.json", {"seed": 4})
        assert cfg.manifest == str(tmp_path / "data" / "m.json")
        assert cfg.k == 3 and cfg.seed == 4

    def test_load_missing_and_invalid(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(tmp_path / "bad.json")

    def test_round_trip(self):
        cfg = tiny_config(seed=3)
        assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestSplitValidation:
    def test_small_train_sets_have_no_validation(self):
        assert split_validation(["a", "b"], 0.1, 0) == (["a", "b"], [])

    def test_disjoint_and_complete(self):
        ids = [f"c{i}" for i in range(16)]
        fit, val = split_validation(ids, 0.1, 5)
        assert len(val) == 2 and not set(fit) & set(val) and set(fit) | set(val) == set(ids)


@pytest.fixture(scope="module")
def fold_run(small_corpus, tmp_path_factory):
    cells = [sc.cell for sc in small_corpus]
    knees = {sc.cell.cell_id: sc.knee_cycle for sc in small_corpus}
    fold = kfold_split([c.cell_id for c in cells], 2, 0)[0]
    out = tmp_path_factory.mktemp("fold")
    art = run_fold(tiny_config(), fold, cells, out, knees)
    return art, out, fold


class TestRunFold:
    def test_report_fields(self, fold_run):
        art, out, fold = fold_run
        r = art.report
        assert r["test_ids"] == fold.test_ids
        assert 0.0 <= r["metrics"]["mae"] <= 1.0
        assert r["hs"]["test_accuracy"] is not None
        assert set(r["leakage"]) == {"norm", "hs_train", "hs_val", "rul_train", "rul_val"}
        assert all(v["disjoint_from_test"] for v in r["leakage"].values())
        for name in ("fold.json", "fpc-report.json", "predictions.csv", "hs.npz", "stman.npz", "history.json"):
            assert (out / name).exists()

    def test_fpc_rows(self, fold_run):
        art, out, fold = fold_run
        doc = json.loads((out / "fpc-report.json").read_text())
        assert doc["format"] == "battrul-fpc-report"
        for row in doc["cells"]:
            assert "knee_cycle" in row
            if row["triggered"]:
                assert 10 <= row["fpc_cycle"] <= row["eol"]
                assert row["trigger_cycles"][-1] == row["fpc_cycle"]

    def test_metrics_recomputable_from_csv(self, fold_run):
        art, out, _ = fold_run
        pred = read_predictions(out / "predictions.csv")
        m = art.report["metrics"]
        assert abs(metric_mae(pred["rul_pct_pred"], pred["rul_pct_label"]) - m["mae"]) <= 1e-12
        assert abs(metric_mse(pred["rul_pct_pred"], pred["rul_pct_label"]) - m["mse"]) <= 1e-12
        assert abs(metric_mape(pred["rul_pct_pred"], pred["rul_pct_label"]) - m["mape_pct"]) <= 1e-12
        assert np.all(pred["remaining_cycles_true"] >= 0)

    def test_only_test_cells_predicted(self, fold_run):
        art, out, fold = fold_run
        pred = read_predictions(out / "predictions.csv")
        assert set(pred["cell_id"]) <= set(fold.test_ids)

    def test_leakage_detected(self, small_corpus, tmp_path):
        cells = [sc.cell for sc in small_corpus]
        ids = [c.cell_id for c in cells]
        bad = Fold(0, ids[:4], ids[3:], 0)
        with pytest.raises(LeakageError, match=ids[3]):
            run_fold(tiny_config(), bad, cells, tmp_path)

    def test_all_but_one_train(self, small_corpus, tmp_path):
        cells = [sc.cell for sc in small_corpus]
        ids = [c.cell_id for c in cells]
        art = run_fold(tiny_config(rul_train=TrainConfig(lr=3e-3, epochs=1)),
                       Fold(0, ids[:-1], ids[-1:], 0), cells, tmp_path)
        assert art.report["test_ids"] == ids[-1:]


class TestRunExperiment:
    def test_aggregate_and_determinism(self, small_corpus, tmp_path):
        cells = [sc.cell for sc in small_corpus]
        cfg = tiny_config()
        rep = run_experiment(cfg, tmp_path / "a", cells)
        vals = rep["aggregate"]["mae"]["values"]
        assert len(vals) == 2 and np.isclose(rep["aggregate"]["mae"]["mean"], np.mean(vals))
        assert rep["aggregate"]["mae"]["std"] >= 0
        assert rep["model"]["stman_parameters"] > 0 and rep["model"]["stman_flops"] > 0
        assert rep["format"] == "battrul-report"
        assert (tmp_path / "a" / "train.log").read_text().count("epoch") > 0
        run_experiment(cfg, tmp_path / "b", cells)
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        assert "MAE" in summary_row(rep)

    def test_fold_subset(self, small_corpus, tmp_path):
        rep = run_experiment(tiny_config(folds=[1]), tmp_path, [sc.cell for sc in small_corpus])
        assert [f["fold_index"] for f in rep["folds"]] == [1]

    def test_bad_fold_index(self, small_corpus, tmp_path):
        with pytest.raises(ConfigError):
            run_experiment(tiny_config(folds=[5]), tmp_path, [sc.cell for sc in small_corpus])
