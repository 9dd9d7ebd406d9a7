from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from battrul.data import (
    HEALTHY,
    HUST5,
    MIT7,
    MIT7_COLUMNS,
    UNHEALTHY,
    UNLABELED,
    CellSeries,
    DataError,
    ManifestEntry,
    ParseError,
    SynthSpec,
    apply_norm,
    build_hust_features,
    capacity_curve,
    fit_norm,
    generate_synthetic,
    kfold_split,
    knee_fraction,
    label_hs,
    label_rul,
    load_cell_csv,
    load_manifest_cells,
    make_windows,
    read_fold_file,
    read_manifest,
    write_cell_csv,
    write_fold_file,
    write_manifest,
)
from battrul.data.norm import NormStats


def _mit_csv(path, cycles, values=None):
    rows = ["cycle," + ",".join(MIT7_COLUMNS)]
    for k, c in enumerate(cycles):
        v = values[k] if values is not None else [1.0 + 0.01 * k] * 7
        rows.append(f"{c}," + ",".join(str(x) for x in v))
    path.write_text("\n".join(rows) + "\n")
    return path


def _cell(eol, n_f=2, cell_id="c"):
    feats = np.arange(eol * n_f, dtype=np.float64).reshape(eol, n_f)
    return CellSeries(cell_id, "SYNTH", feats, tuple(f"f{i}" for i in range(n_f)))


class TestLoadCsv:
    def test_three_rows(self, tmp_path):
        cell = load_cell_csv(_mit_csv(tmp_path / "a.csv", [1, 2, 3]), MIT7)
        assert cell.eol == 3
        assert cell.cell_id == "a"
        assert cell.feature_names == MIT7_COLUMNS

    def test_gap_reported(self, tmp_path):
        with pytest.raises(ParseError, match="gap at cycle 3") as exc:
            load_cell_csv(_mit_csv(tmp_path / "a.csv", [1, 2, 4]), MIT7)
        assert exc.value.row == 4

    def test_hust_missing_column_named(self, tmp_path):
        p = tmp_path / "h.csv"
        p.write_text("cycle,discharge_capacity,charge_capacity\n1,1.0,1.0\n")
        with pytest.raises(ParseError, match="charge_voltage"):
            load_cell_csv(p, HUST5)

    def test_non_numeric_value_row(self, tmp_path):
        p = _mit_csv(tmp_path / "a.csv", [1, 2], [[1.0] * 7, [1.0, "abc", 1, 1, 1, 1, 1]])
        with pytest.raises(ParseError) as exc:
            load_cell_csv(p, MIT7)
        assert exc.value.row == 3
        assert "internal_resistance" in str(exc.value)

    def test_non_finite_rejected(self, tmp_path):
        p = _mit_csv(tmp_path / "a.csv", [1], [[1.0, "nan", 1, 1, 1, 1, 1]])
        with pytest.raises(ParseError, match="non-finite"):
            load_cell_csv(p, MIT7)

    def test_unknown_schema(self, tmp_path):
        with pytest.raises(DataError):
            load_cell_csv(_mit_csv(tmp_path / "a.csv", [1]), "XYZ")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="not found"):
            load_cell_csv(tmp_path / "none.csv", MIT7)

    def test_write_read_round_trip_exact(self, tmp_path, rng):
        cell = CellSeries("x", MIT7, rng.normal(size=(12, 7)), MIT7_COLUMNS)
        write_cell_csv(cell, tmp_path / "x.csv")
        back = load_cell_csv(tmp_path / "x.csv", MIT7)
        assert np.array_equal(back.features, cell.features)


class TestHustFeatures:
    def _base(self, v, q=None):
        v = np.asarray(v, dtype=np.float64)
        q = np.ones_like(v) if q is None else np.asarray(q, dtype=np.float64)
        return CellSeries("h", HUST5, np.column_stack([v, q, q]), ("charge_voltage", "discharge_capacity",
                                                                    "charge_capacity"))

    def test_cycle_ten_is_zero(self, rng):
        out = build_hust_features(self._base(rng.normal(size=20), rng.normal(size=20)))
        assert out.features[9, 3] == 0.0 and out.features[9, 4] == 0.0

    def test_difference_value(self):
        v = np.full(20, 3.3)
        v[14] = 3.4
        out = build_hust_features(self._base(v))
        assert math.isclose(out.column("delta_charge_voltage_10")[14], 0.1, abs_tol=1e-12)

    def test_constant_voltage(self):
        out = build_hust_features(self._base(np.full(15, 3.6)))
        assert np.all(out.column("delta_charge_voltage_10")[9:] == 0)

    def test_short_cell_rejected(self):
        with pytest.raises(DataError):
            build_hust_features(self._base(np.ones(9)))

    def test_loader_derives_five_features(self, tmp_path):
        p = tmp_path / "h.csv"
        lines = ["cycle,charge_voltage,discharge_capacity,charge_capacity"]
        lines += [f"{k},{3.0 + 0.01 * k},1.0,{1.0 - 0.001 * k}" for k in range(1, 13)]
        p.write_text("\n".join(lines) + "\n")
        cell = load_cell_csv(p, HUST5)
        assert cell.n_features == 5
        assert math.isclose(cell.features[11, 3], 0.02, abs_tol=1e-12)


class TestManifest:
    def test_round_trip_relative_paths(self, tmp_path):
        _mit_csv(tmp_path / "a.csv", [1, 2, 3])
        write_manifest([ManifestEntry("A", "a.csv", MIT7)], tmp_path / "m.json")
        entries = read_manifest(tmp_path / "m.json")
        assert entries[0].path == str(tmp_path / "a.csv")
        cells = load_manifest_cells(tmp_path / "m.json")
        assert cells[0].cell_id == "A" and cells[0].eol == 3

    def test_self_describing(self, tmp_path):
        write_manifest([], tmp_path / "m.json")
        assert json.loads((tmp_path / "m.json").read_text())["format"] == "battrul-manifest"

    def test_duplicate_ids(self, tmp_path):
        write_manifest([ManifestEntry("A", "a.csv", MIT7), ManifestEntry("A", "b.csv", MIT7)], tmp_path / "m.json")
        with pytest.raises(DataError, match="duplicate"):
            read_manifest(tmp_path / "m.json")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="nope.json"):
            read_manifest(tmp_path / "nope.json")


class TestLabels:
    def test_hs_eol_1000(self):
        y = label_hs(1000, 0.1)
        assert y[49] == HEALTHY and y[949] == UNHEALTHY and y[499] == UNLABELED

    def test_hs_eol_10(self):
        y = label_hs(10, 0.1)
        assert y[0] == HEALTHY and y[9] == UNHEALTHY
        assert np.all(y[1:9] == UNLABELED)

    def test_hs_rejects_half(self):
        with pytest.raises(ValueError):
            label_hs(100, 0.5)

    @given(st.integers(1, 3000), st.floats(0.01, 0.49))
    @settings(max_examples=200, deadline=None)
    def test_hs_counts(self, eol, p):
        y = label_hs(eol, p)
        n = math.floor(eol * p)
        assert (y == HEALTHY).sum() == n and (y == UNHEALTHY).sum() == n

    def test_rul_examples(self):
        assert label_rul(1000, 800)[899] == 0.5
        y = label_rul(150, 100)
        assert math.isclose(y[119], 0.6, rel_tol=1e-15)
        assert y[99] == 1.0 and y[149] == 0.0

    def test_rul_nan_before_fpc(self):
        y = label_rul(100, 40)
        assert np.all(np.isnan(y[:39])) and not np.isnan(y[39])

    @given(st.integers(2, 3000), st.data())
    @settings(max_examples=200, deadline=None)
    def test_rul_linear(self, eol, data):
        fpc = data.draw(st.integers(1, eol - 1))
        y = label_rul(eol, fpc)[fpc - 1:]
        assert np.allclose(y[:-1] - y[1:], 1.0 / (eol - fpc), rtol=0, atol=1e-12)
        assert y.min() >= 0.0 and y.max() <= 1.0

    def test_rul_invalid_fpc(self):
        with pytest.raises(DataError):
            label_rul(100, 100)
        with pytest.raises(DataError):
            label_rul(100, 0)


class TestWindows:
    def test_counts(self):
        assert [w.end_cycle for w in make_windows(_cell(60))] == list(range(50, 61))
        assert len(make_windows(_cell(50))) == 1

    def test_too_short(self):
        with pytest.raises(DataError):
            make_windows(_cell(49))

    def test_matrix_covers_cycles(self):
        cell = _cell(70, n_f=3)
        for w in make_windows(cell, n_w=50, step=7):
            j = w.end_cycle
            assert w.matrix.shape == (3, 50)
            assert np.array_equal(w.matrix, cell.features[j - 50:j].T)

    def test_reconstruction_no_mutation(self, rng):
        feats = rng.normal(size=(80, 4))
        cell = CellSeries("r", "SYNTH", feats.copy(), ("a", "b", "c", "d"))
        wins = make_windows(cell, n_w=10)
        for w in wins:
            for off in range(10):
                assert np.array_equal(w.matrix[:, off], feats[w.end_cycle - 10 + off])
        # windows are copies; writing to one leaves the cell untouched
        wins[0].matrix[:] = 0.0
        assert np.array_equal(cell.features, feats)

    def test_labels_from_end_cycle(self):
        cell = _cell(100)
        hs = label_hs(cell, 0.1)
        rul = label_rul(cell, 60)
        wins = make_windows(cell, n_w=50, hs_labels=hs, rul_labels=rul)
        by_end = {w.end_cycle: w for w in wins}
        assert by_end[95].hs_label == UNHEALTHY and by_end[50].hs_label is None
        assert by_end[59].rul_label is None and by_end[60].rul_label == 1.0


class TestNorm:
    def test_constant_feature_zero(self):
        cell = CellSeries("c", "SYNTH", np.column_stack([np.full(10, 5.0), np.arange(10.0)]), ("a", "b"))
        z = apply_norm(fit_norm([cell]), cell.features)
        assert np.all(z[:, 0] == 0.0)

    def test_standardised(self, rng):
        cells = [CellSeries(str(i), "SYNTH", rng.normal(3, 2, size=(40, 3)), ("a", "b", "c")) for i in range(3)]
        stats = fit_norm(cells)
        z = apply_norm(stats, np.concatenate([c.features for c in cells]))
        assert np.allclose(z.mean(0), 0, atol=1e-12) and np.allclose(z.std(0), 1, atol=1e-12)

    def test_serialise_round_trip(self, rng):
        cell = CellSeries("c", "SYNTH", rng.normal(size=(20, 2)), ("a", "b"))
        stats = fit_norm([cell])
        back = NormStats.loads(stats.dumps())
        assert np.array_equal(apply_norm(back, cell.features), apply_norm(stats, cell.features))

    def test_apply_is_pure(self, rng):
        x = rng.normal(size=(5, 2))
        before = x.copy()
        apply_norm(NormStats(np.ones(2), np.full(2, 2.0)), x)
        assert np.array_equal(x, before)


class TestFolds:
    def test_124_cells_five_folds(self):
        folds = kfold_split([f"c{i}" for i in range(124)], 5, seed=0)
        assert sorted(len(f.test_ids) for f in folds) == [24, 25, 25, 25, 25]

    def test_partition(self):
        ids = [f"c{i}" for i in range(10)]
        folds = kfold_split(ids, 5, seed=3)
        assert all(len(f.test_ids) == 2 for f in folds)
        tests = [set(f.test_ids) for f in folds]
        assert set().union(*tests) == set(ids)
        assert sum(len(t) for t in tests) == len(ids)
        for f in folds:
            assert not set(f.train_ids) & set(f.test_ids)
            assert set(f.train_ids) | set(f.test_ids) == set(ids)

    def test_seeded(self):
        ids = [f"c{i}" for i in range(17)]
        assert [f.test_ids for f in kfold_split(ids, 4, 9)] == [f.test_ids for f in kfold_split(ids, 4, 9)]

    def test_bad_k(self):
        with pytest.raises(ValueError):
            kfold_split(["a", "b"], 3)
        with pytest.raises(ValueError):
            kfold_split(["a", "b"], 1)

    def test_fold_file_round_trip(self, tmp_path):
        f = kfold_split(["a", "b", "c"], 3, 1)[0]
        write_fold_file(f, tmp_path / "f.json")
        assert read_fold_file(tmp_path / "f.json") == f


class TestSynth:
    def test_endpoint(self):
        q = capacity_curve(1000, 1.0, 0.2, 5.0)
        assert math.isclose(q[-1], 0.8, rel_tol=1e-15)

    def test_monotone(self):
        q = capacity_curve(700, 1.1, 0.2, 6.5)
        assert np.all(np.diff(q) <= 0)

    @pytest.mark.parametrize("b", [4.0, 5.0, 6.3, 8.0])
    def test_knee_is_curvature_argmax(self, b):
        eol = 1000
        x = np.arange(1, eol + 1) / eol
        fade = 0.2
        dy = -fade * b * x ** (b - 1)
        d2y = -fade * b * (b - 1) * x ** (b - 2)
        kappa = np.abs(d2y) / (1 + dy ** 2) ** 1.5
        brute = int(np.argmax(kappa)) + 1
        assert abs(round(knee_fraction(fade, b) * eol) - brute) <= 1

    def test_recorded_knee(self):
        for sc in generate_synthetic(SynthSpec(n_cells=5, seed=2)):
            assert sc.knee_cycle == round(knee_fraction(0.2, sc.exponent) * sc.cell.eol)
            assert 1 <= sc.knee_cycle <= sc.cell.eol

    def test_noise_free_cell(self):
        spec = SynthSpec(n_cells=3, capacity_noise=0, resistance_noise=0, temp_noise=0, time_noise=0, seed=4)
        for sc in generate_synthetic(spec):
            q = sc.cell.column("discharge_capacity")
            assert np.all(np.diff(q) <= 0)
            assert math.isclose(q[-1] / sc.q0, 0.8, rel_tol=1e-12)
            r = sc.cell.column("internal_resistance")
            k = sc.knee_cycle
            # slope after the knee is steeper than before it
            assert (r[-1] - r[k]) / (sc.cell.eol - k) > 5 * (r[k - 1] - r[0]) / (k - 1)
            t = sc.cell.column("charge_time")
            assert np.all(np.diff(t) >= 0)

    def test_eol_range_and_ids(self):
        cells = generate_synthetic(SynthSpec(n_cells=20, eol_range=(400, 800), seed=1))
        assert all(400 <= sc.cell.eol <= 800 for sc in cells)
        assert len({sc.cell.cell_id for sc in cells}) == 20

    def test_deterministic(self):
        a = generate_synthetic(SynthSpec(n_cells=3, seed=11))
        b = generate_synthetic(SynthSpec(n_cells=3, seed=11))
        assert all(np.array_equal(x.cell.features, y.cell.features) for x, y in zip(a, b))

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SynthSpec(eol_range=(100, 50))
        with pytest.raises(ValueError):
            SynthSpec(eol_range=(150, 300))
        with pytest.raises(ValueError):
            SynthSpec(exponent_range=(2.5, 4.0))
