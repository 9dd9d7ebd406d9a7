from battrul.data.cells import (
    HUST5,
    HUST5_COLUMNS,
    MIT7,
    MIT7_COLUMNS,
    SYNTH,
    CellSeries,
    DataError,
    ManifestEntry,
    ParseError,
    build_hust_features,
    load_cell_csv,
    load_manifest_cells,
    read_manifest,
    write_cell_csv,
    write_manifest,
)
from battrul.data.folds import Fold, kfold_split, read_fold_file, write_fold_file
from battrul.data.labels import HEALTHY, UNHEALTHY, UNLABELED, label_hs, label_rul
from battrul.data.norm import NormStats, apply_norm, fit_norm
from battrul.data.synth import SynthCell, SynthSpec, capacity_curve, generate_synthetic, knee_cycle, knee_fraction
from battrul.data.windows import WindowSample, make_windows, window_array, window_ends

__all__ = [
    "HUST5", "HUST5_COLUMNS", "MIT7", "MIT7_COLUMNS", "SYNTH", "CellSeries", "DataError", "ManifestEntry", "ParseError",
    "build_hust_features", "load_cell_csv", "load_manifest_cells", "read_manifest",
    "write_cell_csv", "write_manifest", "Fold", "kfold_split", "read_fold_file",
    "write_fold_file", "HEALTHY", "UNHEALTHY", "UNLABELED", "label_hs", "label_rul",
    "NormStats", "apply_norm", "fit_norm", "SynthCell", "SynthSpec", "generate_synthetic",
    "capacity_curve", "knee_cycle", "knee_fraction", "WindowSample", "make_windows", "window_array", "window_ends",
]
