"""Stage 1: health-state classifier and first-prediction-cycle trigger."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from battrul.data.cells import CellSeries
from battrul.data.labels import UNLABELED
from battrul.data.norm import NormStats, apply_norm
from battrul.data.windows import window_array, window_ends
from battrul.tensor import core as T
from battrul.tensor.checkpoint import load_checkpoint, save_checkpoint
from battrul.tensor.nn import Linear, LSTMLayer, Module
from battrul.training import TrainConfig, TrainingError, batched_predict, fit

BCE_CLAMP = 1e-7


@dataclass
class HsConfig:
    hidden: int = 32
    n_modules: int = 2
    layers_per_module: int = 4

    def to_dict(self) -> dict:
        return asdict(self)


class _LSTMStack(Module):
    def __init__(self, d_in: int, hidden: int, n_layers: int, rng):
        super().__init__()
        self.n_layers = n_layers
        for k in range(n_layers):
            setattr(self, f"layer{k}", LSTMLayer(d_in if k == 0 else hidden, hidden, rng))

    def __call__(self, x):
        for k in range(self.n_layers):
            x = getattr(self, f"layer{k}")(x)
        return x


class HsClassifier(Module):
    """Stacked LSTM modules followed by a sigmoid FC head on the last step.

    Input windows are ``(B, n_f, n_w)``; the output is the probability of
    the unhealthy class, shape ``(B,)``.
    """

    def __init__(self, n_f: int, n_w: int, config: HsConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = config or HsConfig()
        self.n_f, self.n_w, self.config = n_f, n_w, cfg
        rng = np.random.default_rng(seed)
        d_in = n_f
        for m in range(cfg.n_modules):
            setattr(self, f"module{m}", _LSTMStack(d_in, cfg.hidden, cfg.layers_per_module, rng))
            d_in = cfg.hidden
        self.fc = Linear(cfg.hidden, 1, rng)

    def __call__(self, x):
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (self.n_f, self.n_w):
            raise T.ShapeError("hs_forward", x.shape, ("B", self.n_f, self.n_w))
        h = T.transpose(x, (0, 2, 1))
        for m in range(self.config.n_modules):
            h = getattr(self, f"module{m}")(h)
        last = h[:, -1, :]
        return T.reshape(T.sigmoid(self.fc(last)), (x.shape[0],))


def hs_forward(model: HsClassifier, window: np.ndarray) -> float:
    """Unhealthy probability for one normalized ``(n_f, n_w)`` window."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (model.n_f, model.n_w):
        raise T.ShapeError("hs_forward", window.shape, (model.n_f, model.n_w))
    with T.no_grad():
        return float(model(window[None]).data[0])


def bce_loss(pred, label) -> T.Tensor:
    """Mean binary cross-entropy; predictions clamped to ``[1e-7, 1-1e-7]``."""
    p = T.clip(T.as_tensor(pred), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(label, dtype=np.float64).reshape(p.shape)
    ll = T.log(p) * y + T.log(1.0 - p) * (1.0 - y)
    return -T.mean(ll)


def hs_training_set(cells, labels_by_cell, norm: NormStats, n_w: int, step: int = 1):
    """Stack the labeled windows (end-cycle label) of ``cells``."""
    Xs, ys = [], []
    for cell in cells:
        labels = labels_by_cell[cell.cell_id]
        ends = window_ends(cell.eol, n_w, step)
        ends = ends[labels[ends - 1] != UNLABELED]
        if len(ends) == 0:
            continue
        feats = apply_norm(norm, cell.features)
        Xs.append(window_array(feats, n_w, ends))
        ys.append(labels[ends - 1].astype(np.float64))
    if not Xs:
        return np.zeros((0, cells[0].n_features if cells else 0, n_w)), np.zeros(0)
    return np.concatenate(Xs), np.concatenate(ys)


def train_hs(model: HsClassifier, X, y, config: TrainConfig, X_val=None, y_val=None) -> list[dict]:
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise TrainingError("train_hs: no labeled windows")
    if np.all(y == y[0]):
        raise TrainingError("train_hs: labels contain a single class; need healthy and unhealthy windows")
    return fit(model, bce_loss, np.asarray(X), y, config, X_val, y_val, tag="hs")


@dataclass
class TriggerConfig:
    consecutive_required: int = 5
    unhealthy_threshold: float = 0.5
    mct_fraction: float = 0.10

    def __post_init__(self):
        if self.consecutive_required < 1:
            raise ValueError("consecutive_required must be >= 1")
        if not 0.0 < self.unhealthy_threshold < 1.0:
            raise ValueError("unhealthy_threshold must be in (0, 1)")
        if not 0.0 <= self.mct_fraction < 1.0:
            raise ValueError("mct_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FpcResult:
    cell_id: str
    fpc_cycle: int
    trigger_cycles: list[int]
    cycles: np.ndarray = field(repr=False)
    probabilities: np.ndarray = field(repr=False)


def decide_fpc(cycles, probabilities, eol_reference: float, trigger: TriggerConfig | None = None,
               cell_id: str = "") -> FpcResult | None:
    """First cycle closing a run of ``consecutive_required`` unhealthy calls
    whose first member lies strictly after ``mct_fraction * eol_reference``.

    ``cycles`` are the window end cycles, ascending, one per probability.
    Returns None when the trigger never fires.
    """
    trig = trigger or TriggerConfig()
    cycles = np.asarray(cycles, dtype=np.int64)
    probs = np.asarray(probabilities, dtype=np.float64)
    if cycles.shape != probs.shape:
        raise ValueError("cycles and probabilities must have equal length")
    n = trig.consecutive_required
    mct = trig.mct_fraction * eol_reference
    run = 0
    for i, p in enumerate(probs):
        run = run + 1 if p >= trig.unhealthy_threshold else 0
        if run >= n and cycles[i - n + 1] > mct:
            return FpcResult(cell_id, int(cycles[i]), [int(c) for c in cycles[i - n + 1:i + 1]],
                             cycles, probs)
    return None


def cell_probabilities(model: HsClassifier, norm: NormStats, cell: CellSeries, step: int = 1):
    """Unhealthy probability of the window ending at every cycle ``j >= n_w``."""
    ends = window_ends(cell.eol, model.n_w, step)
    X = window_array(apply_norm(norm, cell.features), model.n_w, ends)
    return ends, batched_predict(model, X)


def detect_fpc(model: HsClassifier, norm: NormStats, cell: CellSeries,
               trigger: TriggerConfig | None = None, eol_reference: float | None = None):
    """Run the classifier over a cell and apply the trigger.

    ``eol_reference`` defaults to the cell's own cycle count (offline use).
    Returns ``(FpcResult | None, ends, probabilities)``.
    """
    ends, probs = cell_probabilities(model, norm, cell)
    ref = cell.eol if eol_reference is None else eol_reference
    return decide_fpc(ends, probs, ref, trigger, cell.cell_id), ends, probs


def fpc_capacity_pct(cell: CellSeries, fpc: int) -> float:
    """Discharge capacity at ``fpc`` as a percentage of the first cycle's."""
    if not 1 <= fpc <= cell.eol:
        raise ValueError(f"fpc {fpc} outside cycles 1..{cell.eol}")
    q = cell.column("discharge_capacity")
    return float(100.0 * q[fpc - 1] / q[0])


def save_hs(path, model: HsClassifier, norm: NormStats, schema: str, extra: dict | None = None) -> None:
    meta = {
        "model": "hs",
        "n_f": model.n_f,
        "n_w": model.n_w,
        "config": model.config.to_dict(),
        "norm": norm.to_dict(),
        "schema": schema,
    }
    meta.update(extra or {})
    save_checkpoint(path, model.state_dict(), meta)


def load_hs(path) -> tuple[HsClassifier, NormStats, dict]:
    state, meta = load_checkpoint(path)
    if meta.get("model") != "hs":
        raise ValueError(f"{path}: not a health-state checkpoint (model={meta.get('model')!r})")
    model = HsClassifier(meta["n_f"], meta["n_w"], HsConfig(**meta["config"]))
    model.load_state_dict(state)
    return model, NormStats.from_dict(meta["norm"]), meta
