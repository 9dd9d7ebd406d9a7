"""Mini-batch Adam training with early stopping, shared by both stages."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from battrul.tensor import Tensor, no_grad
from battrul.tensor.nn import Module
from battrul.tensor.optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 100
    patience: int = 20
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def batched_predict(model: Module, X: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(X), chunk):
            out.append(model(X[s:s + chunk]).data)
    return np.concatenate(out) if out else np.zeros(0)


def fit(
    model: Module,
    loss_fn: Callable[[Tensor, np.ndarray], Tensor],
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    X_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
    tag: str = "train",
) -> list[dict]:
    """Train in place and restore the weights of the best monitored epoch.

    The validation loss is monitored when a validation set is given,
    otherwise the epoch's mean training loss.
    """
    n = len(X)
    if n == 0:
        raise TrainingError(f"{tag}: no training samples")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    has_val = X_val is not None and len(X_val) > 0
    best = math.inf
    best_state = model.state_dict()
    wait = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            model.zero_grad()
            loss = loss_fn(model(X[idx]), y[idx])
            loss.backward()
            adam_step(state, params)
            total += loss.item() * len(idx)
        train_loss = total / n
        if not math.isfinite(train_loss):
            raise TrainingError(f"{tag}: non-finite training loss at epoch {epoch}")
        val_loss = None
        if has_val:
            with no_grad():
                val_loss = float(loss_fn(Tensor(batched_predict(model, X_val)), y_val).item())
        monitored = val_loss if has_val else train_loss
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("%s epoch %d train_loss=%.6f val_loss=%s", tag, epoch, train_loss,
                 "n/a" if val_loss is None else f"{val_loss:.6f}")
        if monitored < best:
            best = monitored
            best_state = model.state_dict()
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                log.info("%s early stop at epoch %d (best %.6f)", tag, epoch, best)
                break
    model.load_state_dict(best_state)
    return history
