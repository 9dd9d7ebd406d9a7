"""Stage 2: spatio-temporal multimodal attention network for RUL percentage."""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass

import numpy as np

from battrul.data.norm import NormStats
from battrul.tensor import core as T
from battrul.tensor.checkpoint import load_checkpoint, save_checkpoint
from battrul.tensor.nn import LayerNorm, Linear, LSTMLayer, Module, Parameter, gelu, uniform
from battrul.training import TrainConfig, TrainingError, fit

MAPE_LABEL_FLOOR = 1e-6


@dataclass
class StManConfig:
    k: int = 3
    d_model: int = 8
    n_heads: int = 2
    d_fuse: int = 16
    d_h: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError("conv kernel size k must be odd and positive")

    def to_dict(self) -> dict:
        return asdict(self)


class ChannelAttention(Module):
    """Pre-norm transformer encoder block over channel tokens.

    Tokens are ``(B, T, C, d)``: attention mixes the C channels at each
    time step independently. Both sublayers are residual.
    """

    def __init__(self, d: int, n_heads: int, rng):
        super().__init__()
        self.d, self.n_heads = d, n_heads
        self.norm1 = LayerNorm(d)
        self.q = Linear(d, d, rng)
        # a key bias shifts every score of a query equally; softmax ignores it
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.norm2 = LayerNorm(d)
        self.ff1 = Linear(d, 2 * d, rng)
        self.ff2 = Linear(2 * d, d, rng)

    def _heads(self, x, B, Tn, C):
        dh = self.d // self.n_heads
        return T.transpose(T.reshape(x, (B, Tn, C, self.n_heads, dh)), (0, 1, 3, 2, 4))

    def __call__(self, tokens):
        B, Tn, C, d = tokens.shape
        a = self.norm1(tokens)
        q, k, v = (self._heads(f(a), B, Tn, C) for f in (self.q, self.k, self.v))
        scores = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 1, 2, 4, 3))),
                              1.0 / math.sqrt(d // self.n_heads))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = T.reshape(T.transpose(ctx, (0, 1, 3, 2, 4)), (B, Tn, C, d))
        y = tokens + self.o(ctx)
        return y + self.ff2(gelu(self.ff1(self.norm2(y))))

    def flops(self, Tn: int, C: int) -> int:
        d, dh = self.d, self.d // self.n_heads
        proj = 4 * 2 * Tn * C * d * d
        attn = 2 * (2 * Tn * self.n_heads * C * C * dh)
        ff = 2 * Tn * C * (d * 2 * d + 2 * d * d)
        return proj + attn + ff


class StManModel(Module):
    """Conv lift per channel -> channel attention -> fusion FC -> LSTM ->
    temporal attention gated by a trainable scalar -> sigmoid FC.

    Input windows are ``(B, n_f, n_w)``; output is the RUL fraction ``(B,)``.
    """

    def __init__(self, n_f: int, n_w: int, config: StManConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = config or StManConfig()
        self.n_f, self.n_w, self.config = n_f, n_w, cfg
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(cfg.k)
        self.conv_w = Parameter(uniform(rng, (n_f, cfg.d_model, cfg.k), bound))
        self.conv_b = Parameter(uniform(rng, (n_f, cfg.d_model), bound))
        self.channel_attn = ChannelAttention(cfg.d_model, cfg.n_heads, rng)
        self.fuse = Linear(n_f * cfg.d_model, cfg.d_fuse, rng)
        self.lstm = LSTMLayer(cfg.d_fuse, cfg.d_h, rng)
        self.lam = Parameter(np.zeros(()))
        self.head = Linear(cfg.d_h, 1, rng)
        self.last_attention: np.ndarray | None = None

    def _check(self, x):
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (self.n_f, self.n_w):
            raise T.ShapeError("stman_forward", x.shape, ("B", self.n_f, self.n_w))
        return x

    def channel_tokens(self, x):
        """Per-channel conv lift, ``(B, n_f, n_w)`` -> tokens ``(B, n_w, n_f, d_model)``."""
        x = self._check(x)
        h = T.conv1d_depthwise(x, self.conv_w) + T.reshape(self.conv_b, (self.n_f, self.config.d_model, 1))
        return T.transpose(h, (0, 3, 1, 2))

    def __call__(self, x, temporal_attention: bool = True):
        tokens = self.channel_tokens(x)
        B, Tn, C, d = tokens.shape
        z = self.channel_attn(tokens)
        fused = self.fuse(T.reshape(z, (B, Tn, C * d)))
        hs = self.lstm(fused)
        last = hs[:, -1, :]
        if not temporal_attention:
            self.last_attention = None
            return T.reshape(T.sigmoid(self.head(last)), (B,))
        H = self.config.d_h
        scores = T.scalar_mul(T.reshape(T.matmul(hs, T.reshape(last, (B, H, 1))), (B, Tn)),
                              1.0 / math.sqrt(H))
        alpha = T.softmax(scores, axis=1)
        self.last_attention = alpha.data
        context = T.reshape(T.matmul(T.reshape(alpha, (B, 1, Tn)), hs), (B, H))
        feat = last + context * self.lam
        return T.reshape(T.sigmoid(self.head(feat)), (B,))


def stman_forward(model: StManModel, window: np.ndarray) -> float:
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (model.n_f, model.n_w):
        raise T.ShapeError("stman_forward", window.shape, (model.n_f, model.n_w))
    with T.no_grad():
        return float(model(window[None]).data[0])


def rul_loss_terms(preds, labels, mape_floor: float = MAPE_LABEL_FLOOR) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    p = T.as_tensor(preds)
    y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    if p.size == 0:
        raise ValueError("rul_loss: empty batch")
    err = p - y
    mae = T.mean(T.abs_(err))
    rmse = T.sqrt(T.mean(T.square(err)))
    mape = T.mean(T.abs_(err) * (1.0 / np.maximum(y, mape_floor)))
    return mae, rmse, mape


def rul_loss(preds, labels, mape_floor: float = MAPE_LABEL_FLOOR) -> T.Tensor:
    """MAE + RMSE + MAPE over the batch; the MAPE denominator is ``max(y, mape_floor)``."""
    mae, rmse, mape = rul_loss_terms(preds, labels, mape_floor)
    return mae + rmse + mape


def train_rul(model: StManModel, X, y, config: TrainConfig, X_val=None, y_val=None,
              mape_floor: float = MAPE_LABEL_FLOOR) -> list[dict]:
    if len(y) == 0:
        raise TrainingError("train_rul: no post-FPC windows to train on")
    return fit(model, functools.partial(rul_loss, mape_floor=mape_floor), np.asarray(X),
               np.asarray(y, dtype=np.float64), config, X_val, y_val, tag="rul")


def rul_to_cycles(rul_pct: float, current_cycle: int, fpc: int) -> float:
    """Remaining cycles implied by an RUL fraction, inverting the linear label."""
    if current_cycle <= fpc:
        raise ValueError(f"current cycle {current_cycle} must exceed fpc {fpc}")
    if not 0.0 <= rul_pct < 1.0:
        raise ValueError(f"rul_pct must be in [0, 1), got {rul_pct}")
    return rul_pct * (current_cycle - fpc) / (1.0 - rul_pct)


def count_parameters(model: Module) -> int:
    return model.count_parameters()


def estimate_flops(model: StManModel, window_shape: tuple[int, int] | None = None) -> int:
    """Multiply-add count (x2) of one single-window forward pass."""
    n_f, n_w = window_shape or (model.n_f, model.n_w)
    cfg = model.config
    conv = 2 * n_f * cfg.d_model * n_w * cfg.k
    attn = model.channel_attn.flops(n_w, n_f)
    fuse = model.fuse.flops(n_w)
    lstm = model.lstm.flops(1, n_w)
    temporal = 2 * 2 * n_w * cfg.d_h
    head = model.head.flops(1)
    return conv + attn + fuse + lstm + temporal + head


def save_stman(path, model: StManModel, norm: NormStats, schema: str, extra: dict | None = None) -> None:
    meta = {
        "model": "stman",
        "n_f": model.n_f,
        "n_w": model.n_w,
        "config": model.config.to_dict(),
        "norm": norm.to_dict(),
        "schema": schema,
    }
    meta.update(extra or {})
    save_checkpoint(path, model.state_dict(), meta)


def load_stman(path) -> tuple[StManModel, NormStats, dict]:
    state, meta = load_checkpoint(path)
    if meta.get("model") != "stman":
        raise ValueError(f"{path}: not an ST-MAN checkpoint (model={meta.get('model')!r})")
    model = StManModel(meta["n_f"], meta["n_w"], StManConfig(**meta["config"]))
    model.load_state_dict(state)
    return model, NormStats.from_dict(meta["norm"]), meta
