"""Parameters, a light module container and the layers both networks share."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from battrul.tensor import core as T


class Parameter(T.Tensor):
    """A trainable leaf tensor with a dotted path name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


class Module:
    """Registers parameters and child modules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield prefix + key, p
        for key, child in self._children.items():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self, prefix: str = "") -> list[Parameter]:
        """Parameters with their ``name`` set to the full dotted path."""
        out = []
        for name, p in self.named_parameters(prefix):
            p.name = name
            out.append(p)
        return out

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def count_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        own = dict(self.named_parameters(prefix))
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError("load_state_dict", p.shape, arr.shape, detail=name)
            p.data = arr.copy()


def uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(uniform(rng, (d_in, d_out), bound))
        if bias:
            self.bias = Parameter(uniform(rng, (d_out,), bound))
        else:
            self.bias = None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def flops(self, n_rows: int) -> int:
        return 2 * n_rows * self.d_in * self.d_out


class LSTMLayer(Module):
    """Single recurrent layer; gates ordered input, forget, cell, output."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(hidden)
        self.w_ih = Parameter(uniform(rng, (d_in, 4 * hidden), bound))
        self.w_hh = Parameter(uniform(rng, (hidden, 4 * hidden), bound))
        self.bias = Parameter(uniform(rng, (4 * hidden,), bound))
        self.d_in, self.hidden = d_in, hidden

    def __call__(self, x):
        return T.lstm(x, self.w_ih, self.w_hh, self.bias)

    def flops(self, batch: int, steps: int) -> int:
        return 2 * batch * steps * (self.d_in + self.hidden) * 4 * self.hidden


def lstm_cell(x, h, c, w_ih, w_hh, bias):
    """One LSTM step composed from primitive ops (reference for the fused layer)."""
    H = h.shape[-1]
    z = T.matmul(x, w_ih) + T.matmul(h, w_hh) + bias
    i = T.sigmoid(z[:, :H])
    f = T.sigmoid(z[:, H:2 * H])
    g = T.tanh(z[:, 2 * H:3 * H])
    o = T.sigmoid(z[:, 3 * H:])
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return h_new, c_new


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


# smooth activation keeps finite-difference checks valid everywhere
gelu = T.gelu
