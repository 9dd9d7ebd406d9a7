"""Pure-numpy LSTM recurrence. Reference for the compiled kernels."""

from __future__ import annotations

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_forward(xp: np.ndarray, w_hh: np.ndarray):
    """Run the recurrence given pre-projected inputs ``xp = x @ W_ih + b``.

    Returns ``(h, c, gates)`` with shapes ``(B,T,H)``, ``(B,T,H)``,
    ``(B,T,4H)``; ``gates`` holds the post-activation i, f, g, o blocks.
    """
    B, T, H4 = xp.shape
    H = H4 // 4
    h = np.empty((B, T, H))
    c = np.empty((B, T, H))
    gates = np.empty((B, T, H4))
    h_prev = np.zeros((B, H))
    c_prev = np.zeros((B, H))
    for t in range(T):
        z = xp[:, t] + h_prev @ w_hh
        gt = gates[:, t]
        gt[:, :2 * H] = sigmoid(z[:, :2 * H])
        gt[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        gt[:, 3 * H:] = sigmoid(z[:, 3 * H:])
        i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
        c_prev = f * c_prev + i * g
        h_prev = o * np.tanh(c_prev)
        c[:, t] = c_prev
        h[:, t] = h_prev
    return h, c, gates


def lstm_backward(dh: np.ndarray, gates: np.ndarray, c: np.ndarray, w_hh: np.ndarray) -> np.ndarray:
    """Backprop through time; returns dL/dz for the pre-activations ``(B,T,4H)``."""
    B, T, H = dh.shape
    dz = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        gt = gates[:, t]
        i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
        c_prev = c[:, t - 1] if t > 0 else zeros
        tc = np.tanh(c[:, t])
        dht = dh[:, t] + dh_next
        dc = dc_next + dht * o * (1.0 - tc * tc)
        dzt = dz[:, t]
        dzt[:, :H] = dc * g * i * (1.0 - i)
        dzt[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dzt[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dzt[:, 3 * H:] = dht * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dzt @ w_hh.T
    return dz
