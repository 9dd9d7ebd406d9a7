from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from battrul.tensor.core import Tensor, no_grad


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
               fraction: float = 1.0, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is re-evaluated with each input element perturbed by ``±h``;
    the error per element is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    Every input must have ``requires_grad`` set.

    With ``fraction < 1`` only a random subset of the elements of each input
    is probed (at least one per input), drawn from ``rng``. Repeating the
    check over many seeds then covers every element at a fraction of the cost.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require grad")
        t.data = np.ascontiguousarray(t.data)
        t.zero_grad()
    f().backward()
    analytic = [t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            n = t.data.size
            if fraction < 1.0:
                idx = rng.choice(n, size=max(1, int(round(fraction * n))), replace=False)
            else:
                idx = range(n)
            worst = max(worst, _scan(f, t, ga, h, idx))
    return worst


def _scan(f, t: Tensor, analytic: np.ndarray, h: float, idx) -> float:
    flat = t.data.reshape(-1)
    gflat = analytic.reshape(-1)
    worst = 0.0
    for k in idx:
        orig = flat[k]
        flat[k] = orig + h
        fp = f().item()
        flat[k] = orig - h
        fm = f().item()
        flat[k] = orig
        numeric = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(gflat[k] - numeric) / max(1e-8, abs(numeric)))
    return worst
