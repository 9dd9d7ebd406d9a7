"""Compare the compiled and numpy LSTM recurrence kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times one forward + backward pass of the recurrence for the shapes that
dominate training (classifier layers and the ST-MAN LSTM) and checks that
both backends agree.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from battrul.tensor import kernels

SHAPES = [
    # (label, batch, steps, hidden)
    ("hs layer, batch 32", 32, 50, 32),
    ("stman lstm, batch 16", 16, 50, 64),
    ("single window", 1, 50, 32),
    ("long sequence", 8, 200, 32),
]


def _step(backend, xp, w_hh, dh):
    h, c, gates = backend.lstm_forward(xp, w_hh)
    return backend.lstm_backward(dh, gates, c, w_hh)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20, help="timed calls per shape (best of 3 rounds)")
    args = ap.parse_args()
    py = kernels.get_backend("python")
    try:
        cy = kernels.get_backend("cython")
    except ImportError:
        print("compiled extension not built; nothing to compare (run pip install -e . --no-build-isolation)")
        return
    print(f"import-time backend: {kernels.BACKEND}")
    print(f"{'shape':<24}{'B':>4}{'T':>5}{'H':>5}{'numpy ms':>11}{'cython ms':>11}{'speedup':>9}{'max diff':>11}")
    for label, B, Tn, H in SHAPES:
        rng = np.random.default_rng(0)
        xp = rng.normal(size=(B, Tn, 4 * H))
        w_hh = rng.normal(size=(H, 4 * H)) / np.sqrt(H)
        dh = rng.normal(size=(B, Tn, H))
        diff = float(np.max(np.abs(_step(py, xp, w_hh, dh) - _step(cy, xp, w_hh, dh))))
        times = []
        for backend in (py, cy):
            t = min(timeit.repeat(lambda: _step(backend, xp, w_hh, dh), number=args.repeat, repeat=3))
            times.append(1e3 * t / args.repeat)
        print(f"{label:<24}{B:>4}{Tn:>5}{H:>5}{times[0]:>11.3f}{times[1]:>11.3f}"
              f"{times[0] / times[1]:>8.1f}x{diff:>11.1e}")


if __name__ == "__main__":
    main()
