"""Backend selection for the hot LSTM recurrence.

The compiled extension is used when it imports; otherwise, or when
``BATTRUL_PURE_PYTHON=1`` is set, the numpy implementation is used.
"""

from __future__ import annotations

import os

from battrul.tensor import _kernels_py

BACKEND = "python"

if os.environ.get("BATTRUL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from battrul.tensor import _lstm_ext as _impl
    except ImportError:
        _impl = _kernels_py
    else:
        BACKEND = "cython"
else:
    _impl = _kernels_py

lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward
sigmoid = _kernels_py.sigmoid


def get_backend(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"`` explicitly."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from battrul.tensor import _lstm_ext

        return _lstm_ext
    raise ValueError(f"unknown kernel backend {name!r}")
