"""Parameter checkpoints.

A checkpoint is a numpy ``.npz`` archive. Every parameter is stored under
its dotted ``Parameter.name``; the ``.npy`` header of each member carries
dtype (always ``<f8``) and shape. One extra member, ``__meta__``, is a 0-d
unicode array holding a JSON object with at least ``format`` and
``format_version``. Archives load with ``allow_pickle=False``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "battrul-checkpoint"
FORMAT_VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    if META_KEY in state:
        raise CheckpointError(f"parameter name {META_KEY!r} is reserved")
    header = {"format": FORMAT, "format_version": FORMAT_VERSION}
    header.update(meta or {})
    arrays = {k: np.asarray(v, dtype="<f8") for k, v in state.items()}
    arrays[META_KEY] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if META_KEY not in arrays:
        raise CheckpointError(f"{path}: missing {META_KEY} entry")
    meta = json.loads(str(arrays.pop(META_KEY)))
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if meta.get("format_version", 0) > FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {meta['format_version']} is newer than supported")
    return arrays, meta
