"""Parameter checkpoints: one flat little-endian f64 file plus a JSON manifest."""

from __future__ import annotations

import json
import os

import numpy as np

from .datakit import _atomic_write
from .errors import ParseError

__all__ = ["save_checkpoint", "load_checkpoint"]


def save_checkpoint(path, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray, order preserved) to ``path`` and ``path.json``."""
    entries, chunks, offset = [], [], 0
    for name, a in arrays.items():
        a = np.asarray(a, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size * 8
    manifest = {"format": "ktraj-f64", "version": 1, "nbytes": offset,
                "arrays": entries, "meta": meta or {}}
    _atomic_write(path, b"".join(chunks))
    _atomic_write(os.fspath(path) + ".json", json.dumps(manifest, indent=1, sort_keys=True), mode="w")


def load_checkpoint(path):
    """Return ``(arrays, meta)``."""
    with open(os.fspath(path) + ".json") as fh:
        text = fh.read()
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad checkpoint manifest: {exc.msg}", exc.pos) from exc
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) != manifest["nbytes"]:
        raise ParseError(f"checkpoint holds {len(buf)} bytes, manifest says {manifest['nbytes']}",
                         min(len(buf), manifest["nbytes"]))
    arrays = {}
    for e in manifest["arrays"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape))
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8", count=n, offset=e["offset"]).reshape(shape).copy()
    return arrays, manifest.get("meta", {})
