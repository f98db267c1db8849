"""Parameter checkpoints: a JSON manifest beside a little-endian float32 blob.

The manifest lists every array in write order with its shape and byte
offset, so the blob can be read without Python pickling.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint"]

FORMAT = "anisoseg-checkpoint-1"


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``arrays`` in mapping order.  ``path`` names the manifest; the blob gets ``.bin``."""
    manifest_path = Path(path)
    blob_path = manifest_path.with_suffix(".bin")
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "dtype": "f32", "offset": offset, "nbytes": data.nbytes})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {"format": FORMAT, "blob": blob_path.name, "entries": entries, "meta": meta or {}}
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=2))
    blob_path.write_bytes(b"".join(chunks))
    return manifest_path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``; arrays are float32 in manifest order."""
    manifest_path = Path(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"])
        arrays[e["name"]] = flat.reshape(e["shape"]).astype(np.float32)
    return arrays, manifest.get("meta", {})
