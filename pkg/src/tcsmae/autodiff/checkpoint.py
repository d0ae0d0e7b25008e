"""Flat binary parameter checkpoints with a JSON manifest.

``checkpoint.bin`` holds the little-endian float64 arrays back to back in
manifest order; ``manifest.json`` lists name, shape and byte offset for each,
plus an optional free-form ``meta`` block (model configuration).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "tcsmae-checkpoint/1"


def save_checkpoint(params, bin_path, manifest_path=None, meta=None):
    bin_path = Path(bin_path)
    manifest_path = Path(manifest_path) if manifest_path else bin_path.with_name("manifest.json")
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name, value in params.items():
            arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"format": FORMAT, "dtype": "float64-le", "total_bytes": offset,
                "tensors": entries, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return bin_path, manifest_path


def load_checkpoint(bin_path, manifest_path=None):
    """Return ``(arrays, meta)``; arrays keep manifest order."""
    bin_path = Path(bin_path)
    manifest_path = Path(manifest_path) if manifest_path else bin_path.with_name("manifest.json")
    if not bin_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {bin_path}")
    if not manifest_path.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: unsupported checkpoint format {manifest.get('format')!r}")
    raw = bin_path.read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise ValueError(f"{bin_path}: size {len(raw)} does not match manifest ({manifest['total_bytes']})")
    arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return arrays, manifest.get("meta", {})
