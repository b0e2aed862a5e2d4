"""Parameter blobs: little-endian float32 payload plus a JSON header.

``<stem>.bin`` holds the arrays back to back; ``<stem>.json`` holds
``{"format", "tensors": [{"name", "shape", "offset"}], ...metadata}`` with
byte offsets into the payload.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "vitdae-checkpoint/1"
_DTYPE = np.dtype("<f4")


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".bin", ".json") else p


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``arrays`` in insertion order; returns the ``.bin`` path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"refusing to save non-finite values in {name}")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = dict(meta or {})
    header["format"] = FORMAT
    header["tensors"] = entries
    header["nbytes"] = offset
    bin_path = stem.with_suffix(".bin")
    bin_path.write_bytes(b"".join(chunks))
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return bin_path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("format") != FORMAT:
        raise ValueError(f"{stem}: unknown checkpoint format {header.get('format')!r}")
    blob = stem.with_suffix(".bin").read_bytes()
    if len(blob) != header["nbytes"]:
        raise ValueError(f"{stem}.bin: expected {header['nbytes']} bytes, found {len(blob)}")
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float32)
    return arrays, header


def read_header(path) -> dict:
    return json.loads(_stem(path).with_suffix(".json").read_text())
