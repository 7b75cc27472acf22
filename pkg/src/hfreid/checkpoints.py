"""Single-file checkpoint format: JSON manifest line + flat binary blob.

The first line is compact JSON: metadata plus a list of entries
{name, shape, dtype, offset} with byte offsets into the little-endian blob
that follows the newline. Arrays are row-major.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save(path, arrays, metadata=None):
    """Write named arrays and JSON-serializable metadata to one file."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        arr = arr.astype(_DTYPES[dtype])
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": dtype, "offset": offset})
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"metadata": metadata or {}, "entries": entries},
                        separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def load(path):
    """Returns (arrays dict, metadata dict)."""
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    head = json.loads(raw[:nl].decode("utf-8"))
    blob = raw[nl + 1:]
    arrays = {}
    for e in head["entries"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, head["metadata"]
