"""Flat binary tensor container with a versioned JSON manifest.

Used for model checkpoints and the feature cache. Layout:

    magic line  b"SPURGENPACK 1\\n"
    8 bytes     big-endian length of the manifest JSON
    manifest    UTF-8 JSON: {"version": 1, "metadata": {...},
                 "entries": [{"name", "dtype", "shape", "offset", "nbytes"}]}
    payload     raw little-endian C-order array bytes, concatenated in
                entry order

Bytes are a pure function of (arrays, metadata): no timestamps, keys
sorted, entries in insertion order. Writes go through a temp file and
rename so readers never see partial files.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"SPURGENPACK 1\n"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write bytes to path via a temp file in the same directory + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Serialize named arrays plus a metadata dict to a single file."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype.name!r} for entry {name!r}")
        blob = arr.astype(_DTYPES[arr.dtype.name], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": FORMAT_VERSION,
        "metadata": metadata or {},
        "entries": entries,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join([MAGIC, len(header).to_bytes(8, "big"), header] + blobs)
    atomic_write_bytes(path, payload)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; returns (arrays in stored order, metadata)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a spurgen tensor container")
    pos = len(MAGIC)
    header_len = int.from_bytes(raw[pos : pos + 8], "big")
    pos += 8
    manifest = json.loads(raw[pos : pos + header_len].decode("utf-8"))
    if manifest["version"] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {manifest['version']}")
    base = pos + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        start = base + entry["offset"]
        blob = raw[start : start + entry["nbytes"]]
        arr = np.frombuffer(blob, dtype=_DTYPES[entry["dtype"]]).astype(entry["dtype"], copy=True)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return arrays, manifest["metadata"]
