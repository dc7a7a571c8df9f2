"""Checkpoint container: a JSON manifest line followed by raw float64 blobs.

Layout::

    {"format": "cgsolver-checkpoint", "version": 1, "config": {...},
     "tensors": [{"name": ..., "shape": [...], "dtype": "f64", "byte_offset": k}, ...]}\\n
    <little-endian float64 blob 0><blob 1>...

``byte_offset`` counts from the first byte after the manifest newline.
"""

import json
from pathlib import Path

import numpy as np

from .exceptions import ParseError

FORMAT = "cgsolver-checkpoint"
VERSION = 1
_LE_F64 = np.dtype("<f8")


def save_checkpoint(path, tensors, config=None):
    """Write ``tensors`` (name -> array) and a flat ``config`` dict to ``path``."""
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = np.array(value, dtype=_LE_F64, order="C")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f64", "byte_offset": offset}
        )
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "config": config or {}, "tensors": entries}
    header = json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n"
    Path(path).write_bytes(header + b"".join(blobs))


def load_checkpoint(path):
    """Return ``(tensors, config)`` from a container written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise ParseError(f"{path}: missing manifest terminator")
    try:
        manifest = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: bad manifest ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise ParseError(f"{path}: not a {FORMAT} file")
    body = memoryview(raw)[end + 1:]
    tensors = {}
    for entry in manifest["tensors"]:
        if entry.get("dtype") != "f64":
            raise ParseError(f"{path}: unsupported dtype {entry.get('dtype')!r} for {entry['name']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["byte_offset"]
        stop = start + 8 * count
        if stop > len(body):
            raise ParseError(f"{path}: blob for {entry['name']} runs past end of file")
        arr = np.frombuffer(body[start:stop], dtype=_LE_F64).astype(np.float64).reshape(shape)
        tensors[entry["name"]] = arr
    return tensors, manifest.get("config", {})
