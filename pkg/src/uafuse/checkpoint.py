"""The "UAF1" parameter container.

Layout::

    b"UAF1"
    uint32 (LE)   manifest length in bytes
    manifest      UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset"}, ...]}
    payload       little-endian float32 data; offsets are byte offsets into the payload

Tensors are written in sorted name order so identical contents give identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UAF1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a UAF1 checkpoint (magic {raw[:4]!r})")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<I", raw[4:8])
    try:
        manifest = json.loads(raw[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    payload = raw[8 + mlen:]
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 4
        start = e["offset"]
        if start + n > len(payload):
            raise CheckpointError(f"{path}: payload truncated at tensor {e['name']!r}")
        out[e["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=start).reshape(e["shape"]).astype(np.float32)
    return out, manifest["meta"]
