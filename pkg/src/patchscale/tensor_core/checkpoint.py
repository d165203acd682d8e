"""Single-file checkpoints: a JSON manifest followed by raw little-endian buffers.

Layout::

    b"PSCKPT\\0\\0"  | u32 version | u64 manifest length | manifest (UTF-8 JSON) | buffers

The manifest lists ``name``, ``shape``, ``dtype`` and ``offset`` (relative to
the start of the buffer section) for every tensor, plus free-form ``meta``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSCKPT\0\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        buf = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    manifest = json.dumps({"version": VERSION, "tensors": entries, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic at byte 0)")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    version, mlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(raw[20:20 + mlen].decode())
    base = 20 + mlen
    out = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        end = start + e["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: tensor {e['name']} needs bytes {start}..{end}, file has {len(raw)}")
        arr = np.frombuffer(raw[start:end], dtype=np.dtype(e["dtype"]))
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return out, manifest.get("meta", {})
