"""Simple deterministic named-tensor file container.

Layout: 8-byte magic, uint64 little-endian header length, UTF-8 JSON header,
then the raw tensor payload (C-order, little-endian). The header records a
sha256 of the payload so readers can verify integrity. Writing the same
tensors and metadata twice yields byte-identical files, which the pipeline
relies on for its determinism checks.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CSEGTNS1"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_tensors(path, tensors: dict, meta: dict | None = None) -> str:
    """Write named numpy arrays plus a JSON meta block. Returns the payload sha256."""
    index = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload += raw
    payload = bytes(payload)
    payload_sha = sha256_bytes(payload)
    header = {
        "meta": meta or {},
        "tensors": index,
        "payload_sha256": payload_sha,
    }
    header_bytes = canonical_json(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    return payload_sha


def load_tensors(path, verify: bool = True):
    """Read a container written by save_tensors. Returns (tensors, meta)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor container (bad magic)")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    if verify and sha256_bytes(payload) != header["payload_sha256"]:
        raise ValueError(f"{path}: payload hash mismatch")
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]
