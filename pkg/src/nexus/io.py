"""Container files: a length-prefixed JSON manifest followed by NXTN records.

Layout (all integers little-endian)::

    u64   manifest length L
    L     UTF-8 JSON manifest; ``manifest["tensors"]`` lists
          {"name", "offset", "shape"} with offsets relative to the first record
    ...   concatenated NXTN records

Checkpoints and dataset files both use this layout.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .tensor import tensor_from_bytes, tensor_to_bytes


def write_container(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    records = []
    entries = []
    offset = 0
    for name, arr in arrays.items():
        rec = tensor_to_bytes(arr)
        entries.append({"name": name, "offset": offset, "shape": list(np.shape(arr))})
        records.append(rec)
        offset += len(rec)
    manifest = dict(manifest)
    manifest["tensors"] = entries
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for rec in records:
            fh.write(rec)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise ValueError(f"{path}: truncated container")
    (n,) = struct.unpack("<Q", buf[:8])
    manifest = json.loads(buf[8:8 + n].decode("utf-8"))
    base = 8 + n
    arrays = {}
    for entry in manifest.get("tensors", []):
        arr, _ = tensor_from_bytes(buf, base + entry["offset"])
        if list(arr.shape) != list(entry["shape"]):
            raise ValueError(f"{path}: shape mismatch for {entry['name']}")
        arrays[entry["name"]] = arr
    return manifest, arrays


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
