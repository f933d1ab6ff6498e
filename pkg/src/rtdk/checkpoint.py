"""Versioned binary checkpoint format: JSON tensor manifest + raw payload.

Layout: 8-byte magic, uint32 format version, uint64 manifest length, the
UTF-8 JSON manifest, then the concatenated little-endian tensor payloads.
The manifest records name/dtype/shape/offset per tensor plus a free-form
``meta`` dict used to rebuild the owning module before shape validation.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"RTDKCKPT"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<8sIQ")


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays to ``path``; insertion order is preserved."""
    entries = []
    payload = bytearray()
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value))
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    manifest = json.dumps({
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "meta": meta or {},
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        fh.write(payload)


def load_tensors(path) -> tuple[dict, dict]:
    """Read a checkpoint, returning (name -> ndarray, meta)."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, manifest_len = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    manifest_end = _HEADER.size + manifest_len
    try:
        manifest = json.loads(blob[_HEADER.size:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    payload = blob[manifest_end:]
    tensors = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']}")
        arr = np.frombuffer(payload, dtype=np.dtype(entry["dtype"]).newbyteorder("<"),
                            count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
                            offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"], copy=True)
    return tensors, manifest.get("meta", {})


def validate_shapes(tensors: dict, expected: dict, path="checkpoint") -> None:
    """Check that ``tensors`` has exactly the names and shapes of ``expected``."""
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {extra}")
    for name, shape in expected.items():
        got = tuple(tensors[name].shape)
        if got != tuple(shape):
            raise CheckpointError(
                f"{path}: tensor {name} has shape {got}, expected {tuple(shape)}")
