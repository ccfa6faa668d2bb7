"""Single-file checkpoints: magic, JSON header, raw little-endian float64 payload.

Layout::

    b"ENCKPT\\x00\\x01"            8-byte magic (last byte = format version)
    uint64 little-endian          header length in bytes
    header                        UTF-8 JSON, sorted keys
    payload                       tensors back to back as '<f8', in header order

The header holds ``hyperparameters`` plus a ``tensors`` list of
``{name, shape, offset, count}`` (offset/count in elements).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import BadCheckpoint

MAGIC = b"ENCKPT\x00\x01"
FORMAT_VERSION = 1


def dumps_checkpoint(tensors: Mapping[str, np.ndarray], hyperparameters: Mapping) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name, arr in sorted(tensors.items()):
        a = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "hyperparameters": dict(hyperparameters), "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 16 or blob[:6] != MAGIC[:6]:
        raise BadCheckpoint("not a checkpoint file (bad magic)")
    if blob[7] != FORMAT_VERSION:
        raise BadCheckpoint(f"unsupported checkpoint version {blob[7]}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadCheckpoint(f"corrupt header: {exc}") from None
    payload = np.frombuffer(blob[16 + hlen :], dtype="<f8")
    tensors = {}
    for entry in header.get("tensors", []):
        lo, n = entry["offset"], entry["count"]
        if lo + n > payload.size:
            raise BadCheckpoint(f"tensor {entry['name']} runs past the end of the file")
        tensors[entry["name"]] = payload[lo : lo + n].reshape(entry["shape"]).astype(np.float64)
    return tensors, header.get("hyperparameters", {})


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], hyperparameters: Mapping) -> None:
    Path(path).write_bytes(dumps_checkpoint(tensors, hyperparameters))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise BadCheckpoint(str(exc)) from None
    return loads_checkpoint(blob)
