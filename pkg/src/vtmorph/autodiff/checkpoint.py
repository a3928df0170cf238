"""Versioned checkpoint container.

Layout: the ASCII magic ``VTMORPH-CKPT-1`` and a newline, an 8-byte
little-endian header length, a UTF-8 JSON header (metadata plus a tensor
index of name, dtype, shape, byte offset), then the raw little-endian
tensor bytes in index order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"VTMORPH-CKPT-1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    index = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        index.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": index}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a VTMORPH-CKPT-1 checkpoint")
    pos = len(MAGIC)
    try:
        (hlen,) = struct.unpack_from("<Q", buf, pos)
        header = json.loads(buf[pos + 8 : pos + 8 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    base = pos + 8 + hlen
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + count * dtype.itemsize > len(buf):
            raise CheckpointError(f"truncated tensor {entry['name']!r} in {path}")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return tensors, header["meta"]
