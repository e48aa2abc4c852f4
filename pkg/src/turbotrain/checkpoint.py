"""Portable parameter checkpoints.

Byte layout::

    offset 0   8 bytes   magic  b"TTCKPT01"
    offset 8   8 bytes   header length H, unsigned little-endian
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          body: little-endian float64 values

The header is ``{"format": 1, "params": [{"name", "shape", "offset",
"count"}...], "meta": {...}}``. ``offset`` is in bytes from the start of the
body and entries appear in body order. ``meta`` is free-form JSON (the
effective run config, stage name, loss summary).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TTCKPT01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, offset = [], 0
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += 8 * arr.size
    header = json.dumps({"format": 1, "params": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    body = b"".join(np.asarray(a, dtype="<f8").tobytes(order="C") for a in params.values())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(body)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    body = data[16 + hlen:]
    params = {}
    for e in header["params"]:
        end = e["offset"] + 8 * e["count"]
        if end > len(body):
            raise CheckpointError(f"{path}: body truncated inside parameter {e['name']!r}")
        arr = np.frombuffer(body[e["offset"]:end], dtype="<f8").astype(np.float64)
        params[e["name"]] = arr.reshape(e["shape"])
    return params, header.get("meta", {})
