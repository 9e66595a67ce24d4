"""Named-tensor checkpoint file.

Layout (all integers little-endian)::

    bytes 0..7     magic b"BFCKPT\\x00\\x00"
    bytes 8..11    uint32 format version (currently 1)
    bytes 12..19   uint64 header length N
    bytes 20..     N bytes UTF-8 JSON header:
                   {"version": 1, "config": {...},
                    "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
    then           payload: concatenated float32 little-endian tensors,
                   ``offset`` counted from the start of the payload

The config is whatever the writer wants echoed for self-description; the
training harness stores the full experiment config and ablation switches.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import DataError

MAGIC = b"BFCKPT\x00\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], config: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        blob = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": VERSION, "config": config or {}, "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, config)``; raises :class:`DataError` on any corruption."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise DataError(f"{path}: truncated checkpoint prefix at byte offset {len(raw)}")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic at byte offset 0")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version} at byte offset 8")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise DataError(f"{path}: header runs past end of file at byte offset {len(raw)}")
    try:
        header = json.loads(raw[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise DataError(f"{path}: corrupt header at byte offset {start + pos}") from exc
    payload = memoryview(raw)[start + hlen:]
    tensors = {}
    for e in header.get("tensors", []):
        n = int(np.prod(e["shape"], dtype=np.int64)) * 4
        if e["nbytes"] != n or e["offset"] + n > len(payload):
            raise DataError(
                f"{path}: tensor {e['name']} payload inconsistent at byte offset "
                f"{start + hlen + e['offset']}"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return tensors, header.get("config", {})
