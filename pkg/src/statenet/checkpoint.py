"""Parameter checkpoint format.

A checkpoint file is: 5-byte magic, little-endian uint64 header length,
a UTF-8 JSON header, then one raw little-endian blob holding every tensor
back to back. The header carries per-tensor shape/dtype/offset plus an
arbitrary JSON `meta` block (architecture tag, config, montage, ...).
Round-trips are bit-exact: saving a loaded checkpoint reproduces the
original file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import ParamSet

MAGIC = b"SNCK1"

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


def save_params(path, params: ParamSet, meta: dict | None = None) -> None:
    """Write a ParamSet (values, order, trainability) plus metadata."""
    entries = []
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPE_TAGS:
            raise ValueError(f"unsupported checkpoint dtype: {dtype_name}")
        raw = arr.astype(_DTYPE_TAGS[dtype_name]).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype_name,
            "offset": offset,
            "trainable": bool(t.requires_grad),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {"tensors": entries, "meta": meta or {}}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)


def load_params(path) -> tuple[ParamSet, dict]:
    """Read a checkpoint; returns (params, meta)."""
    path = Path(path)
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    hlen = int(np.frombuffer(data, dtype="<u8", count=1, offset=len(MAGIC))[0])
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    blob = data[start + hlen:]
    params = ParamSet()
    for entry in header["tensors"]:
        tag = _DTYPE_TAGS[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=tag, count=count,
                            offset=entry["offset"]).reshape(shape)
        params.add(entry["name"], arr.copy(), trainable=entry["trainable"])
    return params, header["meta"]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
