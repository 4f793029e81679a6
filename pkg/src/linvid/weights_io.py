"""Flat little-endian weight files with a JSON header.

Layout::

    bytes 0..3    magic  b"LVW1"
    bytes 4..11   header length N, unsigned 64-bit little-endian
    bytes 12..    N bytes of UTF-8 JSON:
                  {"meta": {...},
                   "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    then          raw tensor data; ``offset`` counts from the first data byte

``dtype`` is ``"float32"``, ``"float64"`` or ``"int64"``; data is C-order,
little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LVW1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_weights(path, tensors, meta=None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if hasattr(tensors[name], "detach"):
            arr = tensors[name].detach().cpu().numpy()
        key = str(arr.dtype)
        if key not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr).astype(_DTYPES[key]).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs))


def load_weights(path):
    """Returns ``(tensors, meta)`` with numpy arrays."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a weight file")
    (n,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12 : 12 + n])
    base = 12 + n
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise ValueError(f"{path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(data, dtype=_DTYPES[e["dtype"]], count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        out[e["name"]] = arr.astype(e["dtype"]).reshape(e["shape"])
    return out, header["meta"]


def save_module(path, module, meta=None):
    save_weights(path, {k: v for k, v in module.state_dict().items()}, meta)


def load_module(path, module):
    import torch

    tensors, meta = load_weights(path)
    module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    return meta
