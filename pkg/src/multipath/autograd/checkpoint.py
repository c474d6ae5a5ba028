"""Parameter checkpoints.

Layout: 8-byte little-endian header length, a UTF-8 JSON header, then the
tensors as contiguous little-endian float32 values. The header lists each
entry's name, shape and byte offset (relative to the start of the data
block) and carries a free-form ``meta`` object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Optional, Tuple

import numpy as np

MAGIC = "multipath-ckpt-v1"


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        data = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(data.shape), "offset": offset,
                        "nbytes": data.nbytes})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"format": MAGIC, "params": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Tuple[dict, dict]:
    """Return ``(arrays, meta)``; arrays are float32."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    base = 8 + hlen
    arrays = {}
    for e in header["params"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ValueError(f"{path}: truncated data for {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
    return arrays, header.get("meta", {})
