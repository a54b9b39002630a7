"""Single-file binary checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header, then raw little-endian tensor payloads at the offsets recorded in
the header (relative to the payload start). Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"GVITCKP1"


def save_checkpoint(path, config_dict, tensors):
    """``tensors``: name -> Tensor or ndarray; written in name order given."""
    index = []
    payloads = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(getattr(t, "data", t))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": arr.dtype.name, "offset": offset,
                      "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"format": 1, "config": config_dict,
                         "tensors": index, "payload_bytes": offset},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path):
    """Returns (config_dict, {name: ndarray}). Raises CheckpointError on any
    header/payload mismatch."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    hstart = len(MAGIC) + 8
    if hstart + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = blob[hstart + hlen:]
    if header.get("payload_bytes") != len(payload):
        raise CheckpointError(
            f"{path}: payload size {len(payload)} != header "
            f"{header.get('payload_bytes')}")
    tensors = {}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} payload "
                                  "runs past end of file")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(payload[lo:hi], dtype=dtype)
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(f"{path}: tensor {entry['name']} size "
                                  f"{arr.size} != shape {entry['shape']}")
        tensors[entry["name"]] = np.ascontiguousarray(
            arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("=")))
    return header["config"], tensors
