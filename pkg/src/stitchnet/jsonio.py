"""Canonical JSON serialization with lossless numpy array payloads.

Arrays round-trip bit-exactly: dtype string, shape, and a base64 copy of the
raw little-endian bytes. Canonical dumps (sorted keys, fixed separators) make
save/load/save byte-identical and give stable config hashes.
"""

from __future__ import annotations

import base64
import hashlib
import json

import numpy as np


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return {
        "dtype": a.dtype.str,
        "shape": [int(d) for d in a.shape],
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype=np.dtype(d["dtype"]))
    return a.reshape(d["shape"]).copy()


def canonical_dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def dump_file(obj, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(canonical_dumps(obj))


def load_file(path):
    with open(path, "r", encoding="ascii") as fh:
        return json.load(fh)


def config_hash(obj) -> str:
    """Stable sha256 of any JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
