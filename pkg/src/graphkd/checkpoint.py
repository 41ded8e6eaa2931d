"""Versioned binary checkpoint container.

Layout: 4-byte magic, little-endian uint32 format version, uint64 header
length, a UTF-8 JSON header (config hash, metadata, ordered array entries),
then each array's raw little-endian bytes in entry order. Only float64 and
int64 payloads are allowed so a round trip is bitwise exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"GKDC"
VERSION = 1
_DTYPES = {"<f8", "<i8"}


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical (sorted-key) JSON form of a config dict."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path: str, arrays: dict, cfg_hash: str, meta: dict = None):
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8", copy=False)
        else:
            raise ValueError(f"array {name!r} has unsupported dtype {arr.dtype}")
        entries.append({"name": name, "dtype": arr.dtype.str,
                        "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({
        "config_hash": cfg_hash,
        "meta": meta or {},
        "entries": entries,
    }).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str, expected_hash: str = None,
                    force: bool = False) -> dict:
    """Returns {"arrays", "meta", "config_hash"}; verifies the config hash.

    A hash mismatch is an error unless ``force`` is set.
    """
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode())
        if expected_hash is not None and header["config_hash"] != expected_hash:
            if not force:
                raise ValueError(
                    "checkpoint was written under a different config "
                    f"(hash {header['config_hash'][:12]}… vs expected "
                    f"{expected_hash[:12]}…); pass force to load anyway"
                )
        arrays = {}
        for entry in header["entries"]:
            if entry["dtype"] not in _DTYPES:
                raise ValueError(f"unsupported payload dtype {entry['dtype']}")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            flat = np.frombuffer(
                fh.read(count * 8), dtype=entry["dtype"], count=count)
            arrays[entry["name"]] = flat.reshape(entry["shape"]).copy()
    return {"arrays": arrays, "meta": header["meta"],
            "config_hash": header["config_hash"]}
