"""Versioned, byte-stable container for model parameters and configuration.

Layout on disk::

    b"BLCK" | u32 version | u64 header length | header (UTF-8 JSON, sorted keys) | array data

The header lists each array's name, shape and byte offset; array data is
little-endian float32 (int64 for integer arrays) in header order. Equal inputs
give identical bytes, so file digests can be compared across reruns.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

MAGIC = b"BLCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    meta: Dict[str, Any] = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        table = []
        blobs = []
        offset = 0
        for name in sorted(self.arrays):
            arr = np.asarray(self.arrays[name])
            if np.issubdtype(arr.dtype, np.integer):
                data = arr.astype("<i8").tobytes()
                dt = "int64"
            else:
                data = arr.astype("<f4").tobytes()
                dt = "float32"
            table.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
        header = json.dumps({"kind": self.kind, "meta": self.meta, "arrays": table}, sort_keys=True,
                            separators=(",", ":"), allow_nan=False).encode("utf-8")
        return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<IQ", raw[4:16])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        base = 16 + hlen
        arrays = {}
        for entry in header["arrays"]:
            start = base + entry["offset"]
            dt = "<i8" if entry["dtype"] == "int64" else "<f4"
            buf = raw[start : start + entry["nbytes"]]
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(entry["shape"]).copy()
        return cls(header["kind"], header["meta"], arrays)

    def save(self, path) -> str:
        raw = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(raw)
        return hashlib.sha256(raw).hexdigest()

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def expect(self, kind: str) -> "Checkpoint":
        if self.kind != kind:
            raise CheckpointError(f"expected a {kind!r} checkpoint, got {self.kind!r}")
        return self
