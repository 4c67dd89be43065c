"""Binary checkpoint format shared by the collaborative encoders and the LM.

Layout (all integers little-endian):

    magic   4 bytes  b"HREC"
    version u32      currently 1
    count   u32      number of named matrices
    per matrix:
        name_len u32, name utf-8 bytes
        ndim     u32, dims u64 * ndim
        data     float32 * prod(dims), row-major

A JSON metadata sidecar is written next to the binary file at
``<path>.json`` (model kind, dimensions, training config, hashes, whatever
the caller passes).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"HREC"
VERSION = 1


def save_checkpoint(path, matrices: dict, metadata: dict | None = None) -> None:
    """Write named float32 matrices plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(matrices)))
        for name, mat in matrices.items():
            arr = np.ascontiguousarray(mat, dtype="<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes(order="C"))
    sidecar = dict(metadata or {})
    sidecar.setdefault("format_version", VERSION)
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Read a checkpoint; returns (matrices, metadata)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        matrices = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            matrices[name] = np.array(data)  # own the memory
    sidecar_path = Path(str(path) + ".json")
    metadata = {}
    if sidecar_path.exists():
        with open(sidecar_path) as f:
            metadata = json.load(f)
    return matrices, metadata


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
