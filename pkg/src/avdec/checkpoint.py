"""Binary tensor container used for checkpoints and cached feature files.

Layout (all integers little-endian u32):
    magic  b"DCAV"
    version
    repeated records until EOF:
        name_len, name (utf-8), rank, dims[rank], float32 payload (C order)

Records are written in sorted name order so identical contents produce
identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DCAV"
VERSION = 1


def save_tensors(path, tensors):
    """Write a name -> ndarray mapping; arrays are stored as float32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path):
    """Read a container back into a name -> float32 ndarray dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    out = {}
    off = 8
    total = len(blob)
    while off < total:
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        if name in out:
            raise ValueError(f"{path}: duplicate record {name!r}")
        out[name] = arr.copy()
    return out
