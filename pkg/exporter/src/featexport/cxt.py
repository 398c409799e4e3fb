"""Writer for the CXT1 tensor blob format consumed by the evaluation toolkit.

Layout, all multi-byte integers little-endian:

    magic   4 bytes  b"CXT1"
    rank    u32      1..3
    dims    u32 x rank
    data    f32 x product(dims), row-major
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CXT1"


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    if arr.ndim < 1 or arr.ndim > 3:
        raise ValueError(f"rank must be 1..3, got {arr.ndim}")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f4", copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a CXT1 blob")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims))
    if len(raw) != offset + 4 * count:
        raise ValueError(f"{path}: payload length mismatch")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
