"""Dense tensor container and the small numeric kernels shared by every stage.

Values are stored as 32-bit floats; reductions (pooling means, dot products)
accumulate in 64 bits so that the pooling/heatmap consistency checks stay
tight.
"""

from __future__ import annotations

from typing import Iterable, Union

import numpy as np

# Norms below this are treated as degenerate: similarity against them is
# undefined (returned as None), never coerced to zero.
NORM_EPS = 1e-12

ArrayLike = Union["Tensor", np.ndarray, Iterable]


class Tensor:
    """Immutable dense float32 tensor of rank 1 to 3, row-major.

    The underlying buffer is contiguous and marked read-only; ``data``
    hands out a read-only ndarray view, so instances are safe to share
    across threads.
    """

    __slots__ = ("_data",)

    def __init__(self, values: ArrayLike):
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim < 1 or arr.ndim > 3:
            raise ValueError(f"tensor rank must be 1..3, got {arr.ndim}")
        if any(extent < 1 for extent in arr.shape):
            raise ValueError(f"all extents must be >= 1, got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self._data = arr

    @property
    def dims(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def rank(self) -> int:
        return self._data.ndim

    @property
    def data(self) -> np.ndarray:
        """Read-only float32 ndarray view of the payload."""
        return self._data

    def __len__(self) -> int:
        return self._data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims})"


def as_array(values: ArrayLike, rank: int | None = None) -> np.ndarray:
    """Coerce a Tensor or array-like to a float ndarray, checking rank.

    Tensor payloads stay float32; other inputs keep their precision (so
    float64 intermediates are not silently quantized).
    """
    arr = values.data if isinstance(values, Tensor) else np.asarray(values)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if rank is not None and arr.ndim != rank:
        raise ValueError(f"expected rank {rank}, got rank {arr.ndim}")
    return arr


def gap(maps: ArrayLike) -> Tensor:
    """Global average pooling: spatial mean of an H x W x d stack.

    out[k] = mean over all (h, w) of maps[h, w, k], accumulated in float64.
    """
    arr = as_array(maps, rank=3)
    pooled = arr.mean(axis=(0, 1), dtype=np.float64)
    return Tensor(pooled)


def cosine(a: ArrayLike, b: ArrayLike) -> float | None:
    """Cosine similarity of two equal-length vectors.

    Returns None (undefined) when either vector's norm falls below
    ``NORM_EPS``; callers must propagate that, not treat it as 0.
    """
    va = as_array(a, rank=1).astype(np.float64)
    vb = as_array(b, rank=1).astype(np.float64)
    if va.shape != vb.shape:
        raise ValueError(f"length mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na < NORM_EPS or nb < NORM_EPS:
        return None
    value = float(np.dot(va, vb) / (na * nb))
    return min(1.0, max(-1.0, value))


def rank_desc(scores: ArrayLike, key: str = "signed") -> np.ndarray:
    """Indices of ``scores`` sorted descending by ``key``.

    key is "signed" (raw values) or "absolute" (magnitudes). The sort is
    stable, so ties resolve to the lower index first; the result is a
    permutation of 0..n-1.
    """
    values = as_array(scores, rank=1).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("scores must be finite")
    if key == "signed":
        keyed = values
    elif key == "absolute":
        keyed = np.abs(values)
    else:
        raise ValueError(f"unknown rank key {key!r}")
    return np.argsort(-keyed, kind="stable")
