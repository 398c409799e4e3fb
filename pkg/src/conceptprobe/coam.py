"""Concept activation maps: channel-weighted feature maps, upsampling, rendering.

The map for concept j is the depth-wise mean of the pre-pooling feature maps
weighted by that concept's direction:

    map_j(h, w) = (1/d) * sum_k direction_j[k] * features(h, w, k)

so the spatial mean of map_j equals the projected concept value divided by
the depth; that identity is the module's principal correctness gate.

Upsampling uses bilinear interpolation with half-pixel centers: output pixel
(r, c) samples source coordinate ((r+0.5)*H/M1 - 0.5, (c+0.5)*W/M2 - 0.5),
clamped to the valid range. The mapping is exact for constant inputs and
never produces values outside the source range.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .cav import ConceptBank, bank_matrix
from .errors import DataError
from .tensor import Tensor, as_array

# Piecewise-linear "jet" lookup, fixed here so renders are bit-stable across
# plotting libraries: position -> (r, g, b) in [0, 1].
JET_ANCHORS = (
    (0.0, (0.0, 0.0, 0.5)),
    (0.125, (0.0, 0.0, 1.0)),
    (0.375, (0.0, 1.0, 1.0)),
    (0.625, (1.0, 1.0, 0.0)),
    (0.875, (1.0, 0.0, 0.0)),
    (1.0, (0.5, 0.0, 0.0)),
)

RENDER_MODES = ("coloured", "binary")


@dataclass(frozen=True)
class ConceptActivationMap:
    """One (image, concept) pair: the raw H x W map and its upsampled form."""

    image_id: str
    concept_index: int
    raw: Tensor
    upsampled: Tensor


def concept_maps(feature_maps, bank: ConceptBank | Tensor | np.ndarray) -> Tensor:
    """All concept maps for one image, stacked as H x W x num_concepts."""
    maps = as_array(feature_maps, rank=3).astype(np.float64)
    directions = bank_matrix(bank).astype(np.float64)
    depth = maps.shape[2]
    if directions.shape[1] != depth:
        raise DataError(f"bank depth {directions.shape[1]} does not match features depth {depth}")
    stacked = np.tensordot(maps, directions.T, axes=([2], [0])) / depth
    return Tensor(stacked)


def concept_map(feature_maps, direction) -> Tensor:
    """Single concept map: (1/d) * sum_k direction[k] * features(:, :, k)."""
    maps = as_array(feature_maps, rank=3).astype(np.float64)
    vec = as_array(direction, rank=1).astype(np.float64)
    depth = maps.shape[2]
    if vec.shape[0] != depth:
        raise DataError(f"direction length {vec.shape[0]} does not match depth {depth}")
    return Tensor(maps @ vec / depth)


def upsample(raw, target: tuple[int, int]) -> Tensor:
    """Bilinear resize of an H x W map to (rows, cols) with half-pixel centers."""
    src = as_array(raw, rank=2).astype(np.float64)
    rows, cols = int(target[0]), int(target[1])
    if rows < 1 or cols < 1:
        raise DataError(f"target size must be positive, got {(rows, cols)}")
    h, w = src.shape
    if rows < h or cols < w:
        raise DataError(f"target {(rows, cols)} smaller than source {(h, w)}")

    src_r = np.clip((np.arange(rows) + 0.5) * h / rows - 0.5, 0.0, h - 1.0)
    src_c = np.clip((np.arange(cols) + 0.5) * w / cols - 0.5, 0.0, w - 1.0)
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (src_r - r0)[:, None]
    fc = (src_c - c0)[None, :]

    top = src[np.ix_(r0, c0)] * (1.0 - fc) + src[np.ix_(r0, c1)] * fc
    bottom = src[np.ix_(r1, c0)] * (1.0 - fc) + src[np.ix_(r1, c1)] * fc
    return Tensor(top * (1.0 - fr) + bottom * fr)


def build_map(
    image_id: str,
    feature_maps,
    direction,
    image_size: tuple[int, int],
    concept_index: int,
) -> ConceptActivationMap:
    raw = concept_map(feature_maps, direction)
    return ConceptActivationMap(
        image_id=image_id,
        concept_index=concept_index,
        raw=raw,
        upsampled=upsample(raw, image_size),
    )


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map collapses to all zeros."""
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo <= 0.0:
        warnings.warn("degenerate activation map (max == min); treating as all zeros")
        return np.zeros_like(values, dtype=np.float64)
    return (values.astype(np.float64) - lo) / (hi - lo)


def apply_jet(normalized: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] through the fixed jet table; returns float RGB in [0, 1]."""
    positions = np.array([p for p, _ in JET_ANCHORS])
    channels = np.array([rgb for _, rgb in JET_ANCHORS])
    flat = np.clip(normalized, 0.0, 1.0).ravel()
    out = np.stack(
        [np.interp(flat, positions, channels[:, ch]) for ch in range(3)],
        axis=-1,
    )
    return out.reshape(normalized.shape + (3,))


def render(
    activation: ConceptActivationMap | Tensor | np.ndarray,
    image: np.ndarray,
    mode: str = "coloured",
    beta: float = 0.4,
    threshold: float = 0.5,
) -> np.ndarray:
    """Overlay an upsampled map on an RGB uint8 image.

    coloured mode adds beta-scaled jet colors to the image; binary mode
    multiplies the image by the mask of normalized values >= threshold.
    The map is min-max normalized per call, so threshold lives in [0, 1].
    """
    if isinstance(activation, ConceptActivationMap):
        values = activation.upsampled.data
    else:
        values = as_array(activation, rank=2)
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected an RGB image (rows x cols x 3), got shape {img.shape}")
    if img.shape[:2] != values.shape:
        raise DataError(f"image size {img.shape[:2]} does not match map {values.shape}")
    if mode not in RENDER_MODES:
        raise DataError(f"unknown render mode {mode!r}, expected one of {RENDER_MODES}")

    degenerate = float(values.max()) - float(values.min()) <= 0.0
    normalized = normalize_map(values)
    if mode == "binary":
        # A degenerate map masks everything out, even at threshold 0.
        mask = np.zeros_like(normalized) if degenerate else (normalized >= threshold).astype(np.float64)
        out = img.astype(np.float64) * mask[:, :, None]
    else:
        heat = apply_jet(normalized) * 255.0
        out = img.astype(np.float64) + beta * heat
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def save_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def load_rgb(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load an image as RGB uint8, optionally checking its (rows, cols) size."""
    with Image.open(path) as handle:
        img = np.asarray(handle.convert("RGB"))
    if size is not None and img.shape[:2] != tuple(size):
        raise DataError(f"image {path} has size {img.shape[:2]}, expected {tuple(size)}")
    return img
