"""On-disk dataset format: a JSON manifest plus one binary tensor blob pair per image.

Directory layout::

    <root>/
      manifest.json
      <image_id>.pregap.cxt      # H x W x d feature maps (before pooling)
      <image_id>.postgap.cxt     # d-vector (after pooling)

Blob format (``CXT1``), all multi-byte integers little-endian:

    magic   4 bytes  b"CXT1"
    rank    u32      1..3
    dims    u32 x rank
    data    f32 x product(dims), row-major (last index fastest)

``manifest.json`` keys:

    num_concepts, num_classes   int
    depth, height, width        feature geometry (d, H, W)
    concept_names               list[str], length num_concepts
    class_names                 list[str], length num_classes
    class_concept_truth         num_concepts x num_classes nested lists,
                                entries in [0, 1] (annotator ground truth)
    part_map                    {concept_index: part name or null}; concepts
                                without a part are excluded from localisation
                                scoring only
    images                      {image_id: {class_label, concept_labels,
                                part_points, image_size, image_path, split}}

Per-image entries: ``concept_labels`` is a 0/1 list of length num_concepts;
``part_points`` maps concept index to [row, col] in original-image pixels;
``split`` is "train" or "test".

Loading validates every record: blob shapes against the manifest, labels in
range, part points inside the image, and pooling consistency (the stored
post-pool vector must equal the spatial mean of the stored maps within
1e-4 absolute). Validation fails fast naming the offending image.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError
from .tensor import Tensor, gap

MAGIC = b"CXT1"
GAP_CONSISTENCY_ATOL = 1e-4

PREGAP_SUFFIX = ".pregap.cxt"
POSTGAP_SUFFIX = ".postgap.cxt"


def write_tensor(path: str | Path, tensor: Tensor) -> None:
    """Serialize a tensor to the CXT1 blob format (bit-exact round trip)."""
    arr = tensor.data
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f4", copy=False).tobytes())


def read_tensor(path: str | Path) -> Tensor:
    """Read a CXT1 blob, validating magic, rank, dims, and payload length."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a CXT1 blob")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank < 1 or rank > 3:
        raise DataError(f"{path}: unsupported rank {rank}")
    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    if any(d < 1 for d in dims):
        raise DataError(f"{path}: invalid dims {dims}")
    count = int(np.prod(dims))
    if len(raw) != header_end + 4 * count:
        raise DataError(f"{path}: payload length mismatch for dims {dims}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=header_end)
    return Tensor(data.reshape(dims))


@dataclass(frozen=True)
class ImageEntry:
    """Manifest metadata for one image (everything except the blobs)."""

    class_label: int
    concept_labels: tuple[int, ...]
    part_points: dict[int, tuple[int, int]]
    image_size: tuple[int, int]
    image_path: str | None
    split: str


@dataclass(frozen=True)
class FeatureRecord:
    """One image's features plus its labels and part annotations."""

    image_id: str
    pre_gap: Tensor
    post_gap: Tensor
    class_label: int
    concept_labels: tuple[int, ...]
    part_points: dict[int, tuple[int, int]]
    image_size: tuple[int, int]
    image_path: str | None
    split: str

    @property
    def active_concepts(self) -> tuple[int, ...]:
        """Indices of concepts annotated present (label bit set)."""
        return tuple(j for j, bit in enumerate(self.concept_labels) if bit)


@dataclass
class Manifest:
    num_concepts: int
    num_classes: int
    depth: int
    height: int
    width: int
    concept_names: list[str]
    class_names: list[str]
    class_concept_truth: np.ndarray  # num_concepts x num_classes, float32
    part_map: dict[int, str | None]
    images: dict[str, ImageEntry] = field(default_factory=dict)

    def validate(self) -> None:
        L, K = self.num_concepts, self.num_classes
        if len(self.concept_names) != L:
            raise DataError(f"manifest: {len(self.concept_names)} concept names, expected {L}")
        if len(self.class_names) != K:
            raise DataError(f"manifest: {len(self.class_names)} class names, expected {K}")
        truth = np.asarray(self.class_concept_truth, dtype=np.float32)
        if truth.shape != (L, K):
            raise DataError(f"manifest: ground truth shape {truth.shape}, expected {(L, K)}")
        if truth.size and (truth.min() < 0.0 or truth.max() > 1.0):
            raise DataError("manifest: ground truth entries must lie in [0, 1]")
        for j in self.part_map:
            if not 0 <= j < L:
                raise DataError(f"manifest: part_map concept index {j} out of range")
        for image_id, entry in self.images.items():
            if not 0 <= entry.class_label < K:
                raise DataError(f"{image_id}: class label {entry.class_label} out of range [0,{K})")
            if len(entry.concept_labels) != L:
                raise DataError(
                    f"{image_id}: {len(entry.concept_labels)} concept labels, expected {L}"
                )
            if any(bit not in (0, 1) for bit in entry.concept_labels):
                raise DataError(f"{image_id}: concept labels must be 0/1")
            if entry.split not in ("train", "test"):
                raise DataError(f"{image_id}: unknown split {entry.split!r}")
            m1, m2 = entry.image_size
            for j, (row, col) in entry.part_points.items():
                if not 0 <= j < L:
                    raise DataError(f"{image_id}: part point concept index {j} out of range")
                if not (0 <= row < m1 and 0 <= col < m2):
                    raise DataError(
                        f"{image_id}: part point {(row, col)} outside image {entry.image_size}"
                    )

    def to_json_dict(self) -> dict:
        return {
            "num_concepts": self.num_concepts,
            "num_classes": self.num_classes,
            "depth": self.depth,
            "height": self.height,
            "width": self.width,
            "concept_names": list(self.concept_names),
            "class_names": list(self.class_names),
            "class_concept_truth": np.asarray(self.class_concept_truth, dtype=np.float64)
            .round(9)
            .tolist(),
            "part_map": {str(j): name for j, name in sorted(self.part_map.items())},
            "images": {
                image_id: {
                    "class_label": entry.class_label,
                    "concept_labels": list(entry.concept_labels),
                    "part_points": {
                        str(j): list(point) for j, point in sorted(entry.part_points.items())
                    },
                    "image_size": list(entry.image_size),
                    "image_path": entry.image_path,
                    "split": entry.split,
                }
                for image_id, entry in sorted(self.images.items())
            },
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Manifest":
        try:
            images = {
                image_id: ImageEntry(
                    class_label=int(raw["class_label"]),
                    concept_labels=tuple(int(b) for b in raw["concept_labels"]),
                    part_points={
                        int(j): (int(p[0]), int(p[1]))
                        for j, p in raw.get("part_points", {}).items()
                    },
                    image_size=(int(raw["image_size"][0]), int(raw["image_size"][1])),
                    image_path=raw.get("image_path"),
                    split=str(raw["split"]),
                )
                for image_id, raw in doc["images"].items()
            }
            manifest = cls(
                num_concepts=int(doc["num_concepts"]),
                num_classes=int(doc["num_classes"]),
                depth=int(doc["depth"]),
                height=int(doc["height"]),
                width=int(doc["width"]),
                concept_names=[str(s) for s in doc["concept_names"]],
                class_names=[str(s) for s in doc["class_names"]],
                class_concept_truth=np.asarray(doc["class_concept_truth"], dtype=np.float32),
                part_map={int(j): name for j, name in doc.get("part_map", {}).items()},
                images=images,
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise DataError(f"manifest: malformed field ({exc})") from exc
        manifest.validate()
        return manifest


def dump_json(path: str | Path, doc: dict) -> None:
    """Canonical JSON writer: sorted keys, fixed layout, trailing newline."""
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


class Dataset:
    """A validated dataset rooted at one directory. Immutable after open."""

    def __init__(self, root: str | Path, manifest: Manifest):
        self.root = Path(root)
        self.manifest = manifest

    @classmethod
    def open(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        manifest_path = root / "manifest.json"
        if not manifest_path.is_file():
            raise DataError(f"missing manifest: {manifest_path}")
        try:
            doc = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
        return cls(root, Manifest.from_json_dict(doc))

    def image_ids(self, split: str | None = None) -> list[str]:
        ids = sorted(self.manifest.images)
        if split is None:
            return ids
        return [i for i in ids if self.manifest.images[i].split == split]

    def load_record(self, image_id: str) -> FeatureRecord:
        entry = self.manifest.images.get(image_id)
        if entry is None:
            raise DataError(f"unknown image id {image_id!r}")
        pre_path = self.root / f"{image_id}{PREGAP_SUFFIX}"
        post_path = self.root / f"{image_id}{POSTGAP_SUFFIX}"
        for path in (pre_path, post_path):
            if not path.is_file():
                raise DataError(f"{image_id}: missing blob {path.name}")
        pre_gap = read_tensor(pre_path)
        post_gap = read_tensor(post_path)
        m = self.manifest
        if pre_gap.dims != (m.height, m.width, m.depth):
            raise DataError(
                f"{image_id}: feature maps {pre_gap.dims} do not match manifest "
                f"{(m.height, m.width, m.depth)}"
            )
        if post_gap.dims != (m.depth,):
            raise DataError(
                f"{image_id}: pooled vector {post_gap.dims} does not match manifest ({m.depth},)"
            )
        pooled = gap(pre_gap).data
        drift = float(np.max(np.abs(pooled - post_gap.data)))
        if drift > GAP_CONSISTENCY_ATOL:
            raise DataError(
                f"{image_id}: pooling consistency failure, stored post-pool vector "
                f"deviates from spatial mean by {drift:.2e} (> {GAP_CONSISTENCY_ATOL:.0e})"
            )
        return FeatureRecord(
            image_id=image_id,
            pre_gap=pre_gap,
            post_gap=post_gap,
            class_label=entry.class_label,
            concept_labels=entry.concept_labels,
            part_points=dict(entry.part_points),
            image_size=entry.image_size,
            image_path=entry.image_path,
            split=entry.split,
        )

    def records(self, split: str | None = None) -> Iterator[FeatureRecord]:
        """Stream validated records in ascending image-id order."""
        for image_id in self.image_ids(split):
            yield self.load_record(image_id)

    def post_gap_matrix(self, image_ids: list[str]) -> np.ndarray:
        """Stack post-pool vectors (no full-record validation) as N x d float32."""
        rows = []
        for image_id in image_ids:
            path = self.root / f"{image_id}{POSTGAP_SUFFIX}"
            if not path.is_file():
                raise DataError(f"{image_id}: missing blob {path.name}")
            rows.append(read_tensor(path).data)
        return np.stack(rows) if rows else np.zeros((0, self.manifest.depth), dtype=np.float32)


def load_dataset(root: str | Path) -> tuple[Manifest, Iterator[FeatureRecord]]:
    """Open a dataset directory: (validated manifest, stream of validated records)."""
    dataset = Dataset.open(root)
    return dataset.manifest, dataset.records()


def write_dataset(root: str | Path, manifest: Manifest, records: Iterator[FeatureRecord]) -> None:
    """Write a manifest and blob pairs; used by generators and tests."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest.validate()
    dump_json(root / "manifest.json", manifest.to_json_dict())
    for record in records:
        write_tensor(root / f"{record.image_id}{PREGAP_SUFFIX}", record.pre_gap)
        write_tensor(root / f"{record.image_id}{POSTGAP_SUFFIX}", record.post_gap)


def positive_negative_split(
    dataset: Dataset,
    concept: int,
    n_pos: int,
    n_neg: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, list[str], list[str]]:
    """Sample embedding sets for one concept from the training split.

    Positives are drawn uniformly without replacement from train images whose
    concept bit is set, negatives from train images where it is not. Returns
    (positive vectors, negative vectors, positive ids, negative ids); the
    draw is reproducible under ``seed``.
    """
    m = dataset.manifest
    if not 0 <= concept < m.num_concepts:
        raise DataError(f"concept index {concept} out of range [0,{m.num_concepts})")
    train_ids = dataset.image_ids("train")
    pos_ids = [i for i in train_ids if m.images[i].concept_labels[concept] == 1]
    neg_ids = [i for i in train_ids if m.images[i].concept_labels[concept] == 0]
    if len(pos_ids) < n_pos or len(neg_ids) < n_neg:
        raise DataError(
            f"concept {concept} ({m.concept_names[concept]!r}): requested "
            f"{n_pos}+/{n_neg}- but only {len(pos_ids)}+/{len(neg_ids)}- available in train split"
        )
    rng = np.random.default_rng(seed)
    chosen_pos = [pos_ids[i] for i in rng.permutation(len(pos_ids))[:n_pos]]
    chosen_neg = [neg_ids[i] for i in rng.permutation(len(neg_ids))[:n_neg]]
    return (
        dataset.post_gap_matrix(chosen_pos),
        dataset.post_gap_matrix(chosen_neg),
        chosen_pos,
        chosen_neg,
    )
