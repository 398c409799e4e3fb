"""Planted-concept synthetic datasets with brute-force ground truth.

Every concept is an injected direction in channel space, confined to a known
rectangle of the feature grid, so desk-scale runs have externally computable
answers: the class-concept truth matrix equals the planted incidence matrix,
each concept's activation must peak inside its rectangle, and the part point
for localisation scoring is the rectangle center mapped through the exact
upsampling geometry used by the heatmap stage.

``generate`` writes a normal dataset directory plus an ``oracle.json``
sidecar holding the planted directions, rectangles, part points, the exact
truth matrix, and a brute-force average concept matrix computed directly
from the planted directions over the test split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .coam import upsample
from .errors import UsageError
from .store import FeatureRecord, ImageEntry, Manifest, dump_json, write_dataset
from .tensor import Tensor, gap

DIRECTION_RETRIES = 10000


@dataclass
class SynthSpec:
    """Parameters of one planted-concept dataset."""

    num_classes: int = 8
    num_concepts: int = 12
    depth: int = 16
    feature_height: int = 7
    feature_width: int = 7
    image_height: int = 84
    image_width: int = 84
    noise_sigma: float = 0.1
    amplitude: float = 6.0
    samples_per_class: int = 40
    test_fraction: float = 0.25
    seed: int = 0
    rect_height: int = 2
    rect_width: int = 2
    correlation: float = 0.0
    max_pairwise_cosine: float = 0.2
    # Optional explicit plants; sampled deterministically from seed when None.
    incidence: list[list[int]] | None = None
    directions: list[list[float]] | None = None
    rectangles: list[list[int]] | None = None

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthSpec":
        doc = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown synth spec fields: {sorted(unknown)}")
        return cls(**doc)

    def validate(self) -> None:
        if min(self.num_classes, self.num_concepts, self.depth) < 1:
            raise UsageError("num_classes, num_concepts and depth must be >= 1")
        if self.rect_height > self.feature_height or self.rect_width > self.feature_width:
            raise UsageError("planted rectangle does not fit the feature grid")
        if self.image_height < self.feature_height or self.image_width < self.feature_width:
            raise UsageError("image size must be at least the feature grid size")
        if not 0.0 < self.test_fraction < 1.0:
            raise UsageError("test_fraction must lie in (0, 1)")
        if self.samples_per_class < 2:
            raise UsageError("need at least 2 samples per class (train + test)")


def default_incidence(num_classes: int, num_concepts: int) -> np.ndarray:
    """Deterministic class x concept incidence: each concept links two classes.

    Classes are graph vertices and concepts are edges. When the class count
    is a power of two the edges come from the hypercube (every class carries
    the same number of concepts and co-occurrence spreads evenly, which
    keeps concept directions trainable with little cross-talk); otherwise,
    and for extra concepts, ring edges of growing stride fill in.
    """
    if num_classes == 1:
        return np.ones((1, num_concepts), dtype=np.int64)
    pairs: list[tuple[int, int]] = []
    bits = num_classes.bit_length() - 1
    if num_classes == 1 << bits:
        pairs = [
            (v, v ^ (1 << b))
            for b in range(bits)
            for v in range(num_classes)
            if v < v ^ (1 << b)
        ]
    stride = 1
    while len(pairs) < num_concepts and stride <= num_classes // 2:
        for i in range(num_classes):
            edge = tuple(sorted((i, (i + stride) % num_classes)))
            if edge[0] != edge[1] and edge not in pairs:
                pairs.append(edge)
        stride += 1
    while len(pairs) < num_concepts:  # more concepts than distinct pairs: reuse
        pairs.append(pairs[len(pairs) % max(1, min(len(pairs), num_concepts))])
    incidence = np.zeros((num_classes, num_concepts), dtype=np.int64)
    for j, (a, b) in enumerate(pairs[:num_concepts]):
        incidence[a, j] = 1
        incidence[b, j] = 1
    return incidence


def sample_directions(
    rng: np.random.Generator,
    num_concepts: int,
    depth: int,
    max_pairwise_cosine: float,
) -> np.ndarray:
    """Unit directions with pairwise |cosine| below the cap, by rejection."""
    chosen: list[np.ndarray] = []
    for j in range(num_concepts):
        for _ in range(DIRECTION_RETRIES):
            candidate = rng.standard_normal(depth)
            norm = float(np.linalg.norm(candidate))
            if norm < 1e-9:
                continue
            candidate /= norm
            if all(abs(float(candidate @ prev)) <= max_pairwise_cosine for prev in chosen):
                chosen.append(candidate)
                break
        else:
            raise UsageError(
                f"could not draw direction {j}: {num_concepts} directions with pairwise "
                f"|cosine| <= {max_pairwise_cosine} are not reachable at depth {depth}"
            )
    return np.stack(chosen)


def _sample_rectangles(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    max_r = spec.feature_height - spec.rect_height
    max_c = spec.feature_width - spec.rect_width
    used: set[tuple[int, int]] = set()
    rects = []
    for _ in range(spec.num_concepts):
        for _ in range(100):
            r0 = int(rng.integers(0, max_r + 1))
            c0 = int(rng.integers(0, max_c + 1))
            if (r0, c0) not in used:
                break
        used.add((r0, c0))
        rects.append([r0, c0, spec.rect_height, spec.rect_width])
    return np.asarray(rects, dtype=np.int64)


def _center_pixel(start: int, extent: int, grid: int, image: int) -> int:
    """Rectangle center on the feature grid mapped into image pixels.

    Inverts the half-pixel-center sampling used by the upsampler, so the
    point lands inside the rectangle's upsampled footprint.
    """
    feature_coord = start + (extent - 1) / 2.0
    pixel = (feature_coord + 0.5) * image / grid - 0.5
    return int(min(image - 1, max(0, round(pixel))))


def part_point_for_rect(rect: np.ndarray, spec: SynthSpec) -> tuple[int, int]:
    r0, c0, h, w = (int(v) for v in rect)
    return (
        _center_pixel(r0, h, spec.feature_height, spec.image_height),
        _center_pixel(c0, w, spec.feature_width, spec.image_width),
    )


def generate(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Write a planted dataset (store format) plus oracle.json; returns the oracle."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    if spec.incidence is not None:
        incidence = np.asarray(spec.incidence, dtype=np.int64)
        if incidence.shape != (spec.num_classes, spec.num_concepts):
            raise UsageError(
                f"incidence shape {incidence.shape} does not match "
                f"(num_classes, num_concepts)"
            )
    else:
        incidence = default_incidence(spec.num_classes, spec.num_concepts)

    if spec.directions is not None:
        directions = np.asarray(spec.directions, dtype=np.float64)
        if directions.shape != (spec.num_concepts, spec.depth):
            raise UsageError("explicit directions must be num_concepts x depth")
        for a in range(len(directions)):
            for b in range(a + 1, len(directions)):
                na = np.linalg.norm(directions[a])
                nb = np.linalg.norm(directions[b])
                if na > 0 and nb > 0:
                    cos = abs(float(directions[a] @ directions[b]) / (na * nb))
                    if cos > spec.max_pairwise_cosine + 1e-9:
                        raise UsageError(
                            f"explicit directions {a} and {b} have |cosine| {cos:.3f} "
                            f"> {spec.max_pairwise_cosine}"
                        )
    else:
        directions = sample_directions(
            rng, spec.num_concepts, spec.depth, spec.max_pairwise_cosine
        )

    if spec.rectangles is not None:
        rectangles = np.asarray(spec.rectangles, dtype=np.int64)
        if rectangles.shape != (spec.num_concepts, 4):
            raise UsageError("explicit rectangles must be num_concepts x [r0, c0, h, w]")
    else:
        rectangles = _sample_rectangles(rng, spec)

    part_points = [part_point_for_rect(rect, spec) for rect in rectangles]
    for j, rect in enumerate(rectangles):
        _check_rect_contains_point(rect, part_points[j], spec)

    train_count = spec.samples_per_class - max(
        1, round(spec.samples_per_class * spec.test_fraction)
    )
    if train_count < 1:
        raise UsageError("test_fraction leaves no training images")

    manifest = Manifest(
        num_concepts=spec.num_concepts,
        num_classes=spec.num_classes,
        depth=spec.depth,
        height=spec.feature_height,
        width=spec.feature_width,
        concept_names=[f"concept_{j:02d}" for j in range(spec.num_concepts)],
        class_names=[f"class_{k:02d}" for k in range(spec.num_classes)],
        class_concept_truth=incidence.T.astype(np.float32),
        part_map={j: f"region_{j:02d}" for j in range(spec.num_concepts)},
        images={},
    )

    records: list[FeatureRecord] = []
    for k in range(spec.num_classes):
        present = [j for j in range(spec.num_concepts) if incidence[k, j] == 1]
        for n in range(spec.samples_per_class):
            image_id = f"img_{k:02d}_{n:03d}"
            split = "train" if n < train_count else "test"
            maps = rng.normal(
                0.0,
                spec.noise_sigma,
                size=(spec.feature_height, spec.feature_width, spec.depth),
            )
            active = list(present)
            if spec.correlation > 0.0:
                # Feature-level confound: a present concept drags its ring
                # neighbour's signal into the image without annotating it.
                for j in present:
                    if rng.random() < spec.correlation:
                        active.append((j + 1) % spec.num_concepts)
            for j in sorted(set(active)):
                r0, c0, h, w = (int(v) for v in rectangles[j])
                maps[r0 : r0 + h, c0 : c0 + w, :] += spec.amplitude * directions[j]
            pre_gap = Tensor(maps)
            entry = ImageEntry(
                class_label=k,
                concept_labels=tuple(int(v) for v in incidence[k]),
                part_points={j: part_points[j] for j in present},
                image_size=(spec.image_height, spec.image_width),
                image_path=None,
                split=split,
            )
            manifest.images[image_id] = entry
            records.append(
                FeatureRecord(
                    image_id=image_id,
                    pre_gap=pre_gap,
                    post_gap=gap(pre_gap),
                    class_label=entry.class_label,
                    concept_labels=entry.concept_labels,
                    part_points=entry.part_points,
                    image_size=entry.image_size,
                    image_path=None,
                    split=split,
                )
            )

    out_dir = Path(out_dir)
    write_dataset(out_dir, manifest, iter(records))

    oracle = _build_oracle(spec, incidence, directions, rectangles, part_points, records)
    dump_json(out_dir / "oracle.json", oracle)
    return oracle


def _check_rect_contains_point(
    rect: np.ndarray, point: tuple[int, int], spec: SynthSpec
) -> None:
    """The rectangle's upsampled footprint must cover its designated point."""
    indicator = np.zeros((spec.feature_height, spec.feature_width), dtype=np.float32)
    r0, c0, h, w = (int(v) for v in rect)
    indicator[r0 : r0 + h, c0 : c0 + w] = 1.0
    footprint = upsample(indicator, (spec.image_height, spec.image_width)).data
    if footprint[point[0], point[1]] < 0.5:
        raise UsageError(
            f"rectangle {rect.tolist()} does not cover its part point {point} "
            f"after upsampling"
        )


def _build_oracle(
    spec: SynthSpec,
    incidence: np.ndarray,
    directions: np.ndarray,
    rectangles: np.ndarray,
    part_points: list[tuple[int, int]],
    records: list[FeatureRecord],
) -> dict:
    """Brute-force reference quantities, independent of the evaluation path."""
    truth = incidence.T.astype(np.float64)

    # Average planted-concept response per true class over the test split,
    # using the planted directions themselves as the projection.
    sums = np.zeros((spec.num_concepts, spec.num_classes))
    counts = np.zeros(spec.num_classes, dtype=np.int64)
    for record in records:
        if record.split != "test":
            continue
        projected = directions @ record.post_gap.data.astype(np.float64)
        sums[:, record.class_label] += projected
        counts[record.class_label] += 1
    avg = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)

    def plain_cosine(a: np.ndarray, b: np.ndarray) -> float | None:
        na = float(np.linalg.norm(a))
        nb = float(np.linalg.norm(b))
        if na < 1e-12 or nb < 1e-12:
            return None
        return float(a @ b / (na * nb))

    per_class = [
        plain_cosine(avg[:, k], truth[:, k]) if counts[k] else None
        for k in range(spec.num_classes)
    ]

    resolved = asdict(spec)
    resolved["incidence"] = incidence.tolist()
    resolved["directions"] = directions.round(12).tolist()
    resolved["rectangles"] = rectangles.tolist()
    return {
        "spec": resolved,
        "part_points": [list(p) for p in part_points],
        "class_concept_truth": truth.tolist(),
        "avg_concept_matrix_planted": avg.round(9).tolist(),
        "test_counts_per_class": counts.tolist(),
        "cgim2_per_class_planted": per_class,
    }
