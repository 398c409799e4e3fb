"""Alignment metrics for concept explanations.

Three families:

* CGIM (global importance): cosine similarity between a model-derived
  concept/class matrix and the annotator ground-truth matrix, per concept
  row or per class column. Type 1 compares the classifier weights, type 2
  the average projected concept values of correctly classified test images,
  type 3 their elementwise product.
* CEM (existence): for one image, the fraction of the top-l locally
  important concepts that are actually annotated present.
* CLM (location): for one image, the fraction of top-l concepts whose
  annotated part point falls inside the high-activation region of that
  concept's upsampled activation map. The region is either the
  round(alpha * M1 * M2 / 12) brightest pixels (ties resolved in row-major
  order) or, in threshold mode, the pixels whose min-max normalized value
  reaches tau.

Undefined similarity values (zero vectors, classes with no correct
predictions) stay None end to end: they are counted, reported as null, and
never coerced to zero. Aggregate means run over defined items in ascending
index order so results are bit-stable regardless of worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from .bottleneck import (
    SCORE_BASES,
    BottleneckModel,
    local_importance,
    predict_batch,
    project_batch,
)
from .cav import ConceptBank, bank_matrix
from .coam import concept_map, upsample
from .errors import DataError, UsageError
from .store import Dataset, FeatureRecord
from .tensor import cosine, rank_desc

HISTOGRAM_BINS = 20
HISTOGRAM_EDGES = np.linspace(-1.0, 1.0, HISTOGRAM_BINS + 1)

CGIM_AXES = ("concept", "class")
REGION_MODES = ("top_alpha", "threshold")
SUBSETS = ("entire_test", "correct_only")


# ---------------------------------------------------------------------------
# Global importance (CGIM)


def average_concept_matrix(
    concept_values: np.ndarray,
    labels: np.ndarray,
    predictions: np.ndarray,
    num_classes: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column k = mean concept vector over test images correctly predicted as k.

    Returns (matrix, counts, defined) where ``defined[k]`` is False for
    classes with no correct predictions; those columns are zero-filled in
    the array but must be treated as undefined, never as zeros.
    """
    values = np.asarray(concept_values, dtype=np.float64)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    num_concepts = values.shape[1]
    matrix = np.zeros((num_concepts, num_classes))
    counts = np.zeros(num_classes, dtype=np.int64)
    correct = predictions == labels
    for k in range(num_classes):
        rows = values[correct & (labels == k)]
        counts[k] = rows.shape[0]
        if rows.shape[0]:
            matrix[:, k] = rows.mean(axis=0)
    return matrix, counts, counts > 0


def _axis_scores(left: np.ndarray, right: np.ndarray, axis: str) -> list[float | None]:
    if left.shape != right.shape:
        raise DataError(f"shape mismatch: {left.shape} vs {right.shape}")
    if axis == "concept":
        return [cosine(left[j, :], right[j, :]) for j in range(left.shape[0])]
    if axis == "class":
        return [cosine(left[:, k], right[:, k]) for k in range(left.shape[1])]
    raise UsageError(f"unknown axis {axis!r}, expected one of {CGIM_AXES}")


def _masked_axis_scores(
    left: np.ndarray,
    right: np.ndarray,
    defined: np.ndarray,
    axis: str,
) -> list[float | None]:
    """Cosine per row/column with undefined classes handled.

    Per class: an undefined class scores None outright. Per concept: entries
    for undefined classes are dropped pairwise from both vectors before the
    cosine (zero-filling them would bias the score).
    """
    if left.shape != right.shape:
        raise DataError(f"shape mismatch: {left.shape} vs {right.shape}")
    defined = np.asarray(defined, dtype=bool)
    if axis == "class":
        return [
            cosine(left[:, k], right[:, k]) if defined[k] else None
            for k in range(left.shape[1])
        ]
    if axis == "concept":
        cols = np.nonzero(defined)[0]
        if cols.size == 0:
            return [None] * left.shape[0]
        return [cosine(left[j, cols], right[j, cols]) for j in range(left.shape[0])]
    raise UsageError(f"unknown axis {axis!r}, expected one of {CGIM_AXES}")


def cgim1(weights: np.ndarray, truth: np.ndarray, axis: str) -> list[float | None]:
    """Similarity of classifier weights to the ground-truth matrix."""
    return _axis_scores(np.asarray(weights, float), np.asarray(truth, float), axis)


def cgim2(
    avg_matrix: np.ndarray,
    truth: np.ndarray,
    axis: str,
    defined: np.ndarray | None = None,
) -> list[float | None]:
    """Similarity of the average concept matrix to the ground-truth matrix."""
    avg = np.asarray(avg_matrix, float)
    truth = np.asarray(truth, float)
    if defined is None:
        defined = np.ones(avg.shape[1], dtype=bool)
    return _masked_axis_scores(avg, truth, defined, axis)


def cgim3(
    weights: np.ndarray,
    avg_matrix: np.ndarray,
    truth: np.ndarray,
    axis: str,
    defined: np.ndarray | None = None,
) -> list[float | None]:
    """Similarity of weights (x) average concept matrix to the ground truth."""
    weighted = np.asarray(weights, float) * np.asarray(avg_matrix, float)
    if defined is None:
        defined = np.ones(weighted.shape[1], dtype=bool)
    return _masked_axis_scores(weighted, np.asarray(truth, float), defined, axis)


def histogram_counts(scores: list[float | None]) -> list[int]:
    """Counts over 20 right-closed bins spanning [-1, 1]; None values excluded."""
    defined = np.array([s for s in scores if s is not None], dtype=np.float64)
    if defined.size == 0:
        return [0] * HISTOGRAM_BINS
    idx = np.digitize(defined, HISTOGRAM_EDGES, right=True) - 1
    idx = np.clip(idx, 0, HISTOGRAM_BINS - 1)
    return np.bincount(idx, minlength=HISTOGRAM_BINS).tolist()


def mean_defined(scores: list[float | None]) -> tuple[float | None, int]:
    """(mean over defined items in index order, count of undefined items)."""
    total = 0.0
    count = 0
    undefined = 0
    for score in scores:
        if score is None:
            undefined += 1
        else:
            total += score
            count += 1
    return (total / count if count else None), undefined


# ---------------------------------------------------------------------------
# Existence (CEM)


def existence_score(ranking: np.ndarray, annotated: set[int], l: int) -> float:
    """Fraction of the l top-ranked concepts present in the annotated set."""
    n = len(ranking)
    if not 1 <= l <= n:
        raise UsageError(f"l must lie in [1, {n}], got {l}")
    hits = sum(1 for idx in ranking[:l] if int(idx) in annotated)
    return hits / l


# ---------------------------------------------------------------------------
# Location (CLM)


def top_region_size(alpha: float, rows: int, cols: int) -> int:
    """Pixel budget round(alpha * rows * cols / 12), rounding half up."""
    if alpha <= 0 or alpha > 12:
        raise UsageError(f"alpha must lie in (0, 12], got {alpha}")
    return int(math.floor(alpha * rows * cols / 12.0 + 0.5))


def region_rank_positions(values: np.ndarray) -> np.ndarray:
    """Flat rank of every pixel: 0 = brightest; ties go to lower row-major index.

    A point is inside the top-n region exactly when its rank is < n, which
    makes the regions nested across growing n.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(-flat, kind="stable")
    positions = np.empty(order.size, dtype=np.int64)
    positions[order] = np.arange(order.size)
    return positions


def top_alpha_region(values: np.ndarray, alpha: float) -> np.ndarray:
    """Boolean mask of the alpha-budget brightest pixels."""
    arr = np.asarray(values, dtype=np.float64)
    budget = top_region_size(alpha, arr.shape[0], arr.shape[1])
    return (region_rank_positions(arr) < budget).reshape(arr.shape)


def threshold_region(values: np.ndarray, tau: float) -> np.ndarray:
    """Pixels whose min-max normalized value reaches tau; empty for flat maps."""
    arr = np.asarray(values, dtype=np.float64)
    lo = float(arr.min())
    hi = float(arr.max())
    if hi - lo <= 0.0:
        return np.zeros(arr.shape, dtype=bool)
    return (arr - lo) / (hi - lo) >= tau


def point_in_top_alpha(values: np.ndarray, point: tuple[int, int], alpha: float) -> bool:
    arr = np.asarray(values, dtype=np.float64)
    budget = top_region_size(alpha, arr.shape[0], arr.shape[1])
    flat = _flat_index(arr.shape, point)
    return bool(region_rank_positions(arr)[flat] < budget)


def point_in_threshold_region(values: np.ndarray, point: tuple[int, int], tau: float) -> bool:
    arr = np.asarray(values, dtype=np.float64)
    flat = _flat_index(arr.shape, point)
    return bool(threshold_region(arr, tau).ravel()[flat])


def _flat_index(shape: tuple[int, int], point: tuple[int, int]) -> int:
    row, col = int(point[0]), int(point[1])
    if not (0 <= row < shape[0] and 0 <= col < shape[1]):
        raise DataError(f"part point {point} outside map of shape {shape}")
    return row * shape[1] + col


# ---------------------------------------------------------------------------
# Full evaluation suite


@dataclass(frozen=True)
class SuiteConfig:
    l_values: tuple[int, ...] = (1, 3, 5)
    alphas: tuple[float, ...] = (1.0, 3.0, 6.0)
    bases: tuple[str, ...] = SCORE_BASES
    cem_subsets: tuple[str, ...] = ("entire_test", "correct_only")
    clm_subsets: tuple[str, ...] = ("entire_test",)
    # magnitude ranking follows the method's wording; signed contribution is
    # the defensible alternative, so the full suite reports both
    rank_keys: tuple[str, ...] = ("absolute", "signed")
    region_mode: str = "top_alpha"
    tau: float = 0.5
    cgim_types: tuple[int, ...] = (1, 2, 3)
    cgim_axes: tuple[str, ...] = ("concept", "class")
    with_cem: bool = True
    with_clm: bool = True
    with_cgim: bool = True
    jobs: int = 1

    def validate(self, num_concepts: int) -> None:
        for l in self.l_values:
            if not 1 <= l <= num_concepts:
                raise UsageError(f"l must lie in [1, {num_concepts}], got {l}")
        for alpha in self.alphas:
            if alpha <= 0 or alpha > 12:
                raise UsageError(f"alpha must lie in (0, 12], got {alpha}")
        for basis in self.bases:
            if basis not in SCORE_BASES:
                raise UsageError(f"unknown score basis {basis!r}")
        for subset in self.cem_subsets + self.clm_subsets:
            if subset not in SUBSETS:
                raise UsageError(f"unknown subset {subset!r}")
        for key in self.rank_keys:
            if key not in ("signed", "absolute"):
                raise UsageError(f"unknown rank key {key!r}")
        if self.region_mode not in REGION_MODES:
            raise UsageError(f"unknown region mode {self.region_mode!r}")
        for t in self.cgim_types:
            if t not in (1, 2, 3):
                raise UsageError(f"CGIM type must be 1, 2 or 3, got {t}")
        for axis in self.cgim_axes:
            if axis not in CGIM_AXES:
                raise UsageError(f"unknown CGIM axis {axis!r}")


def _clm_image_marks(
    record: FeatureRecord,
    concepts: set[int],
    bank_rows: np.ndarray,
    part_eligible: set[int],
    config: SuiteConfig,
) -> dict[int, object]:
    """Per-concept localisation evidence for one image.

    For top_alpha mode the value is the part point's pixel rank (region
    membership is then rank < budget for any alpha); for threshold mode it
    is the boolean indicator. Concepts without a usable part point map to
    None (skipped).
    """
    out: dict[int, object] = {}
    for j in concepts:
        if j not in part_eligible or j not in record.part_points:
            out[j] = None
            continue
        heat = upsample(concept_map(record.pre_gap, bank_rows[j]), record.image_size).data
        point = record.part_points[j]
        if config.region_mode == "top_alpha":
            out[j] = int(region_rank_positions(heat)[_flat_index(heat.shape, point)])
        else:
            out[j] = bool(point_in_threshold_region(heat, point, config.tau))
    return out


def evaluate_suite(
    dataset: Dataset,
    bank: ConceptBank,
    model: BottleneckModel,
    config: SuiteConfig = SuiteConfig(),
) -> dict:
    """Run the configured metric grid over the test split.

    Returns a JSON-ready bundle: one cell per CEM (basis x l x subset), one
    per CLM (basis x alpha-or-tau x l x subset), one per CGIM
    (type x axis), plus test accuracy and the resolved configuration. The
    per-image map work parallelizes across ``jobs`` threads; aggregation
    always reduces in ascending image-id order, so results do not depend on
    the worker count.
    """
    m = dataset.manifest
    config.validate(m.num_concepts)
    test_ids = dataset.image_ids("test")
    if not test_ids:
        raise DataError("dataset has no test split")

    features = dataset.post_gap_matrix(test_ids)
    concept_values = project_batch(bank, features)
    predictions = predict_batch(model, concept_values)
    labels = np.array([m.images[i].class_label for i in test_ids])
    correct = predictions == labels

    bank_rows = bank_matrix(bank).astype(np.float64)
    weights = model.weights.data.astype(np.float64)
    truth = np.asarray(m.class_concept_truth, dtype=np.float64)
    part_eligible = {j for j, name in m.part_map.items() if name is not None}
    max_l = max(config.l_values) if config.l_values else 0

    rankings: list[dict[tuple[str, str], np.ndarray]] = []
    for i, image_id in enumerate(test_ids):
        per_key: dict[tuple[str, str], np.ndarray] = {}
        for basis in config.bases:
            scores = local_importance(model, concept_values[i], int(predictions[i]), basis)
            for key in config.rank_keys:
                per_key[basis, key] = rank_desc(scores, key)
        rankings.append(per_key)

    config_echo = asdict(config)
    config_echo.pop("jobs")  # execution knob; results must not depend on it
    bundle: dict = {
        "config": config_echo,
        "num_test_images": len(test_ids),
        "test_accuracy": float(np.mean(correct)),
        "undefined_policy": "null, counted, never zero-filled",
    }

    if config.with_cem:
        cem_cells = []
        for key in config.rank_keys:
            for basis in config.bases:
                for l in config.l_values:
                    per_item = {}
                    for i, image_id in enumerate(test_ids):
                        annotated = set(
                            j
                            for j, bit in enumerate(m.images[image_id].concept_labels)
                            if bit
                        )
                        per_item[image_id] = existence_score(
                            rankings[i][basis, key], annotated, l
                        )
                    for subset in config.cem_subsets:
                        chosen = [
                            (image_id, per_item[image_id])
                            for i, image_id in enumerate(test_ids)
                            if subset == "entire_test" or correct[i]
                        ]
                        mean, undefined = mean_defined([s for _, s in chosen])
                        cem_cells.append(
                            {
                                "basis": basis,
                                "l": l,
                                "subset": subset,
                                "rank_key": key,
                                "mean": mean,
                                "undefined": undefined,
                                "per_item": dict(chosen),
                            }
                        )
        bundle["cem"] = cem_cells

    if config.with_clm:
        # one map computation per (image, concept), shared by every ranking
        # basis, rank key, alpha and l that selects that concept
        needed: list[set[int]] = []
        for i in range(len(test_ids)):
            concepts: set[int] = set()
            for ranking in rankings[i].values():
                concepts.update(int(idx) for idx in ranking[:max_l])
            needed.append(concepts)

        def worker(i: int) -> dict[int, object]:
            record = dataset.load_record(test_ids[i])
            return _clm_image_marks(record, needed[i], bank_rows, part_eligible, config)

        if config.jobs > 1:
            with ThreadPoolExecutor(max_workers=config.jobs) as pool:
                evidence = list(pool.map(worker, range(len(test_ids))))
        else:
            evidence = [worker(i) for i in range(len(test_ids))]

        region_params = config.alphas if config.region_mode == "top_alpha" else (config.tau,)
        record_sizes = [m.images[i].image_size for i in test_ids]
        clm_cells = []
        for key in config.rank_keys:
            for basis in config.bases:
                for param in region_params:
                    for l in config.l_values:
                        per_item: dict[str, float | None] = {}
                        skipped_total = 0
                        for i, image_id in enumerate(test_ids):
                            chosen = [int(idx) for idx in rankings[i][basis, key][:l]]
                            marks = evidence[i]
                            indicators = []
                            for j in chosen:
                                mark = marks[j]
                                if mark is None:
                                    skipped_total += 1
                                    continue
                                if config.region_mode == "top_alpha":
                                    rows, cols = record_sizes[i]
                                    budget = top_region_size(param, rows, cols)
                                    indicators.append(1.0 if mark < budget else 0.0)
                                else:
                                    indicators.append(1.0 if mark else 0.0)
                            per_item[image_id] = (
                                sum(indicators) / len(indicators) if indicators else None
                            )
                        for subset in config.clm_subsets:
                            chosen_items = [
                                (image_id, per_item[image_id])
                                for i, image_id in enumerate(test_ids)
                                if subset == "entire_test" or correct[i]
                            ]
                            mean, undefined = mean_defined([s for _, s in chosen_items])
                            cell = {
                                "basis": basis,
                                "l": l,
                                "subset": subset,
                                "region_mode": config.region_mode,
                                "rank_key": key,
                                "mean": mean,
                                "undefined": undefined,
                                "skipped_concepts": skipped_total,
                                "per_item": dict(chosen_items),
                            }
                            if config.region_mode == "top_alpha":
                                cell["alpha"] = param
                            else:
                                cell["tau"] = param
                            clm_cells.append(cell)
        bundle["clm"] = clm_cells

    if config.with_cgim:
        avg_matrix, counts, defined = average_concept_matrix(
            concept_values, labels, predictions, m.num_classes
        )
        cgim_cells = []
        for cgim_type in config.cgim_types:
            for axis in config.cgim_axes:
                if cgim_type == 1:
                    scores = cgim1(weights, truth, axis)
                elif cgim_type == 2:
                    scores = cgim2(avg_matrix, truth, axis, defined)
                else:
                    scores = cgim3(weights, avg_matrix, truth, axis, defined)
                names = m.concept_names if axis == "concept" else m.class_names
                mean, undefined = mean_defined(scores)
                cgim_cells.append(
                    {
                        "type": cgim_type,
                        "axis": axis,
                        "mean": mean,
                        "undefined": undefined,
                        "scores": scores,
                        "names": list(names),
                        "histogram": {
                            "edges": HISTOGRAM_EDGES.tolist(),
                            "counts": histogram_counts(scores),
                        },
                    }
                )
        bundle["cgim"] = cgim_cells
        bundle["class_counts"] = counts.tolist()

    return bundle
