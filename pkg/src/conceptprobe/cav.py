"""Concept activation vectors: one linear SVM per concept, stacked into a bank.

Each concept direction is the normal vector of a soft-margin linear SVM
separating embeddings of images that carry the concept from embeddings of
images that do not. Training is deterministic full-batch subgradient descent
on

    0.5 * ||w||^2 + lam * sum_i max(0, 1 - y_i * (w . x_i + b))

with step size eta_t = eta0 / (1 + t). The trade-off parameter ``lam``
multiplies the hinge term, so small values favour a wide margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import json

import numpy as np

from .errors import DataError, NumericError
from .store import Dataset, dump_json, positive_negative_split, read_tensor, write_tensor
from .tensor import Tensor, as_array

DEGENERATE_NORM = 1e-10

BANK_BLOB = "cavs.cxt"
BANK_META = "bank.json"


def train_cav(
    positives: Sequence | np.ndarray,
    negatives: Sequence | np.ndarray,
    lam: float = 1.0,
    seed: int = 0,
    epochs: int = 500,
    lr0: float = 1.0,
) -> tuple[Tensor, float, dict]:
    """Train one concept direction from positive/negative embedding sets.

    Returns (direction, intercept, meta). The direction's sign is fixed so
    that the mean projection of the positive set exceeds that of the
    negative set (direction and intercept are flipped together if training
    lands the other way). ``meta`` records the run: sample counts, lam,
    seed, final hinge objective, train accuracy, and a ``degenerate`` flag
    for inseparable or empty-direction outcomes.
    """
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise DataError("both example sets must be non-empty")
    if pos.shape[1] != neg.shape[1]:
        raise DataError(f"embedding width mismatch: {pos.shape[1]} vs {neg.shape[1]}")
    x = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])

    dim = x.shape[1]
    w = np.zeros(dim)
    b = 0.0
    for t in range(epochs):
        margins = y * (x @ w + b)
        active = margins < 1.0
        grad_w = w - lam * (y[active, None] * x[active]).sum(axis=0)
        grad_b = -lam * y[active].sum()
        eta = lr0 / (1.0 + t)
        w = w - eta * grad_w
        b = b - eta * grad_b
        if not (np.all(np.isfinite(w)) and np.isfinite(b)):
            raise NumericError(f"SVM diverged at epoch {t} (non-finite iterate)")

    # Sign convention: positives project higher than negatives.
    if float(np.mean(pos @ w)) <= float(np.mean(neg @ w)):
        w, b = -w, -b

    margins = y * (x @ w + b)
    objective = float(0.5 * w @ w + lam * np.maximum(0.0, 1.0 - margins).sum())
    if not np.isfinite(objective):
        raise NumericError("SVM objective is non-finite")
    predictions = (x @ w + b) > 0.0
    accuracy = float(np.mean(predictions == (y > 0)))
    degenerate = bool(np.linalg.norm(w) < DEGENERATE_NORM or accuracy <= 0.5)
    meta = {
        "n_pos": int(len(pos)),
        "n_neg": int(len(neg)),
        "lambda": float(lam),
        "seed": int(seed),
        "epochs": int(epochs),
        "lr0": float(lr0),
        "objective": objective,
        "train_accuracy": accuracy,
        "degenerate": degenerate,
        "trained": True,
    }
    return Tensor(w), float(b), meta


@dataclass
class ConceptBank:
    """Stacked concept directions (num_concepts x depth) plus training metadata.

    ``intercepts`` are kept for diagnostics only; projection into concept
    space is the plain matrix product and never consults them.
    """

    directions: Tensor
    intercepts: np.ndarray
    concept_names: list[str]
    train_meta: list[dict]
    warnings: list[str] = field(default_factory=list)
    normalized: bool = False

    @property
    def num_concepts(self) -> int:
        return self.directions.dims[0]

    @property
    def depth(self) -> int:
        return self.directions.dims[1]

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_tensor(out_dir / BANK_BLOB, self.directions)
        dump_json(
            out_dir / BANK_META,
            {
                "concept_names": self.concept_names,
                "intercepts": [float(v) for v in self.intercepts],
                "train_meta": self.train_meta,
                "warnings": self.warnings,
                "normalized": self.normalized,
            },
        )

    @classmethod
    def load(cls, bank_dir: str | Path) -> "ConceptBank":
        bank_dir = Path(bank_dir)
        blob = bank_dir / BANK_BLOB
        meta_path = bank_dir / BANK_META
        if not blob.is_file():
            raise DataError(f"missing concept bank blob: {blob}")
        if not meta_path.is_file():
            raise DataError(f"missing concept bank metadata: {meta_path}")
        directions = read_tensor(blob)
        if directions.rank != 2:
            raise DataError(f"{blob}: expected rank-2 bank, got {directions.dims}")
        meta = json.loads(meta_path.read_text())
        return cls(
            directions=directions,
            intercepts=np.asarray(meta["intercepts"], dtype=np.float32),
            concept_names=list(meta["concept_names"]),
            train_meta=list(meta["train_meta"]),
            warnings=list(meta.get("warnings", [])),
            normalized=bool(meta.get("normalized", False)),
        )


def build_bank(
    dataset: Dataset,
    n_pos: int = 100,
    n_neg: int = 100,
    lam: float = 1.0,
    seed: int = 0,
    epochs: int = 500,
    lr0: float = 1.0,
    normalize: bool = False,
) -> ConceptBank:
    """Train every concept and stack the directions into a bank.

    Concept j trains with its own derived seed (seed XOR j) so per-concept
    runs are independent and reorderable. Concepts with too few positives or
    negatives are left as zero rows and reported in ``warnings`` instead of
    aborting the build. With ``normalize`` set, each trained direction (and
    its intercept) is scaled to unit norm; the default keeps raw SVM normals.
    """
    m = dataset.manifest
    rows = np.zeros((m.num_concepts, m.depth), dtype=np.float64)
    intercepts = np.zeros(m.num_concepts, dtype=np.float64)
    metas: list[dict] = []
    warnings: list[str] = []
    for j in range(m.num_concepts):
        concept_seed = seed ^ j
        try:
            pos, neg, pos_ids, neg_ids = positive_negative_split(
                dataset, j, n_pos, n_neg, concept_seed
            )
        except DataError as exc:
            warnings.append(str(exc))
            metas.append({"trained": False, "reason": str(exc), "seed": concept_seed})
            continue
        direction, intercept, meta = train_cav(
            pos, neg, lam=lam, seed=concept_seed, epochs=epochs, lr0=lr0
        )
        row = direction.data.astype(np.float64)
        if normalize:
            norm = float(np.linalg.norm(row))
            if norm >= DEGENERATE_NORM:
                row = row / norm
                intercept = intercept / norm
        rows[j] = row
        intercepts[j] = intercept
        meta["positive_ids"] = pos_ids
        meta["negative_ids"] = neg_ids
        metas.append(meta)
        if meta["degenerate"]:
            warnings.append(
                f"concept {j} ({m.concept_names[j]!r}): degenerate direction "
                f"(train accuracy {meta['train_accuracy']:.2f})"
            )
    return ConceptBank(
        directions=Tensor(rows),
        intercepts=intercepts.astype(np.float32),
        concept_names=list(m.concept_names),
        train_meta=metas,
        warnings=warnings,
        normalized=normalize,
    )


def bank_matrix(bank: ConceptBank | Tensor | np.ndarray) -> np.ndarray:
    """The bank's directions as a float32 (num_concepts x depth) matrix."""
    if isinstance(bank, ConceptBank):
        return bank.directions.data
    return as_array(bank, rank=2)
