"""Concept bottleneck: project embeddings through the bank, classify linearly.

The projection is the bare matrix product (no bias, no nonlinearity); the
classifier is a single linear layer trained with softmax cross-entropy plus
an optional L2 penalty on the weights. Training is full-batch gradient
descent from zero initialization (the objective is convex, so there is no
symmetry to break) and is bitwise deterministic for a fixed config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .cav import ConceptBank, bank_matrix
from .errors import DataError, NumericError
from .store import dump_json, read_tensor, write_tensor
from .tensor import Tensor, as_array

THETA_BLOB = "theta.cxt"
BIAS_BLOB = "bias.cxt"
MODEL_META = "model.json"

SCORE_BASES = ("theta", "uhat", "theta_uhat")


def project(bank: ConceptBank | Tensor | np.ndarray, post_gap) -> Tensor:
    """Project one pooled feature vector into concept space: u = C f."""
    c = bank_matrix(bank).astype(np.float64)
    f = as_array(post_gap, rank=1).astype(np.float64)
    if c.shape[1] != f.shape[0]:
        raise DataError(f"bank depth {c.shape[1]} does not match feature length {f.shape[0]}")
    return Tensor(c @ f)


def project_batch(bank: ConceptBank | Tensor | np.ndarray, post_gaps: np.ndarray) -> np.ndarray:
    """Project N pooled vectors at once; returns N x num_concepts float32."""
    c = bank_matrix(bank).astype(np.float64)
    f = np.asarray(post_gaps, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != c.shape[1]:
        raise DataError(f"expected N x {c.shape[1]} features, got {f.shape}")
    return (f @ c.T).astype(np.float32)


@dataclass(frozen=True)
class ClassifierConfig:
    learning_rate: float = 1.0
    epochs: int = 500
    weight_decay: float = 1e-4
    seed: int = 0
    backtracking: bool = True


@dataclass
class BottleneckModel:
    """Linear classifier over concept values: logits = weights^T u + bias."""

    weights: Tensor  # num_concepts x num_classes
    bias: Tensor  # num_classes
    config: ClassifierConfig
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    final_loss: float | None = None

    @property
    def num_concepts(self) -> int:
        return self.weights.dims[0]

    @property
    def num_classes(self) -> int:
        return self.weights.dims[1]

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_tensor(out_dir / THETA_BLOB, self.weights)
        write_tensor(out_dir / BIAS_BLOB, self.bias)
        dump_json(
            out_dir / MODEL_META,
            {
                "config": asdict(self.config),
                "train_accuracy": self.train_accuracy,
                "test_accuracy": self.test_accuracy,
                "final_loss": self.final_loss,
            },
        )

    @classmethod
    def load(cls, model_dir: str | Path) -> "BottleneckModel":
        model_dir = Path(model_dir)
        for name in (THETA_BLOB, BIAS_BLOB, MODEL_META):
            if not (model_dir / name).is_file():
                raise DataError(f"missing model artifact: {model_dir / name}")
        weights = read_tensor(model_dir / THETA_BLOB)
        bias = read_tensor(model_dir / BIAS_BLOB)
        if weights.rank != 2 or bias.rank != 1 or weights.dims[1] != bias.dims[0]:
            raise DataError(
                f"inconsistent model shapes: weights {weights.dims}, bias {bias.dims}"
            )
        meta = json.loads((model_dir / MODEL_META).read_text())
        return cls(
            weights=weights,
            bias=bias,
            config=ClassifierConfig(**meta["config"]),
            train_accuracy=meta.get("train_accuracy"),
            test_accuracy=meta.get("test_accuracy"),
            final_loss=meta.get("final_loss"),
        )


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    weight_decay: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy plus 0.5 * weight_decay * ||weights||^2.

    Returns (loss, grad_weights, grad_bias); everything in float64. The bias
    is not penalized.
    """
    n = features.shape[0]
    logits = features @ weights + bias
    probs = _softmax(logits)
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    loss += 0.5 * weight_decay * float(np.sum(weights * weights))
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grad_w = features.T @ delta + weight_decay * weights
    grad_b = delta.sum(axis=0)
    return loss, grad_w, grad_b


def train_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    config: ClassifierConfig = ClassifierConfig(),
) -> BottleneckModel:
    """Fit the linear layer by full-batch gradient descent.

    With backtracking enabled (the default) the step is halved whenever it
    would increase the loss, which makes the per-epoch loss non-increasing;
    disabling it gives plain fixed-rate descent for exact-determinism
    comparisons against other runs.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2:
        raise DataError(f"expected N x L features, got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise DataError("labels must be one integer per feature row")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")

    num_concepts = x.shape[1]
    weights = np.zeros((num_concepts, num_classes))
    bias = np.zeros(num_classes)
    lr = config.learning_rate
    loss, grad_w, grad_b = loss_and_grad(weights, bias, x, y, config.weight_decay)
    for _ in range(config.epochs):
        if config.backtracking:
            while True:
                new_w = weights - lr * grad_w
                new_b = bias - lr * grad_b
                new_loss, new_gw, new_gb = loss_and_grad(new_w, new_b, x, y, config.weight_decay)
                if new_loss <= loss or lr < 1e-12:
                    break
                lr *= 0.5
        else:
            new_w = weights - lr * grad_w
            new_b = bias - lr * grad_b
            new_loss, new_gw, new_gb = loss_and_grad(new_w, new_b, x, y, config.weight_decay)
        if not np.isfinite(new_loss):
            raise NumericError("classifier training diverged (non-finite loss)")
        weights, bias = new_w, new_b
        loss, grad_w, grad_b = new_loss, new_gw, new_gb

    model = BottleneckModel(
        weights=Tensor(weights),
        bias=Tensor(bias),
        config=config,
        final_loss=loss,
    )
    model.train_accuracy = accuracy(model, x.astype(np.float32), y)
    return model


def predict(model: BottleneckModel, concept_values) -> tuple[int, np.ndarray]:
    """Class index (lowest index wins exact ties) and softmax probabilities."""
    u = as_array(concept_values, rank=1).astype(np.float64)
    logits = model.weights.data.astype(np.float64).T @ u + model.bias.data.astype(np.float64)
    probs = _softmax(logits)
    return int(np.argmax(logits)), probs


def predict_batch(model: BottleneckModel, concept_values: np.ndarray) -> np.ndarray:
    """Predicted class index per row of an N x num_concepts matrix."""
    u = np.asarray(concept_values, dtype=np.float64)
    logits = u @ model.weights.data.astype(np.float64) + model.bias.data.astype(np.float64)
    return np.argmax(logits, axis=1)


def accuracy(model: BottleneckModel, concept_values: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict_batch(model, concept_values) == np.asarray(labels)))


def local_importance(
    model: BottleneckModel,
    concept_values,
    class_index: int,
    basis: str = "theta_uhat",
) -> np.ndarray:
    """Per-concept importance scores for one prediction.

    basis "theta_uhat" is the contribution of each concept to the class
    logit (weight times concept value); "theta" and "uhat" expose the two
    comparison bases (weights alone, concept values alone).
    """
    if not 0 <= class_index < model.num_classes:
        raise DataError(f"class index {class_index} out of range [0,{model.num_classes})")
    if basis not in SCORE_BASES:
        raise DataError(f"unknown score basis {basis!r}, expected one of {SCORE_BASES}")
    u = as_array(concept_values, rank=1).astype(np.float64)
    column = model.weights.data[:, class_index].astype(np.float64)
    if basis == "theta":
        return column
    if basis == "uhat":
        return u
    return column * u
