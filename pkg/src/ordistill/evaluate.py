"""Ensemble inference by output averaging, accuracy, and attention overlap."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import normalize, spatial_attention, student_map, teacher_map
from .backbone import Model
from .errors import ContractError
from .losses import or_loss


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = []
    for start in range(0, images.shape[0], batch_size):
        _, logits = model.forward(T.Tensor(images[start:start + batch_size]))
        outs.append(logits.data)
    return np.concatenate(outs, axis=0)


def predict_probs(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return T.softmax(predict_logits(model, images, batch_size))


def ensemble_predict(models: list[Model], images: np.ndarray, batch_size: int = 64,
                     average: str = "prob") -> np.ndarray:
    """argmax of the mean per-model output; ties go to the lowest class index."""
    if not models:
        raise ContractError("ensemble_predict needs at least one model")
    ks = {m.config.num_classes for m in models}
    if len(ks) != 1:
        raise ContractError(f"models disagree on num_classes: {sorted(ks)}")
    if average not in ("prob", "logit"):
        raise ContractError(f"average must be 'prob' or 'logit', got {average!r}")
    fn = predict_probs if average == "prob" else predict_logits
    acc = None
    for m in models:
        out = fn(m, images, batch_size).astype(np.float64)
        acc = out if acc is None else acc + out
    return np.argmax(acc / len(models), axis=1)


def top1_accuracy(predictions, labels) -> float:
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    if preds.shape != labs.shape:
        raise ContractError(f"predictions shape {preds.shape} != labels shape {labs.shape}")
    if preds.size == 0:
        raise ContractError("top1_accuracy on empty input")
    return float((preds == labs).mean())


def attention_overlap(model_i: Model, model_j: Model, images: np.ndarray,
                      batch_size: int = 64) -> float:
    """Mean over the dataset of or_loss(teacher map of i, student map of j)."""
    total = 0.0
    count = 0
    for start in range(0, images.shape[0], batch_size):
        batch = images[start:start + batch_size]
        fi, _ = model_i.forward(T.Tensor(batch))
        fj, _ = model_j.forward(T.Tensor(batch))
        tm = teacher_map(normalize(spatial_attention(fi)))
        sm = student_map(normalize(spatial_attention(fj)))
        total += or_loss(tm, sm).item() * batch.shape[0]
        count += batch.shape[0]
    return total / count


@dataclass
class EnsembleResult:
    per_model_accuracy: list[float]
    ensemble_accuracy: float
    overlap_matrix: list[list[float]]
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "per_model_accuracy": self.per_model_accuracy,
            "ensemble_accuracy": self.ensemble_accuracy,
            "overlap_matrix": self.overlap_matrix,
            "config": self.config,
        }, sort_keys=True, indent=1)

    def overlap_csv(self) -> str:
        lines = []
        for row in self.overlap_matrix:
            lines.append(",".join(repr(v) for v in row))
        return "\n".join(lines) + "\n"


def evaluate_models(models: list[Model], images: np.ndarray, labels: np.ndarray,
                    batch_size: int = 64, average: str = "prob",
                    with_overlap: bool = True, config: dict | None = None) -> EnsembleResult:
    per_model = []
    for m in models:
        preds = ensemble_predict([m], images, batch_size, average)
        per_model.append(top1_accuracy(preds, labels))
    ens = top1_accuracy(ensemble_predict(models, images, batch_size, average), labels)
    overlap = []
    if with_overlap:
        for mi in models:
            overlap.append([attention_overlap(mi, mj, images, batch_size) for mj in models])
    return EnsembleResult(per_model, ens, overlap, config or {})
