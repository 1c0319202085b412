"""Confusion matrices and per-class accuracy summaries."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Counts of (true, predicted) pairs; rows are true classes."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("preds and labels must be equal-length vectors")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} outside [0, {num_classes})")
    flat = np.bincount(labels * num_classes + preds, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


@dataclass
class EvalReport:
    confusion: list[list[int]]
    per_class_acc: list[float | None]
    overall_acc: float
    max_class_acc: float
    min_class_acc: float
    acc_gap: float
    absent_classes: list[int] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.confusion)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def confusion_csv(self) -> str:
        return "".join(",".join(str(v) for v in row) + "\n" for row in self.confusion)


def summarize(confusion) -> EvalReport:
    """Overall (sample-weighted), per-class, max/min accuracy and their gap.

    Classes without true samples get ``None`` and are left out of max/min.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    support = cm.sum(axis=1)
    per_class: list[float | None] = []
    for c in range(cm.shape[0]):
        per_class.append(float(cm[c, c]) / float(support[c]) if support[c] else None)
    observed = [a for a in per_class if a is not None]
    hi, lo = max(observed), min(observed)
    return EvalReport(
        confusion=cm.tolist(),
        per_class_acc=per_class,
        overall_acc=float(np.trace(cm)) / total,
        max_class_acc=hi,
        min_class_acc=lo,
        acc_gap=hi - lo,
        absent_classes=[c for c in range(cm.shape[0]) if support[c] == 0],
    )

