"""Confusion matrix, per-class recall, and balanced accuracy.

Balanced accuracy is the arithmetic mean of per-class recalls over classes
that actually appear in the gold labels. Zero-support classes are excluded
from the average rather than scored 0; this matters on partial validation
sets and is therefore stated loudly here. Argmax ties break toward the
lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .types import CLASS_NAMES, NUM_CLASSES, SoftLabel


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are gold classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (NUM_CLASSES, NUM_CLASSES) or np.any(c < 0):
            raise DataError(f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES} non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def confusion_matrix(preds: Sequence[SoftLabel], golds: Sequence[SoftLabel]) -> ConfusionMatrix:
    if len(preds) != len(golds):
        raise DataError(f"{len(preds)} predictions vs {len(golds)} gold labels")
    if not preds:
        raise DataError("cannot build a confusion matrix from zero samples")
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for p, g in zip(preds, golds):
        counts[g.argmax, p.argmax] += 1
    return ConfusionMatrix(counts)


def per_class_recall(m: ConfusionMatrix) -> tuple[float | None, ...]:
    """Diagonal over row sum per class; None (absent) for zero support."""
    out = []
    for c in range(NUM_CLASSES):
        support = int(m.counts[c].sum())
        out.append(None if support == 0 else float(m.counts[c, c]) / support)
    return tuple(out)


def balanced_accuracy(m: ConfusionMatrix) -> float:
    recalls = [r for r in per_class_recall(m) if r is not None]
    if not recalls:
        raise DataError("balanced accuracy undefined: no class has support")
    return float(sum(recalls) / len(recalls))


def format_report(m: ConfusionMatrix) -> str:
    """Human-readable confusion matrix, recalls and balanced accuracy."""
    width = max(6, max(len(n) for n in CLASS_NAMES) + 1)
    lines = ["confusion matrix (rows = gold, cols = predicted)"]
    header = " " * width + "".join(f"{n:>{width}}" for n in CLASS_NAMES)
    lines.append(header)
    for c in range(NUM_CLASSES):
        row = "".join(f"{int(v):>{width}}" for v in m.counts[c])
        lines.append(f"{CLASS_NAMES[c]:<{width}}" + row)
    lines.append("")
    for c, r in enumerate(per_class_recall(m)):
        shown = "absent" if r is None else f"{r:.4f}"
        lines.append(f"recall[{CLASS_NAMES[c]}] = {shown}")
    lines.append(f"balanced_accuracy = {balanced_accuracy(m):.6f}")
    return "\n".join(lines) + "\n"


def report_csv(m: ConfusionMatrix) -> str:
    """Machine-readable counterpart of :func:`format_report`."""
    lines = ["class,support,recall"]
    for c, r in enumerate(per_class_recall(m)):
        shown = "" if r is None else format(r, ".17g")
        lines.append(f"{CLASS_NAMES[c]},{int(m.counts[c].sum())},{shown}")
    lines.append(f"balanced_accuracy,,{format(balanced_accuracy(m), '.17g')}")
    return "\n".join(lines) + "\n"


def confusion_csv(m: ConfusionMatrix) -> str:
    lines = ["gold\\pred," + ",".join(CLASS_NAMES)]
    for c in range(NUM_CLASSES):
        lines.append(CLASS_NAMES[c] + "," + ",".join(str(int(v)) for v in m.counts[c]))
    return "\n".join(lines) + "\n"
