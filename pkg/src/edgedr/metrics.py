"""Classification quality metrics over the five severity grades."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .dataset import LabeledImage, preprocess
from .graph import NUM_CLASSES, DRLabel, ModelGraph, classify


@dataclass(frozen=True)
class ClassificationReport:
    """Confusion matrix (rows = true, cols = predicted) plus derived rates.

    Per-class precision/recall are 0 when their denominator is 0, and F1
    is the harmonic mean of the two (0 when both are 0); macro metrics
    average the per-class values uniformly.
    """

    confusion: np.ndarray  # (5, 5) int64
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float

    @classmethod
    def from_confusion(cls, confusion) -> "ClassificationReport":
        conf = np.asarray(confusion, dtype=np.int64)
        if conf.shape != (NUM_CLASSES, NUM_CLASSES) or (conf < 0).any():
            raise ValueError(f"confusion matrix must be non-negative {NUM_CLASSES}x{NUM_CLASSES}")
        total = int(conf.sum())
        if total == 0:
            raise ValueError("confusion matrix is empty")
        diag = np.diag(conf).astype(np.float64)
        col = conf.sum(axis=0).astype(np.float64)
        row = conf.sum(axis=1).astype(np.float64)
        precision = np.divide(diag, col, out=np.zeros(NUM_CLASSES), where=col > 0)
        recall = np.divide(diag, row, out=np.zeros(NUM_CLASSES), where=row > 0)
        pr = precision + recall
        f1 = np.divide(2 * precision * recall, pr, out=np.zeros(NUM_CLASSES), where=pr > 0)
        return cls(
            confusion=conf,
            accuracy=float(np.trace(conf)) / total,
            precision=precision,
            recall=recall,
            f1=f1,
            macro_precision=float(precision.mean()),
            macro_recall=float(recall.mean()),
            macro_f1=float(f1.mean()),
        )

    def to_text(self) -> str:
        lines = [f"samples: {int(self.confusion.sum())}", f"accuracy: {self.accuracy:.4f}"]
        lines.append(f"{'class':<14}{'precision':>10}{'recall':>10}{'f1':>10}")
        for label in DRLabel:
            i = label.value
            lines.append(
                f"{label.name:<14}{self.precision[i]:>10.4f}"
                f"{self.recall[i]:>10.4f}{self.f1[i]:>10.4f}"
            )
        lines.append(
            f"{'macro':<14}{self.macro_precision:>10.4f}"
            f"{self.macro_recall:>10.4f}{self.macro_f1:>10.4f}"
        )
        lines.append("confusion (rows = true, cols = predicted):")
        for row in self.confusion:
            lines.append("  " + " ".join(f"{v:6d}" for v in row))
        return "\n".join(lines)

    def to_machine(self) -> str:
        lines = [f"accuracy {self.accuracy!r}"]
        for label in DRLabel:
            i = label.value
            lines.append(f"precision_{label.name} {float(self.precision[i])!r}")
            lines.append(f"recall_{label.name} {float(self.recall[i])!r}")
            lines.append(f"f1_{label.name} {float(self.f1[i])!r}")
        lines.append(f"macro_precision {self.macro_precision!r}")
        lines.append(f"macro_recall {self.macro_recall!r}")
        lines.append(f"macro_f1 {self.macro_f1!r}")
        for row in self.confusion:
            lines.append(" ".join(str(int(v)) for v in row))
        return "\n".join(lines)


def evaluate(graph: ModelGraph, images: Iterable[LabeledImage]) -> ClassificationReport:
    """Classify every image and accumulate the confusion matrix.

    Accumulation is a commutative count merge, so evaluating shards in
    parallel and summing their matrices gives the identical report.
    """
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    n = 0
    for image in images:
        predicted, _ = classify(graph, preprocess(image))
        confusion[image.label.value, predicted.value] += 1
        n += 1
    if n == 0:
        raise ValueError("evaluation needs at least one image")
    return ClassificationReport.from_confusion(confusion)
