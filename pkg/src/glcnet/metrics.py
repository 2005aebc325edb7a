"""Confusion-matrix accumulation and segmentation accuracy metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MetricsError(ValueError):
    """Raised for invalid class ids or malformed confusion matrices."""


@dataclass
class ConfusionMatrix:
    """Pixel counts with rows = actual class and columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise MetricsError(f"counts must be square, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise MetricsError("confusion counts must be non-negative")

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, actual: np.ndarray, predicted: np.ndarray) -> None:
        """Accumulate pixel-wise (actual, predicted) label pairs."""
        a = np.asarray(actual).ravel()
        p = np.asarray(predicted).ravel()
        if a.shape != p.shape:
            raise MetricsError(f"label shape mismatch: {a.shape} vs {p.shape}")
        c = self.num_classes
        for name, arr in (("actual", a), ("predicted", p)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise MetricsError(f"{name} class id outside [0, {c})")
        binned = np.bincount(a.astype(np.int64) * c + p.astype(np.int64), minlength=c * c)
        self.counts += binned.reshape(c, c)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Associative combine, so evaluation can be partitioned freely."""
        if other.num_classes != self.num_classes:
            raise MetricsError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class MetricReport:
    oa: float
    kappa: float
    f1_per_class: np.ndarray
    support_per_class: np.ndarray
    macro_f1: float  # artifact-added convenience, not part of the core metric set


def compute_metrics(cm: ConfusionMatrix, ignore_classes: tuple[int, ...] = ()) -> MetricReport:
    """Overall accuracy, chance-corrected agreement, and one-vs-rest F1.

    With ``ignore_classes`` set, those rows and columns are removed before
    any metric is computed (their pixels do not count at all).
    """
    counts = cm.counts
    if ignore_classes:
        keep = np.array([c for c in range(cm.num_classes) if c not in set(ignore_classes)])
        if keep.size == 0:
            raise MetricsError("ignore list removes every class")
        counts = counts[np.ix_(keep, keep)]

    counts = counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")

    oa = float(np.trace(counts) / total)
    actual = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    p_e = float((actual * predicted).sum() / (total * total))
    kappa = 0.0 if p_e == 1.0 else float((oa - p_e) / (1.0 - p_e))

    diag = np.diag(counts)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, diag / predicted, 0.0)
        recall = np.where(actual > 0, diag / actual, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)

    return MetricReport(
        oa=oa,
        kappa=kappa,
        f1_per_class=f1,
        support_per_class=actual.astype(np.int64),
        macro_f1=float(f1.mean()),
    )


def write_metrics_csv(report: MetricReport, path: Path, class_names: list[str] | None = None) -> None:
    """One row per class plus a summary row."""
    names = class_names or [f"class_{i}" for i in range(len(report.f1_per_class))]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "f1", "support"])
        for name, f1, sup in zip(names, report.f1_per_class, report.support_per_class):
            writer.writerow([name, f"{f1:.10g}", int(sup)])
        writer.writerow(["__summary__", f"oa={report.oa:.10g}", f"kappa={report.kappa:.10g}"])


def format_summary(report: MetricReport, class_names: list[str] | None = None) -> str:
    names = class_names or [f"class_{i}" for i in range(len(report.f1_per_class))]
    lines = [
        f"overall accuracy: {report.oa:.4f}",
        f"kappa:            {report.kappa:.4f}",
        f"macro F1:         {report.macro_f1:.4f}",
    ]
    for name, f1, sup in zip(names, report.f1_per_class, report.support_per_class):
        lines.append(f"  {name}: F1={f1:.4f} support={int(sup)}")
    return "\n".join(lines)
