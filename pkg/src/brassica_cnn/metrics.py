"""Confusion matrices and per-class / averaged classification metrics.

Rows of a confusion matrix are true classes and columns are predictions.
For class ``i``: TP is the diagonal entry, FP the rest of column ``i``, FN the
rest of row ``i`` and TN everything else.

F1 is the harmonic mean ``2PR / (P + R)``.  Any ratio whose denominator is
zero (a class never predicted, or never present) is reported as 0.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (k, k) int64

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()

    def tn(self) -> np.ndarray:
        return self.total - self.tp() - self.fp() - self.fn()

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion(true_labels, predicted_labels, k: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"{t.size} true labels but {p.size} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} label out of range [0, {k})")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    classes: tuple[ClassMetrics, ...]
    accuracy: float
    macro: ClassMetrics
    weighted: ClassMetrics
    total: int
    # one-vs-rest (TP + TN) / total for each class
    class_accuracy: tuple[float, ...] = ()


def report(cm: ConfusionMatrix) -> MetricsReport:
    total = cm.total
    if total <= 0:
        raise ValueError("cannot report on an empty confusion matrix")
    tp, fp, fn, tn = cm.tp(), cm.fp(), cm.fn(), cm.tn()
    support = cm.support()
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    per_class = tuple(
        ClassMetrics(float(p), float(r), float(f), int(s)) for p, r, f, s in zip(precision, recall, f1, support)
    )
    w = support / total
    macro = ClassMetrics(float(precision.mean()), float(recall.mean()), float(f1.mean()), total)
    weighted = ClassMetrics(float(w @ precision), float(w @ recall), float(w @ f1), total)
    return MetricsReport(
        classes=per_class,
        accuracy=float(tp.sum() / total),
        macro=macro,
        weighted=weighted,
        total=total,
        class_accuracy=tuple(float(v) for v in (tp + tn) / total),
    )


HEADER = ("precision", "recall", "f1-score", "support")


def render_report(r: MetricsReport, names, digits: int = 4) -> tuple[str, str]:
    """Fixed-width table plus a CSV twin of the same numbers."""
    names = list(names)
    if len(names) != len(r.classes):
        raise ValueError(f"{len(names)} names for {len(r.classes)} classes")
    width = max([len(n) for n in names] + [len("weighted avg")])
    fmt = f"{{:.{digits}f}}"
    col = max(len(h) for h in HEADER) + 1

    def line(label, cells):
        return label.rjust(width) + "".join(c.rjust(col) for c in cells)

    rows = [line("", HEADER), ""]
    for name, m in zip(names, r.classes):
        rows.append(line(name, [fmt.format(m.precision), fmt.format(m.recall), fmt.format(m.f1), str(m.support)]))
    rows.append("")
    rows.append(line("accuracy", ["", "", fmt.format(r.accuracy), str(r.total)]))
    for label, m in (("macro avg", r.macro), ("weighted avg", r.weighted)):
        rows.append(line(label, [fmt.format(m.precision), fmt.format(m.recall), fmt.format(m.f1), str(m.support)]))
    text = "\n".join(rows) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "precision", "recall", "f1", "support"])
    for name, m in zip(names, r.classes):
        writer.writerow([name, repr(m.precision), repr(m.recall), repr(m.f1), m.support])
    writer.writerow(["accuracy", "", "", repr(r.accuracy), r.total])
    for label, m in (("macro avg", r.macro), ("weighted avg", r.weighted)):
        writer.writerow([label, repr(m.precision), repr(m.recall), repr(m.f1), m.support])
    return text, buf.getvalue()


def parse_report_csv(text: str) -> dict[str, tuple]:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        out[row["class"]] = tuple(float(row[k]) if row[k] else None for k in ("precision", "recall", "f1")) + (
            int(row["support"]),
        )
    return out


def confusion_csv(cm: ConfusionMatrix, names) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\predicted", *names])
    for name, row in zip(names, cm.counts):
        writer.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()
