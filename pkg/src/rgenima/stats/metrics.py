"""Accuracy, macro-F1 and one-vs-rest precision/recall/F1/specificity."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..genome.types import STAGES


class EmptyMatrix(ValueError):
    pass


@dataclass
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    specificity: float
    support: int
    flags: list[str] = field(default_factory=list)  # metrics whose denominator was zero


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class: list[ClassMetrics]
    total: int


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def classification_metrics(confusion, labels=STAGES, unparsed=None) -> MetricsReport:
    """Metrics from a confusion matrix (rows true, columns predicted).

    ``unparsed[c]`` counts class-c samples with no usable prediction; they
    count as false negatives for c and as errors in accuracy.
    """
    m = np.asarray(confusion, dtype=np.int64)
    k = m.shape[0]
    if m.shape != (k, k) or k != len(labels):
        raise ValueError(f"confusion must be {len(labels)}x{len(labels)}")
    if np.any(m < 0):
        raise ValueError("counts must be non-negative")
    miss = np.zeros(k, dtype=np.int64) if unparsed is None else np.asarray(unparsed, dtype=np.int64)
    total = int(m.sum() + miss.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    per = []
    for c in range(k):
        tp = int(m[c, c])
        fp = int(m[:, c].sum()) - tp
        fn = int(m[c].sum()) - tp + int(miss[c])
        tn = total - tp - fp - fn
        flags: list[str] = []
        p = _ratio(tp, tp + fp, "precision", flags)
        r = _ratio(tp, tp + fn, "recall", flags)
        f1 = _ratio(2 * p * r, p + r, "f1", flags)
        spec = _ratio(tn, tn + fp, "specificity", flags)
        per.append(ClassMetrics(labels[c], p, r, f1, spec, tp + fn, flags))
    return MetricsReport(float(np.trace(m)) / total, float(np.mean([c.f1 for c in per])), per, total)


def write_metrics(report: MetricsReport, path) -> None:
    """Per-class TSV rows followed by a summary row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("class\tprecision\trecall\tf1\tspecificity\tsupport\tflags\n")
        for c in report.per_class:
            fh.write(f"{c.label}\t{c.precision:.6f}\t{c.recall:.6f}\t{c.f1:.6f}\t{c.specificity:.6f}\t"
                     f"{c.support}\t{','.join(c.flags) or '-'}\n")
        fh.write(f"summary\taccuracy={report.accuracy:.6f}\tmacro_f1={report.macro_f1:.6f}\t\t\t{report.total}\t-\n")


def write_confusion(confusion, path, labels=STAGES, unparsed=None) -> None:
    m = np.asarray(confusion)
    miss = np.zeros(len(labels), dtype=np.int64) if unparsed is None else np.asarray(unparsed)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("true\\pred\t" + "\t".join(labels) + "\tUnparseable\n")
        for i, lab in enumerate(labels):
            fh.write(lab + "\t" + "\t".join(str(int(v)) for v in m[i]) + f"\t{int(miss[i])}\n")
