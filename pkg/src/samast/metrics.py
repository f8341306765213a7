"""ICBHI scoring: confusion matrix, Normal-vs-Abnormal sensitivity/specificity, score."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

NUM_CLASSES = 4
NORMAL = 0
ABNORMAL = (1, 2, 3)
CLASS_NAMES = ("Normal", "Crackle", "Wheeze", "Both")


def confusion_matrix(true_labels, predicted_labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts ``[true, predicted]``."""
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise ContractError(f"{t.size} true labels vs {p.size} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        bad = np.flatnonzero((arr < 0) | (arr >= num_classes))
        if bad.size:
            raise ContractError(f"{name} label {int(arr[bad[0]])} at index {int(bad[0])} outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return counts


def sensitivity(confusion: np.ndarray, strict: bool = False) -> float | None:
    """Fraction of abnormal cycles predicted abnormal; ``None`` when there are none.

    ``strict`` counts only exact-class hits (the per-class official variant).
    """
    c = np.asarray(confusion)
    abnormal = list(ABNORMAL)
    total = int(c[abnormal, :].sum())
    if total == 0:
        return None
    hits = int(np.trace(c)) - int(c[NORMAL, NORMAL]) if strict else int(c[np.ix_(abnormal, abnormal)].sum())
    return hits / total


def specificity(confusion: np.ndarray) -> float | None:
    c = np.asarray(confusion)
    total = int(c[NORMAL, :].sum())
    if total == 0:
        return None
    return int(c[NORMAL, NORMAL]) / total


def score(se: float | None, sp: float | None) -> float | None:
    if se is None or sp is None:
        return None
    return (se + sp) / 2.0


@dataclass(frozen=True)
class EvalReport:
    confusion: np.ndarray
    sensitivity: float | None
    specificity: float | None
    score: float | None
    per_class_accuracy: tuple[float | None, ...]
    accuracy: float | None
    n_total: int
    strict: bool = False

    @property
    def undefined(self) -> tuple[str, ...]:
        return tuple(
            name
            for name, value in (("sensitivity", self.sensitivity), ("specificity", self.specificity), ("score", self.score))
            if value is None
        )


def build_report(confusion: np.ndarray, strict: bool = False) -> EvalReport:
    c = np.asarray(confusion, dtype=np.int64)
    if c.shape != (NUM_CLASSES, NUM_CLASSES) or (c < 0).any():
        raise ContractError(f"confusion must be a nonnegative {NUM_CLASSES}x{NUM_CLASSES} count matrix")
    se, sp = sensitivity(c, strict), specificity(c)
    rows = c.sum(axis=1)
    per_class = tuple(float(c[i, i] / rows[i]) if rows[i] else None for i in range(NUM_CLASSES))
    n = int(c.sum())
    return EvalReport(c, se, sp, score(se, sp), per_class, float(np.trace(c) / n) if n else None, n, strict)


def evaluate_predictions(true_labels, predicted_labels, strict: bool = False) -> EvalReport:
    return build_report(confusion_matrix(true_labels, predicted_labels), strict)


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def metrics_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    w.writerow(["sensitivity", _fmt(report.sensitivity)])
    w.writerow(["specificity", _fmt(report.specificity)])
    w.writerow(["score", _fmt(report.score)])
    w.writerow(["accuracy", _fmt(report.accuracy)])
    for name, acc in zip(CLASS_NAMES, report.per_class_accuracy):
        w.writerow([f"accuracy_{name.lower()}", _fmt(acc)])
    w.writerow(["n_total", report.n_total])
    w.writerow(["protocol", "strict" if report.strict else "relaxed"])
    return buf.getvalue()


def confusion_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true", "predicted", "count"])
    for t in range(NUM_CLASSES):
        for p in range(NUM_CLASSES):
            w.writerow([t, p, int(report.confusion[t, p])])
    return buf.getvalue()


def summary_text(report: EvalReport) -> str:
    lines = ["se,sp,score", ",".join(_fmt(v) for v in (report.sensitivity, report.specificity, report.score)), ""]
    width = max(len(n) for n in CLASS_NAMES)
    lines.append(" " * (width + 2) + " ".join(f"{n[:7]:>7}" for n in CLASS_NAMES))
    for name, row in zip(CLASS_NAMES, report.confusion):
        lines.append(f"{name:<{width}}  " + " ".join(f"{int(v):>7d}" for v in row))
    lines.append("")
    lines.append(f"n={report.n_total} accuracy={_fmt(report.accuracy)} protocol={'strict' if report.strict else 'relaxed'}")
    if report.undefined:
        lines.append("undefined: " + ", ".join(report.undefined))
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, out_dir, stem: str = "report") -> dict[str, Path]:
    """Write ``<stem>_metrics.csv``, ``<stem>_confusion.csv`` and ``<stem>_summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / f"{stem}_metrics.csv",
        "confusion": out / f"{stem}_confusion.csv",
        "summary": out / f"{stem}_summary.txt",
    }
    paths["metrics"].write_text(metrics_csv(report))
    paths["confusion"].write_text(confusion_csv(report))
    paths["summary"].write_text(summary_text(report))
    return paths


def read_confusion_csv(path) -> np.ndarray:
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            counts[int(row["true"]), int(row["predicted"])] = int(row["count"])
    return counts


def read_metrics_csv(path) -> dict[str, str]:
    with open(path, newline="") as fh:
        return {row["metric"]: row["value"] for row in csv.DictReader(fh)}
