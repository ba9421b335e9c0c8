"""Classification metrics: confusion matrix, macro scores, one-vs-rest ROC/AUC."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

TABLE_COLUMNS = ("mAUC", "Accuracy", "Precision", "F1-Score", "Recall")
# reported full-scale results, emitted for comparison only
REFERENCE_ROW = {"model": "reference (published)", "mAUC": 0.930, "Accuracy": 0.77,
                 "Precision": 0.81, "F1-Score": 0.76, "Recall": 0.75}


def _check_range(values, k, what):
    values = np.asarray(values, dtype=np.int64)
    bad = np.flatnonzero((values < 0) | (values >= k))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{what}[{i}] = {values[i]} is outside [0, {k})")
    return values


def confusion_matrix(labels, predictions, k: int) -> np.ndarray:
    """``C[i, j]`` = number of samples with true class i predicted as j."""
    labels = _check_range(labels, k, "labels")
    predictions = _check_range(predictions, k, "predictions")
    if labels.shape != predictions.shape:
        raise DataError(f"{len(labels)} labels but {len(predictions)} predictions")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def per_class_scores(confusion) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1


def macro_scores(confusion) -> tuple[float, float, float, float]:
    """(accuracy, macro precision, macro recall, macro F1); 0/0 counts as 0."""
    cm = np.asarray(confusion, dtype=np.float64)
    accuracy = float(_safe_div(np.trace(cm), cm.sum()))
    precision, recall, f1 = per_class_scores(cm)
    return accuracy, float(precision.mean()), float(recall.mean()), float(f1.mean())


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)  # average ranks give ties half credit
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, positive) -> np.ndarray:
    """ROC points ``[(fpr, tpr), ...]`` from (0, 0) to (1, 1), one per distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = positive.sum()
    n_neg = len(positive) - n_pos
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positive[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1] if len(s) else np.zeros(0, int)
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    tpr = tps / n_pos if n_pos else np.zeros(len(tps))
    fpr = fps / n_neg if n_neg else np.zeros(len(fps))
    return np.column_stack([np.r_[0.0, fpr], np.r_[0.0, tpr]])


def roc_auc_ovr(scores, labels) -> tuple[np.ndarray, float, list]:
    """Per-class one-vs-rest AUC, their unweighted mean, and per-class ROC points.

    A class with no positive (or no negative) samples has an undefined AUC: it
    is reported as NaN, left out of the mean, and a warning is emitted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise DataError(f"scores must be [n, K], got shape {scores.shape}")
    k = scores.shape[1]
    labels = _check_range(labels, k, "labels")
    aucs = np.full(k, np.nan)
    points = []
    for c in range(k):
        positive = labels == c
        aucs[c] = binary_auc(scores[:, c], positive)
        points.append(roc_curve(scores[:, c], positive))
    missing = np.flatnonzero(np.isnan(aucs))
    if missing.size:
        warnings.warn(f"AUC undefined for classes {missing.tolist()} (only one label value present); "
                      "excluded from the mean", RuntimeWarning, stacklevel=2)
    mauc = float(np.nanmean(aucs)) if missing.size < k else float("nan")
    return aucs, mauc, points


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class_auc: np.ndarray
    mauc: float
    roc_points: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    @classmethod
    def from_scores(cls, scores, labels, class_names=None) -> "MetricsReport":
        scores = np.asarray(scores, dtype=np.float64)
        k = scores.shape[1]
        cm = confusion_matrix(labels, scores.argmax(axis=1), k)
        acc, prec, rec, f1 = macro_scores(cm)
        aucs, mauc, points = roc_auc_ovr(scores, labels)
        names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
        return cls(cm, acc, prec, rec, f1, aucs, mauc, points, names)

    def table_row(self) -> dict:
        return {"mAUC": self.mauc, "Accuracy": self.accuracy, "Precision": self.macro_precision,
                "F1-Score": self.macro_f1, "Recall": self.macro_recall}

    def to_dict(self) -> dict:
        return {
            "class_names": self.class_names,
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class_auc": [None if np.isnan(a) else float(a) for a in self.per_class_auc],
            "mauc": None if np.isnan(self.mauc) else self.mauc,
            "roc_points": [pts.tolist() for pts in self.roc_points],
            "reference": REFERENCE_ROW,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(np.asarray(d["confusion"], dtype=np.int64), d["accuracy"], d["macro_precision"],
                   d["macro_recall"], d["macro_f1"],
                   np.array([np.nan if a is None else a for a in d["per_class_auc"]]),
                   np.nan if d["mauc"] is None else d["mauc"],
                   [np.asarray(p) for p in d["roc_points"]], d.get("class_names", []))

    def table_csv(self, model_name: str = "this run") -> str:
        """Table-style CSV: this run plus the static published reference row."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("model",) + TABLE_COLUMNS)
        row = self.table_row()
        writer.writerow([model_name] + [f"{row[c]:.6f}" for c in TABLE_COLUMNS])
        writer.writerow([REFERENCE_ROW["model"]] + [f"{REFERENCE_ROW[c]:.3f}" for c in TABLE_COLUMNS])
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\pred"] + self.class_names)
        for name, row in zip(self.class_names, self.confusion):
            writer.writerow([name] + row.tolist())
        return buf.getvalue()

    def roc_csv(self, c: int) -> str:
        lines = ["fpr,tpr"] + [f"{f:.10f},{t:.10f}" for f, t in self.roc_points[c]]
        return "\n".join(lines) + "\n"
