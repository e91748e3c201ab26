"""Binary classification metrics: rank AUC, ROC points and thresholded scores."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

TASK_NAMES = ("ATC", "FTC", "MTC")


def auc_mann_whitney(y_true, scores) -> Optional[float]:
    """AUC = U / (n_pos n_neg) using mid-ranks for ties; None if a class is absent."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(y_true, scores, eps: float = 1e-9):
    """(thresholds, fpr, tpr) sweeping the threshold from above the top score down.

    A sample is called positive when score >= threshold.  Scores are
    probabilities, so the sweep opens at (1+eps, 0, 0) and closes at (-eps, 1, 1).
    """
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    distinct = np.unique(s)[::-1]
    thresholds = np.concatenate([[max(1.0, distinct[0]) + eps], distinct, [min(0.0, distinct[-1]) - eps]])
    tpr = np.array([(s[y] >= t).sum() / n_pos for t in thresholds])
    fpr = np.array([(s[~y] >= t).sum() / n_neg for t in thresholds])
    return thresholds, fpr, tpr


def trapezoid_auc(fpr, tpr) -> float:
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class TaskMetrics:
    auc: Optional[float]
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: list          # [[tn, fp], [fn, tp]]
    n: int


def binary_metrics(y_true, scores, threshold: float = 0.5) -> TaskMetrics:
    y = np.asarray(y_true).astype(bool)
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    n = len(y)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return TaskMetrics(
        auc=auc_mann_whitney(y, scores),
        accuracy=(tp + tn) / n if n else 0.0,
        precision=precision,
        recall=recall,
        f1=f1,
        confusion=[[tn, fp], [fn, tp]],
        n=n,
    )


@dataclass
class MetricsReport:
    tasks: dict = field(default_factory=dict)      # task name -> TaskMetrics

    @property
    def macro_auc(self) -> Optional[float]:
        aucs = [m.auc for m in self.tasks.values() if m.auc is not None]
        return float(np.mean(aucs)) if aucs else None

    def to_dict(self) -> dict:
        out = {name: asdict(m) for name, m in self.tasks.items()}
        out["macro_auc"] = self.macro_auc
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def task_report(subtype_codes: Sequence[int], positive_probs: np.ndarray) -> MetricsReport:
    """Per-task metrics on the Benign + subtype-t rows; probs is [N, 3]."""
    codes = np.asarray(subtype_codes)
    probs = np.asarray(positive_probs, dtype=np.float64)
    report = MetricsReport()
    for t, name in enumerate(TASK_NAMES, start=1):
        rows = (codes == 0) | (codes == t)
        if not rows.any():
            continue
        report.tasks[name] = binary_metrics(codes[rows] == t, probs[rows, t - 1])
    return report
