"""Confusion metrics, ROC curves and fold aggregation.

The positive class is "good" (+1) and a score is the softmax probability of
that class.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError

METRIC_FIELDS = ("accuracy", "precision", "recall", "f1", "auc")


class UndefinedAucError(InputError):
    """AUC needs at least one positive and one negative example."""


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_points: list[tuple[float, float, float]] = field(default_factory=list)  # (threshold, fpr, tpr)
    auc: Optional[float] = None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def confusion(tp: int, fp: int, tn: int, fn: int) -> EvalReport:
    """Report with the threshold metrics filled in from raw counts (no ROC)."""
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return EvalReport(tp, fp, tn, fn, _ratio(tp + tn, tp + fp + tn + fn), precision, recall, f1)


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (1, -1)).all():
        raise InputError("labels must be +1 or -1")
    return s, y == 1


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """ROC points ``(threshold, fpr, tpr)`` from ``(inf, 0, 0)`` to ``(min score, 1, 1)``.

    Thresholds are the distinct scores in decreasing order; tied scores enter
    the curve together as one diagonal step.
    """
    s, pos = _as_arrays(scores, labels)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("ROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    tps = np.cumsum(pos)
    fps = np.cumsum(~pos)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    points = [(math.inf, 0.0, 0.0)]
    for i in np.flatnonzero(last_of_group):
        points.append((float(s[i]), fps[i] / n_neg, tps[i] / n_pos))
    return points


def auc_from_points(points: Sequence[tuple[float, float, float]]) -> float:
    area = 0.0
    for (_, x0, y0), (_, x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


def auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve (equals the Mann-Whitney statistic)."""
    return auc_from_points(roc_curve(scores, labels))


def evaluate(scores, labels, decision_threshold: float = 0.5) -> EvalReport:
    """Confusion metrics at ``score >= decision_threshold`` plus ROC/AUC.

    With a single class present the threshold metrics are still returned and
    ``auc`` is None; call :func:`auc` directly to get the error instead.
    """
    s, pos = _as_arrays(scores, labels)
    pred = s >= decision_threshold
    report = confusion(
        int((pred & pos).sum()), int((pred & ~pos).sum()), int((~pred & ~pos).sum()), int((~pred & pos).sum())
    )
    if pos.any() and (~pos).any():
        report.roc_points = roc_curve(s, np.where(pos, 1, -1))
        report.auc = auc_from_points(report.roc_points)
    return report


@dataclass
class FoldSummary:
    reports: list[EvalReport]
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: Optional[float]

    @property
    def mean_auc(self) -> Optional[float]:
        return self.auc


def aggregate_folds(reports: Sequence[EvalReport]) -> FoldSummary:
    """Unweighted mean of each metric across folds; per-fold ROC curves stay in ``reports``."""
    if not reports:
        raise InputError("need at least one fold report")
    means = {name: float(np.mean([getattr(r, name) for r in reports])) for name in ("accuracy", "precision", "recall", "f1")}
    aucs = [r.auc for r in reports]
    mean_auc = None if any(a is None for a in aucs) else float(np.mean(aucs))
    return FoldSummary(list(reports), auc=mean_auc, **means)


# -- CSV ---------------------------------------------------------------------------


def _fmt(x: Optional[float]) -> str:
    if x is None:
        return ""
    return "inf" if math.isinf(x) else repr(float(x))


def write_metrics_csv(rows: Sequence[tuple[str | int, EvalReport | FoldSummary]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", *METRIC_FIELDS])
        for fold, rep in rows:
            writer.writerow([fold, *(_fmt(getattr(rep, name)) for name in METRIC_FIELDS)])


def read_metrics_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_roc_csv(points: Sequence[tuple[float, float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in points:
            writer.writerow([_fmt(thr), _fmt(fpr), _fmt(tpr)])


def read_roc_csv(path) -> list[tuple[float, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["threshold", "fpr", "tpr"]:
            raise InputError(f"{path}: header must be threshold,fpr,tpr")
        return [(float(t), float(x), float(y)) for t, x, y in reader]
