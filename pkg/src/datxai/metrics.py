"""Confusion-matrix metrics, ROC/PR tables and optimal-threshold selection."""

from __future__ import annotations

import csv
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricSummary:
    accuracy: float
    specificity: float
    sensitivity: float
    precision: float
    f1: float
    cohen_kappa: float
    undefined: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "specificity": self.specificity,
                "sensitivity": self.sensitivity, "precision": self.precision,
                "f1": self.f1, "cohen_kappa": self.cohen_kappa,
                "undefined": list(self.undefined)}


@dataclass(frozen=True)
class ThresholdRow:
    threshold: float
    tpr: float
    fpr: float
    specificity: float
    lr_plus: float | None  # None when fpr == 0
    youden: float
    g_mean: float


@dataclass(frozen=True)
class PrRow:
    threshold: float
    precision: float
    recall: float
    f_measure: float


@dataclass
class CalibrationResult:
    criterion: str
    optimal_threshold: float
    optimal_value: float
    default_threshold: float = 0.5
    auc: float | None = None
    before: MetricSummary | None = None
    after: MetricSummary | None = None
    row_index: int = 0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "default_threshold": self.default_threshold,
            "optimal_threshold": self.optimal_threshold,
            "optimal_value": self.optimal_value,
            "row_index": self.row_index,
            "auc": self.auc,
            "before": self.before.as_dict() if self.before else None,
            "after": self.after.as_dict() if self.after else None,
        }


def _arrays(probs, labels):
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise ValueError(f"{p.size} probabilities for {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return p, y.astype(int)


def confusion_at_threshold(probs, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Counts with ``p >= threshold`` predicted positive."""
    p, y = _arrays(probs, labels)
    pred = p >= threshold
    pos = y == 1
    return ConfusionCounts(tp=int(np.sum(pred & pos)), tn=int(np.sum(~pred & ~pos)),
                           fp=int(np.sum(pred & ~pos)), fn=int(np.sum(~pred & pos)))


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def summary_metrics(c: ConfusionCounts) -> MetricSummary:
    """Accuracy, specificity, sensitivity, precision, F1 and Cohen's kappa.

    Metrics with a zero denominator are reported as 0 and listed in
    ``undefined``. Kappa uses chance agreement from the product of the
    predicted and actual marginals.
    """
    n = c.n
    if n == 0:
        raise ValueError("no samples")
    undefined: list[str] = []
    acc = (c.tp + c.tn) / n
    spec = _ratio(c.tn, c.tn + c.fp, "specificity", undefined)
    sens = _ratio(c.tp, c.tp + c.fn, "sensitivity", undefined)
    prec = _ratio(c.tp, c.tp + c.fp, "precision", undefined)
    f1 = _ratio(2 * prec * sens, prec + sens, "f1", undefined)
    p_yes = ((c.tp + c.fp) / n) * ((c.tp + c.fn) / n)
    p_no = ((c.tn + c.fn) / n) * ((c.tn + c.fp) / n)
    pe = p_yes + p_no
    if pe == 1.0:
        # both raters constant and agreeing: perfect agreement by convention
        kappa = 1.0 if acc == 1.0 else 0.0
        if acc != 1.0:
            undefined.append("cohen_kappa")
    else:
        kappa = (acc - pe) / (1.0 - pe)
    return MetricSummary(acc, spec, sens, prec, f1, kappa, tuple(undefined))


def roc_table(probs, labels) -> list[ThresholdRow]:
    """One row per distinct probability (descending) after a sentinel row at
    ``max(p) + 1`` where nothing is called positive."""
    p, y = _arrays(probs, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC analysis needs both classes")
    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    tp_cum = np.cumsum(ys == 1)
    fp_cum = np.cumsum(ys == 0)
    # last index of every run of equal probabilities
    ends = np.r_[np.nonzero(np.diff(ps))[0], ps.size - 1]
    thresholds = [float(ps[0] + 1.0)] + [float(ps[i]) for i in ends]
    tps = [0] + [int(tp_cum[i]) for i in ends]
    fps = [0] + [int(fp_cum[i]) for i in ends]
    return [roc_row(t, tp / n_pos, fp / n_neg) for t, tp, fp in zip(thresholds, tps, fps)]


def roc_row(threshold, tpr, fpr) -> ThresholdRow:
    spec = 1.0 - fpr
    return ThresholdRow(
        threshold=float(threshold), tpr=float(tpr), fpr=float(fpr), specificity=spec,
        lr_plus=None if fpr == 0 else tpr / fpr,
        youden=tpr - fpr,
        g_mean=math.sqrt(tpr * spec),
    )


def f_measure(precision, recall) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def pr_table(probs, labels) -> list[PrRow]:
    """Precision/recall/F-measure at every distinct probability, ascending."""
    p, y = _arrays(probs, labels)
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        raise ValueError("PR analysis needs at least one positive")
    rows = []
    for t in np.unique(p):
        pred = p >= t
        tp = int(np.sum(pred & (y == 1)))
        fp = int(np.sum(pred & (y == 0)))
        prec = tp / (tp + fp)
        rec = tp / n_pos
        rows.append(PrRow(float(t), prec, rec, f_measure(prec, rec)))
    return rows


def auc_trapezoid(rows) -> float:
    """Trapezoidal area under TPR-vs-FPR, closing the curve at (0,0) and (1,1)."""
    if len(rows) < 2:
        raise ValueError("need at least two ROC rows")
    pts = sorted({(r.fpr, r.tpr) for r in rows} | {(0.0, 0.0), (1.0, 1.0)})
    fpr = np.array([q[0] for q in pts])
    tpr = np.array([q[1] for q in pts])
    if not (np.all(np.isfinite(fpr)) and np.all(np.isfinite(tpr))):
        raise ValueError("ROC rows contain non-finite rates")
    # exact rational sum, so a perfect separator integrates to exactly 1
    area = sum((Fraction(f1) - Fraction(f0)) * (Fraction(t1) + Fraction(t0)) / 2
               for f0, f1, t0, t1 in zip(fpr[:-1], fpr[1:], tpr[:-1], tpr[1:]))
    return min(max(float(area), 0.0), 1.0)


def roc_auc(probs, labels) -> float:
    return auc_trapezoid(roc_table(probs, labels))


CRITERIA = {"g_mean": "g_mean", "gmean": "g_mean", "f_measure": "f_measure", "fmeasure": "f_measure"}


def select_threshold(rows, criterion: str = "g_mean", probs=None, labels=None,
                     default_threshold: float = 0.5) -> CalibrationResult:
    """Pick the row maximizing ``criterion``; ties go to the highest threshold.

    With ``probs``/``labels`` the result also carries metric summaries at the
    default and the chosen threshold, plus the ROC AUC.
    """
    if not rows:
        raise ValueError("no rows to choose from")
    key = CRITERIA.get(criterion)
    if key is None:
        raise ValueError(f"unknown criterion {criterion!r}")
    best = max(range(len(rows)), key=lambda i: (getattr(rows[i], key), rows[i].threshold))
    row = rows[best]
    result = CalibrationResult(key, row.threshold, getattr(row, key),
                               default_threshold=default_threshold, row_index=best)
    if probs is not None and labels is not None:
        result.before = summary_metrics(confusion_at_threshold(probs, labels, default_threshold))
        result.after = summary_metrics(confusion_at_threshold(probs, labels, row.threshold))
        result.auc = roc_auc(probs, labels)
    elif len(rows) >= 2 and isinstance(rows[0], ThresholdRow):
        result.auc = auc_trapezoid(rows)
    return result


def calibrate(probs, labels, criterion: str = "g_mean") -> CalibrationResult:
    key = CRITERIA.get(criterion, criterion)
    rows = roc_table(probs, labels) if key == "g_mean" else pr_table(probs, labels)
    return select_threshold(rows, key, probs, labels)


# ------------------------------------------------------------------ CSV files

ROC_COLUMNS = ("no", "threshold", "tpr", "fpr", "specificity", "lr_plus", "youden", "g_mean")
PR_COLUMNS = ("no", "threshold", "precision", "recall", "f_measure")


def _fmt(v):
    return "-" if v is None else repr(float(v))


def write_roc_csv(path, rows, preamble: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if preamble:
            fh.write(f"# {preamble}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROC_COLUMNS)
        for i, r in enumerate(rows, 1):
            w.writerow([i] + [_fmt(getattr(r, c)) for c in ROC_COLUMNS[1:]])


def write_pr_csv(path, rows, preamble: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if preamble:
            fh.write(f"# {preamble}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PR_COLUMNS)
        for i, r in enumerate(rows, 1):
            w.writerow([i] + [_fmt(getattr(r, c)) for c in PR_COLUMNS[1:]])


def _read_rows(path, columns):
    with open(path, newline="") as fh:
        reader = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
        if tuple(reader.fieldnames or ()) != columns:
            raise ValueError(f"{path}: expected columns {','.join(columns)}")
        return list(reader)


def read_roc_csv(path) -> list[ThresholdRow]:
    out = []
    for r in _read_rows(path, ROC_COLUMNS):
        out.append(ThresholdRow(
            float(r["threshold"]), float(r["tpr"]), float(r["fpr"]), float(r["specificity"]),
            None if r["lr_plus"].strip() in ("-", "") else float(r["lr_plus"]),
            float(r["youden"]), float(r["g_mean"])))
    return out


def read_pr_csv(path) -> list[PrRow]:
    return [PrRow(float(r["threshold"]), float(r["precision"]), float(r["recall"]),
                  float(r["f_measure"])) for r in _read_rows(path, PR_COLUMNS)]
