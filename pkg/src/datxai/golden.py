"""Reference tables shipped with the package, and the checks that replay them.

The probability fixture (``reference_probabilities.csv`` with
``reference_labels.csv``) is a 63-sample set (41 PD, 22 HC) whose ROC and PR
sweeps pass through every operating point listed in the ROC and PR
reference tables.
"""

from __future__ import annotations

import csv
import json
import math
from importlib import resources

from . import metrics
from .classifier import PredictionManifest

TOL_METRIC = 0.005
TOL_F = 0.0005


def data_path(name: str):
    return resources.files("datxai") / "data" / name


def reference_roc_rows():
    with resources.as_file(data_path("reference_roc.csv")) as p:
        return metrics.read_roc_csv(p)


def reference_pr_rows():
    with resources.as_file(data_path("reference_pr.csv")) as p:
        return metrics.read_pr_csv(p)


def reference_counts() -> dict:
    return json.loads(data_path("reference_counts.json").read_text())


def counts(table: str) -> metrics.ConfusionCounts:
    return metrics.ConfusionCounts(**reference_counts()[table]["counts"])


def probability_fixture():
    """``(ids, probabilities, labels)`` of the 63-sample fixture."""
    with resources.as_file(data_path("reference_probabilities.csv")) as p:
        manifest = PredictionManifest.from_csv(p, source="reference fixture")
    with resources.as_file(data_path("reference_labels.csv")) as p, open(p, newline="") as fh:
        labels = {r["id"]: int(r["label"]) for r in csv.DictReader(fh)}
    ids = list(manifest.probabilities)
    return ids, [manifest.probabilities[i] for i in ids], [labels[i] for i in ids]


def _close(a, b, tol):
    return abs(a - b) <= tol


def check_counts_table(name: str) -> list[str]:
    """Mismatch descriptions for the default or calibrated counts (empty when all cells agree)."""
    ref = reference_counts()[name]["reported"]
    got = metrics.summary_metrics(counts(name)).as_dict()
    return [f"{name}.{k}: {got[k]:.4f} vs {v}" for k, v in ref.items()
            if not _close(got[k], v, TOL_METRIC)]


def check_roc_reference() -> list[str]:
    bad = []
    rows = reference_roc_rows()
    for i, r in enumerate(rows, 1):
        calc = metrics.roc_row(r.threshold, r.tpr, r.fpr)
        for col in ("specificity", "youden", "g_mean"):
            if not _close(getattr(calc, col), getattr(r, col), TOL_METRIC):
                bad.append(f"roc reference row {i} {col}: {getattr(calc, col):.4f} vs {getattr(r, col)}")
        if (r.lr_plus is None) != (calc.lr_plus is None) or (
                r.lr_plus is not None and not math.isclose(calc.lr_plus, r.lr_plus, rel_tol=1e-3)):
            bad.append(f"roc reference row {i} lr_plus: {calc.lr_plus} vs {r.lr_plus}")
    chosen = metrics.select_threshold(rows, "g_mean")
    if chosen.optimal_threshold != reference_counts()["optimal_threshold"]["roc"]:
        bad.append(f"roc reference optimum {chosen.optimal_threshold}")
    _, p, y = probability_fixture()
    fixture_pts = [(r.tpr, r.fpr) for r in metrics.roc_table(p, y)]
    for i, r in enumerate(rows, 1):
        if not any(_close(r.tpr, a, 5e-4) and _close(r.fpr, b, 5e-4) for a, b in fixture_pts):
            bad.append(f"roc reference row {i} operating point missing from the fixture")
    return bad


def check_pr_reference() -> list[str]:
    bad = []
    rows = reference_pr_rows()
    for i, r in enumerate(rows, 1):
        f = metrics.f_measure(r.precision, r.recall)
        if not _close(f, r.f_measure, TOL_F):
            bad.append(f"pr reference row {i} f_measure: {f:.4f} vs {r.f_measure}")
    chosen = metrics.select_threshold(rows, "f_measure")
    if chosen.optimal_threshold != reference_counts()["optimal_threshold"]["pr"]:
        bad.append(f"pr reference optimum {chosen.optimal_threshold}")
    _, p, y = probability_fixture()
    fixture_pts = [(r.precision, r.recall) for r in metrics.pr_table(p, y)]
    for i, r in enumerate(rows, 1):
        if not any(_close(r.precision, a, 5e-4) and _close(r.recall, b, 5e-4) for a, b in fixture_pts):
            bad.append(f"pr reference row {i} operating point missing from the fixture")
    return bad


def selftest() -> tuple[int, int, list[str]]:
    """Replay the four reference tables; returns ``(matched, total, problems)``."""
    checks = [check_counts_table("at_default"), check_roc_reference(), check_pr_reference(),
              check_counts_table("at_calibrated")]
    problems = [p for c in checks for p in c]
    return sum(not c for c in checks), len(checks), problems
