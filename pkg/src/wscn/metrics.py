"""Evaluation metrics: confusion counts, MCC, per-class tables, ROC-AUC,
and thresholded mask overlap scores.

Everything here consumes plain ndarrays (no tape involvement).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred, true, positive_class):
    """One-vs-rest confusion counts for a single class."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ShapeError(f"confusion expects matching 1-D arrays, got {pred.shape}, {true.shape}")
    p = pred == positive_class
    t = true == positive_class
    return ConfusionCounts(
        tp=int(np.sum(p & t)),
        tn=int(np.sum(~p & ~t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def mcc(cc):
    """Matthews correlation coefficient; 0 when any denominator factor is 0."""
    d1 = cc.tp + cc.fp
    d2 = cc.tp + cc.fn
    d3 = cc.tn + cc.fp
    d4 = cc.tn + cc.fn
    if 0 in (d1, d2, d3, d4):
        return 0.0
    num = cc.tp * cc.tn - cc.fp * cc.fn
    return num / math.sqrt(float(d1) * d2 * d3 * d4)


def accuracy(cc):
    return (cc.tp + cc.tn) / cc.total if cc.total else 0.0


def precision(cc):
    denom = cc.tp + cc.fp
    return cc.tp / denom if denom else 0.0


def recall(cc):
    denom = cc.tp + cc.fn
    return cc.tp / denom if denom else 0.0


def _rank_with_ties(scores):
    """1-based ranks, ties replaced by their group's average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, positives):
    """One-vs-rest ROC-AUC via the rank (Mann-Whitney) statistic.

    Tied scores count half. Returns None when either class is empty
    (no pairs to rank).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ShapeError(f"roc_auc expects matching 1-D arrays, got {scores.shape}, {positives.shape}")
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _rank_with_ties(scores)
    pos_rank_sum = ranks[positives].sum()
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def macro_auc(probs, true):
    """Mean one-vs-rest AUC over classes present in the ground truth.

    Returns (macro value or None, list of skipped class indices). A
    class is skipped when it has no positives or no negatives.
    """
    probs = np.asarray(probs)
    true = np.asarray(true)
    if probs.ndim != 2 or true.shape != (probs.shape[0],):
        raise ShapeError(f"macro_auc expects probs (N,K), labels (N,); got {probs.shape}, {true.shape}")
    values, skipped = [], []
    for k in range(probs.shape[1]):
        auc = roc_auc(probs[:, k], true == k)
        if auc is None:
            skipped.append(k)
        else:
            values.append(auc)
    if not values:
        return None, skipped
    return float(np.mean(values)), skipped


# Class group rows mirror the defect-count breakdown of the 38-class
# taxonomy: 1 normal, 8 singles, 13 doubles, 12 triples, 4 quadruples.
GROUPS = (
    ("Avg(1Defect)", range(1, 9)),
    ("Avg(2Defects)", range(9, 22)),
    ("Avg(3Defects)", range(22, 34)),
    ("Avg(4Defects)", range(34, 38)),
    ("Avg(All38)", range(0, 38)),
)


def class_report(pred, true, n_classes=38, class_names=None):
    """Per-class accuracy/precision/recall plus group averages.

    Returns a dict with ``rows`` (one per class), ``groups`` (the
    defect-count averages when n_classes == 38), ``overall_accuracy``,
    and macro-averaged ``mcc`` over classes present in ``true``.
    """
    pred = np.asarray(pred)
    true = np.asarray(true)
    rows = []
    mccs = []
    for k in range(n_classes):
        cc = confusion(pred, true, k)
        row = {
            "class": k,
            "name": class_names[k] if class_names else str(k),
            "accuracy": accuracy(cc),
            "precision": precision(cc),
            "recall": recall(cc),
            "support": int(cc.tp + cc.fn),
        }
        rows.append(row)
        if row["support"] > 0:
            mccs.append(mcc(cc))
    groups = []
    if n_classes == 38:
        for name, members in GROUPS:
            groups.append({
                "name": name,
                "accuracy": float(np.mean([rows[k]["accuracy"] for k in members])),
                "precision": float(np.mean([rows[k]["precision"] for k in members])),
                "recall": float(np.mean([rows[k]["recall"] for k in members])),
            })
    return {
        "rows": rows,
        "groups": groups,
        "overall_accuracy": float(np.mean(pred == true)) if len(true) else 0.0,
        "mcc": float(np.mean(mccs)) if mccs else 0.0,
    }


def _binarize(pred, true, threshold):
    p = np.asarray(pred)
    t = np.asarray(true)
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return p >= threshold, t >= threshold


def dice_coefficient(pred, true, threshold=0.5):
    """Global Dice overlap of thresholded masks; empty vs empty is 1.0."""
    p, t = _binarize(pred, true, threshold)
    inter = int(np.sum(p & t))
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def iou(pred, true, threshold=0.5):
    """Global intersection-over-union; empty vs empty is 1.0."""
    p, t = _binarize(pred, true, threshold)
    inter = int(np.sum(p & t))
    union = int(np.sum(p | t))
    if union == 0:
        return 1.0
    return inter / union


def report_csv_lines(report):
    """Render a class report as CSV lines (header, classes, group rows)."""
    lines = ["class,name,accuracy,precision,recall,support"]
    for r in report["rows"]:
        lines.append(
            f"{r['class']},{r['name']},{r['accuracy']:.6f},"
            f"{r['precision']:.6f},{r['recall']:.6f},{r['support']}"
        )
    for g in report["groups"]:
        lines.append(
            f",{g['name']},{g['accuracy']:.6f},{g['precision']:.6f},{g['recall']:.6f},"
        )
    return lines


def summary_text(report, extras=None):
    """Plain-text run summary: overall accuracy, MCC, and any extras."""
    lines = [
        f"overall_accuracy: {report['overall_accuracy']:.6f}",
        f"mcc: {report['mcc']:.6f}",
    ]
    for key, value in (extras or {}).items():
        if isinstance(value, float):
            lines.append(f"{key}: {value:.6f}")
        else:
            lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"
