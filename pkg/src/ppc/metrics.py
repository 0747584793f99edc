"""Classification metrics over conformance scores.

Scores are p-values where LOWER means more anomalous; every function here
treats "positive" as the anomalous class and flags an item positive when
its score is strictly below the threshold.  Degenerate denominators yield
``None`` rather than NaN.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    x: float
    y: float


def _check_scored(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        raise DataError("no scored items")
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} must be "
                        "equal-length vectors")
    return scores, labels


def _check_both_classes(labels):
    if labels.all() or not labels.any():
        raise DataError("need both classes present")


def confusion(scores, labels, alpha: float) -> ConfusionCounts:
    """Exact counts for the rule: anomalous iff score < alpha."""
    scores, labels = _check_scored(scores, labels)
    flagged = scores < alpha
    return ConfusionCounts(
        tp=int(np.sum(flagged & labels)),
        fp=int(np.sum(flagged & ~labels)),
        tn=int(np.sum(~flagged & ~labels)),
        fn=int(np.sum(~flagged & labels)),
    )


def _ratio(num: int, den: int):
    return None if den == 0 else num / den


def metrics_suite(c: ConfusionCounts) -> dict:
    recall = _ratio(c.tp, c.tp + c.fn)
    precision = _ratio(c.tp, c.tp + c.fp)
    specificity = _ratio(c.tn, c.tn + c.fp)
    balanced = None if recall is None or specificity is None else (recall + specificity) / 2
    mcc_den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = None if mcc_den == 0 else (
        (c.tp * c.tn - c.fp * c.fn) / math.sqrt(mcc_den)
    )
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return {
        "recall": recall,
        "precision": precision,
        "specificity": specificity,
        "balanced_accuracy": balanced,
        "mcc": mcc,
        "f1": f1,
    }


def _grouped_counts(scores, labels):
    """Per distinct score (ascending): cumulative positives and negatives
    among items with score <= that value.  Ties share one threshold."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    pos = labels[order].astype(np.int64)
    values, last = np.unique(s, return_index=True)
    # index of the last element of each tie group
    ends = np.append(last[1:], s.size) - 1
    cum_pos = np.cumsum(pos)[ends]
    cum_all = ends + 1
    return values, cum_pos, cum_all - cum_pos


def roc_curve(scores, labels) -> list[CurvePoint]:
    scores, labels = _check_scored(scores, labels)
    _check_both_classes(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    values, cum_pos, cum_neg = _grouped_counts(scores, labels)
    points = [CurvePoint(threshold=-math.inf, x=0.0, y=0.0)]
    for v, tp, fp in zip(values, cum_pos, cum_neg):
        points.append(CurvePoint(threshold=float(v), x=fp / n_neg, y=tp / n_pos))
    return points


def roc_auc(scores, labels) -> float:
    pts = roc_curve(scores, labels)
    xs = np.array([p.x for p in pts])
    ys = np.array([p.y for p in pts])
    return float(np.trapezoid(ys, xs))


def pr_curve(scores, labels) -> list[CurvePoint]:
    scores, labels = _check_scored(scores, labels)
    _check_both_classes(labels)
    n_pos = int(labels.sum())
    values, cum_pos, cum_neg = _grouped_counts(scores, labels)
    points = []
    for v, tp, fp in zip(values, cum_pos, cum_neg):
        points.append(CurvePoint(threshold=float(v), x=tp / n_pos, y=tp / (tp + fp)))
    return points


def pr_auc(scores, labels) -> float:
    """Step-wise area: precision held constant over each recall increment."""
    pts = pr_curve(scores, labels)
    area = 0.0
    prev_recall = 0.0
    for p in pts:
        area += (p.x - prev_recall) * p.y
        prev_recall = p.x
    return float(area)


def select_threshold_max_f1(scores, labels) -> float:
    """Alpha maximizing F1 under the score < alpha rule.

    Candidates are every distinct score plus a value just above the maximum
    (the flag-everything branch); ties break toward the smaller alpha.
    """
    scores, labels = _check_scored(scores, labels)
    _check_both_classes(labels)
    values = np.unique(scores)
    candidates = np.append(values, np.nextafter(values[-1], np.inf))
    best_alpha, best_f1 = None, -1.0
    for alpha in candidates:
        f1 = metrics_suite(confusion(scores, labels, float(alpha)))["f1"]
        if f1 is not None and f1 > best_f1:
            best_alpha, best_f1 = float(alpha), f1
    return best_alpha if best_alpha is not None else float(candidates[0])


def fit_gaussian(xs, pdf_values) -> tuple[float, float]:
    """Moment fit of a discretized density on a uniform grid."""
    xs = np.asarray(xs, dtype=np.float64)
    pdf = np.asarray(pdf_values, dtype=np.float64)
    if xs.shape != pdf.shape or xs.ndim != 1 or xs.size < 2:
        raise DataError("fit_gaussian: need matching 1-d grid and values")
    steps = np.diff(xs)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12) or steps[0] <= 0:
        raise DataError("fit_gaussian: grid must be uniform and increasing")
    if np.any(pdf < 0):
        raise DataError("fit_gaussian: negative density values")
    mass = pdf.sum()
    if mass == 0:
        raise DataError("fit_gaussian: zero total mass")
    w = pdf / mass
    mu = float(np.sum(w * xs))
    sigma = float(math.sqrt(np.sum(w * (xs - mu) ** 2)))
    return mu, sigma


def ks_uniformity(ps) -> float:
    """Sup distance between the empirical CDF of ps and the uniform CDF."""
    ps = np.sort(np.asarray(ps, dtype=np.float64))
    if ps.size == 0:
        raise DataError("ks_uniformity: empty input")
    if np.any(ps < 0) or np.any(ps > 1):
        raise DataError("ks_uniformity: values must lie in [0, 1]")
    n = ps.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - ps), np.max(ps - (i - 1) / n)))


# ---------------------------------------------------------------------------
# export formats


def metrics_to_json(counts: ConfusionCounts, roc: float, pr: float, alpha: float) -> str:
    payload = dict(metrics_suite(counts))
    payload.update({
        "roc_auc": roc, "pr_auc": pr, "alpha": alpha,
        "tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn,
    })
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def curve_to_csv(points: list[CurvePoint], x_name: str, y_name: str) -> str:
    lines = [f"threshold,{x_name},{y_name}"]
    for p in points:
        lines.append(f"{p.threshold:.10g},{p.x:.10g},{p.y:.10g}")
    return "\n".join(lines) + "\n"
