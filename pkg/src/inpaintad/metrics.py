"""Evaluation protocol: image-level AUROC/AUPR/F1-max and pixel-level
AUROC/F1-max/PRO.

Tie handling is fixed: AUROC gives ties half credit (Mann-Whitney),
threshold candidate sets are the unique scores extended by +inf
(predict none) and -inf (predict all), and predictions use score >=
threshold. All four metrics are therefore invariant under strictly
increasing score transforms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ParameterError, UndefinedMetricError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _check_binary_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
        raise ParameterError("labels must be a flat array of 0/1")
    return labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative,
    ties counted half (Mann-Whitney / rank formulation)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary_labels(labels)
    if scores.shape != labels.shape:
        raise ParameterError("scores and labels must align")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [scores.size]))
    for lo, hi in zip(starts, ends):
        ranks[order[lo:hi]] = (lo + 1 + hi) / 2.0   # average 1-based rank
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _threshold_counts(scores: np.ndarray, labels: np.ndarray):
    """Cumulative tp/fp at every unique threshold, descending.

    Returns (thresholds_desc, tp, fp): predictions use score >= thr.
    """
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp_cum = np.cumsum(y)
    fp_cum = np.cumsum(1 - y)
    last_of_group = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    idx = np.concatenate((last_of_group, [s.size - 1]))
    return s[idx], tp_cum[idx].astype(np.float64), fp_cum[idx].astype(np.float64)


def aupr(scores, labels) -> float:
    """Average precision: sum over descending unique thresholds of
    (recall step) * (precision at that threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary_labels(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive")
    _, tp, fp = _threshold_counts(scores, labels)
    prev_tp = np.concatenate(([0.0], tp[:-1]))
    terms = ((tp - prev_tp) / n_pos) * (tp / (tp + fp))
    return float(np.sum(terms))


def f1_max(scores, labels) -> float:
    """Max F1 over the unique-score thresholds (plus the implicit
    predict-none/predict-all endpoints)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary_labels(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("F1-max needs at least one positive")
    _, tp, fp = _threshold_counts(scores, labels)
    fn = n_pos - tp
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)   # denominator >= n_pos >= 1
    best = float(np.max(f1))
    return max(best, 0.0)   # +inf endpoint predicts none -> F1 = 0


def pro(score_maps, gt_masks, fpr_cap: float = 0.3) -> float:
    """Per-Region Overlap: area under (mean per-region overlap) vs FPR
    for FPR in [0, fpr_cap], normalized by fpr_cap.

    Regions are 8-connected components of the ground-truth masks; the
    FPR pools negatives across the whole set.
    """
    if not 0.0 < fpr_cap <= 1.0:
        raise ParameterError(f"fpr_cap must lie in (0, 1], got {fpr_cap}")
    if len(score_maps) != len(gt_masks) or not score_maps:
        raise ParameterError("need matching, non-empty map and mask lists")

    region_scores: list[np.ndarray] = []
    neg_scores: list[np.ndarray] = []
    for sm, gt in zip(score_maps, gt_masks):
        sm = np.asarray(sm, dtype=np.float64)
        gt = np.asarray(gt)
        if sm.shape != gt.shape:
            raise ParameterError(f"score map {sm.shape} != gt mask {gt.shape}")
        labels, n = ndimage.label(gt > 0, structure=EIGHT_CONNECTED)
        for region in range(1, n + 1):
            region_scores.append(np.sort(sm[labels == region]))
        neg_scores.append(sm[gt == 0])
    if not region_scores:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    neg = np.sort(np.concatenate(neg_scores))
    if neg.size == 0:
        raise UndefinedMetricError("PRO needs at least one normal pixel")

    thresholds = np.unique(np.concatenate([np.concatenate(region_scores), neg]))[::-1]
    # counts of elements >= thr via searchsorted on ascending arrays
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    overlaps = np.empty((len(region_scores), thresholds.size))
    for i, rs in enumerate(region_scores):
        overlaps[i] = (rs.size - np.searchsorted(rs, thresholds, side="left")) / rs.size
    # contiguous per-threshold rows keep the mean bitwise equal to a 1-D mean
    pro_curve = np.ascontiguousarray(overlaps.T).mean(axis=1)

    fprs = np.concatenate(([0.0], fpr))
    pros = np.concatenate(([0.0], pro_curve))
    return curve_area(fprs, pros, fpr_cap) / fpr_cap


def curve_area(xs: np.ndarray, ys: np.ndarray, x_cap: float) -> float:
    """Trapezoidal area under a piecewise-linear curve over [0, x_cap],
    linearly interpolating the segment that crosses the cap."""
    area = 0.0
    for i in range(1, len(xs)):
        x0, x1 = xs[i - 1], xs[i]
        y0, y1 = ys[i - 1], ys[i]
        if x0 >= x_cap:
            break
        if x1 > x_cap:
            y1 = y0 + (y1 - y0) * (x_cap - x0) / (x1 - x0)
            x1 = x_cap
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


@dataclass
class EvaluationReport:
    """Per-category metric rows plus their unweighted means."""

    per_category: dict[str, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    COLUMNS = ("image_auroc", "image_aupr", "image_f1max",
               "pixel_auroc", "pixel_pro", "pixel_f1max")

    @property
    def mean(self) -> dict[str, float]:
        out = {}
        for col in self.COLUMNS:
            vals = [row[col] for row in self.per_category.values() if col in row]
            out[col] = float(np.mean(vals)) if vals else float("nan")
        return out

    def to_json(self) -> str:
        payload = {"per_category": self.per_category, "mean": self.mean, "counts": self.counts}
        return json.dumps(payload, sort_keys=True, indent=1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("category",) + self.COLUMNS)
            for cat in sorted(self.per_category):
                row = self.per_category[cat]
                writer.writerow([cat] + [f"{row[c]:.6f}" for c in self.COLUMNS])
            mean = self.mean
            writer.writerow(["mean"] + [f"{mean[c]:.6f}" for c in self.COLUMNS])


def category_metrics(
    image_scores,
    image_labels,
    pixel_maps,
    pixel_gts,
    fpr_cap: float = 0.3,
) -> dict[str, float]:
    """All six metrics for one category; pixel metrics pool pixels across
    the category's images."""
    row = {
        "image_auroc": auroc(image_scores, image_labels),
        "image_aupr": aupr(image_scores, image_labels),
        "image_f1max": f1_max(image_scores, image_labels),
    }
    flat_scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in pixel_maps])
    flat_gts = np.concatenate([np.asarray(g).ravel() for g in pixel_gts]).astype(np.int64)
    row["pixel_auroc"] = auroc(flat_scores, flat_gts)
    row["pixel_f1max"] = f1_max(flat_scores, flat_gts)
    row["pixel_pro"] = pro(pixel_maps, pixel_gts, fpr_cap=fpr_cap)
    return row
