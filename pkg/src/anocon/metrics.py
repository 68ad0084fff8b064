"""Pixel-level evaluation: PR/ROC curves, best Dice/IoU, per-scan Dice, overlap."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import MetricUndefinedError, ShapeError, UsageError

MIN_SCAN_POSITIVE_FRACTION = 1e-4


class PRCurve(NamedTuple):
    """One entry per distinct score, highest first.

    Entry ``k`` describes the prediction ``score >= thresholds[k]``.
    """

    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    def points(self):
        return list(zip(self.recall.tolist(), self.precision.tolist(), self.thresholds.tolist()))

    def f1(self):
        return 2.0 * self.tp / (self.tp + self.fp + self.n_pos)


def _pool(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeError(s.shape, y.shape, "labels")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise MetricUndefinedError("labels must contain both positives and negatives")
    return s, y, n_pos


def _cumulative(s, y):
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp.astype(np.int64), fp.astype(np.int64)


def pr_curve(scores, labels) -> PRCurve:
    s, y, n_pos = _pool(scores, labels)
    thr, tp, fp = _cumulative(s, y)
    return PRCurve(tp / n_pos, tp / (tp + fp), thr, tp, fp, n_pos, y.size - n_pos)


def auprc(curve: PRCurve) -> float:
    """Step-wise area: sum over points of (recall gain) * precision."""
    r = np.r_[0.0, curve.recall]
    return float(np.sum(np.diff(r) * curve.precision))


def auroc(scores, labels) -> float:
    """Trapezoidal area under the ROC; ties count one half."""
    s, y, n_pos = _pool(scores, labels)
    _, tp, fp = _cumulative(s, y)
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / (y.size - n_pos)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def threshold_between(curve: PRCurve, k: int) -> float:
    """A value ``tau`` with ``score > tau`` reproducing curve point ``k``."""
    hi = curve.thresholds[k]
    if k + 1 < curve.thresholds.size:
        return float((hi + curve.thresholds[k + 1]) / 2.0)
    return float(np.nextafter(hi, -np.inf))


def operative_point(curve: PRCurve):
    """Index and threshold of the max-F1 point (first maximum)."""
    k = int(np.argmax(curve.f1()))
    return k, threshold_between(curve, k)


def _masks(a, b):
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ShapeError(b.shape, a.shape, "mask")
    return a, b


def dice(pred, gt) -> float:
    a, b = _masks(pred, gt)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def iou(pred, gt) -> float:
    a, b = _masks(pred, gt)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def dice_iou_counts(tp, fp, fn):
    """Dice and IoU from confusion counts (empty-vs-empty = 1)."""
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn), tp / (tp + fp + fn)


@dataclass
class EvalReport:
    auroc: float
    auprc: float
    best_dice: float
    best_iou: float
    scan_dice_mean: float
    scan_dice_std: float
    overlap_pct: float
    threshold: float
    n_repetitions: int = 1
    n_scans: int = 0
    rule: str = "op"
    std: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as fh:
            return cls(**json.load(fh))


def filter_scans(gts, scans, min_fraction=MIN_SCAN_POSITIVE_FRACTION):
    """Indices of slices whose scan has at least ``min_fraction`` positive pixels."""
    scans = list(scans)
    keep = []
    for sid in dict.fromkeys(scans):
        idx = [i for i, s in enumerate(scans) if s == sid]
        pos = sum(int(np.asarray(gts[i], bool).sum()) for i in idx)
        tot = sum(np.asarray(gts[i]).size for i in idx)
        if pos / tot >= min_fraction:
            keep.extend(idx)
    return sorted(keep)


def evaluate(saliencies, gts, scans, threshold: Optional[float] = None, rule: str = "op",
             overlap_bins: int = 100, brains=None) -> EvalReport:
    """Dataset-level metrics over pooled pixels of the kept scans.

    ``threshold=None`` selects the operative point of the evaluated set.
    Overlap is measured between normal and anomalous pixels, restricted
    to ``brains`` when given.
    """
    if not (len(saliencies) == len(gts) == len(scans)):
        raise UsageError("saliencies, gts and scans must have equal length")
    keep = filter_scans(gts, scans)
    if not keep:
        raise UsageError("no scans left after the positive-fraction filter")
    sal = [np.asarray(saliencies[i], np.float64) for i in keep]
    gt = [np.asarray(gts[i], bool) for i in keep]
    sc = [scans[i] for i in keep]
    s = np.concatenate([a.ravel() for a in sal])
    y = np.concatenate([a.ravel() for a in gt])

    curve = pr_curve(s, y)
    ap = auprc(curve)
    roc = auroc(s, y)
    if threshold is None:
        _, threshold = operative_point(curve)
    pred = s > threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    d, j = dice_iou_counts(tp, fp, fn)

    per_scan = []
    for sid in dict.fromkeys(sc):
        idx = [i for i, x in enumerate(sc) if x == sid]
        p = np.concatenate([(sal[i] > threshold).ravel() for i in idx])
        g = np.concatenate([gt[i].ravel() for i in idx])
        per_scan.append(dice(p, g))

    if brains is not None:
        region = np.concatenate([np.asarray(brains[i], bool).ravel() for i in keep])
    else:
        region = np.ones_like(y)
    normal = s[region & ~y]
    anom = s[region & y]
    ov = overlap(normal, anom, overlap_bins) if normal.size and anom.size else float("nan")

    return EvalReport(
        auroc=roc, auprc=ap, best_dice=d, best_iou=j,
        scan_dice_mean=float(np.mean(per_scan)), scan_dice_std=float(np.std(per_scan)),
        overlap_pct=ov, threshold=float(threshold), n_scans=len(per_scan), rule=rule,
    )


def overlap_histograms(normal, anomalous, bins: int = 100):
    normal = np.asarray(normal, np.float64).ravel()
    anomalous = np.asarray(anomalous, np.float64).ravel()
    if normal.size == 0 or anomalous.size == 0:
        raise UsageError("overlap needs non-empty samples")
    lo = min(normal.min(), anomalous.min())
    hi = max(normal.max(), anomalous.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    cn, _ = np.histogram(normal, edges)
    ca, _ = np.histogram(anomalous, edges)
    return edges, cn, ca


def overlap(normal, anomalous, bins: int = 100) -> float:
    """Percent of all samples lying in the shared mass of the two histograms."""
    _, cn, ca = overlap_histograms(normal, anomalous, bins)
    return float(np.minimum(cn, ca).sum() / (cn.sum() + ca.sum()) * 100.0)


METRIC_KEYS = ("auroc", "auprc", "best_dice", "best_iou", "scan_dice_mean", "scan_dice_std", "overlap_pct", "threshold")


def aggregate(reports) -> EvalReport:
    """Mean over repetitions; per-metric standard deviations go in ``std``."""
    reports = list(reports)
    if not reports:
        raise UsageError("nothing to aggregate")
    means = {}
    stds = {}
    for k in METRIC_KEYS:
        vals = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        means[k] = float(vals.mean())
        stds[k] = float(vals.std())
    return EvalReport(**means, n_repetitions=len(reports), n_scans=reports[0].n_scans,
                      rule=reports[0].rule, std=stds)


TABLE_COLUMNS = ("AUROC", "AUPRC", "⌈DICE⌉", "⌈IoU⌉", "DICE (μ±σ)")


def _cell(r: EvalReport, key):
    v = getattr(r, key)
    if r.n_repetitions > 1:
        return f"{v:.3f}({r.std.get(key, 0.0):.3f})"
    return f"{v:.3f}"


def table_rows(named_reports):
    rows = []
    for name, r in named_reports:
        rows.append([
            name, _cell(r, "auroc"), _cell(r, "auprc"), _cell(r, "best_dice"), _cell(r, "best_iou"),
            f"{_cell(r, 'scan_dice_mean')}±{_cell(r, 'scan_dice_std')}",
        ])
    return rows


def markdown_table(named_reports) -> str:
    head = "| Method | " + " | ".join(TABLE_COLUMNS) + " |"
    sep = "|---" * (len(TABLE_COLUMNS) + 1) + "|"
    lines = [head, sep]
    for row in table_rows(named_reports):
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def csv_table(named_reports) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *TABLE_COLUMNS])
    w.writerows(table_rows(named_reports))
    return buf.getvalue()
