"""Global segmentation metrics and instance-level human-parsing metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .ops import IGNORE_INDEX

AP_R_THRESHOLDS = (0.5, 0.6, 0.7)
AP_P_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))
PCP_THRESHOLD = 0.5


class MetricError(ValueError):
    pass


# -- confusion-matrix metrics ------------------------------------------------------------

class ConfusionMatrix:
    """Entry (g, p) counts pixels with ground truth g predicted as p."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricError(f"prediction dims {pred.shape} differ from ground truth {gt.shape}")
        keep = gt != IGNORE_INDEX
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        C = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= C or p.min() < 0 or p.max() >= C):
            raise MetricError(f"label ids outside [0, {C})")
        self.counts += np.bincount(g * C + p, minlength=C * C).reshape(C, C)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_update(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.update(pred, gt)


def _require(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total == 0:
        raise MetricError("empty confusion matrix")
    return cm.counts.astype(np.float64)


def miou(cm: ConfusionMatrix) -> tuple:
    """Per-class IoU (NaN for classes absent from both maps) and their mean."""
    _require(cm)
    c = cm.counts
    diag = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - diag
    # exact rationals from integer counts so the mean is correctly rounded
    ratios = [Fraction(int(d), int(u)) for d, u in zip(diag, union) if u > 0]
    iou = np.array([float(Fraction(int(d), int(u))) if u > 0 else np.nan for d, u in zip(diag, union)])
    return iou, float(sum(ratios) / len(ratios))


def pixel_acc(cm: ConfusionMatrix) -> float:
    c = _require(cm)
    return float(np.trace(c) / c.sum())


def mean_acc(cm: ConfusionMatrix) -> float:
    c = _require(cm)
    rows = c.sum(axis=1)
    present = rows > 0
    return float(np.mean(np.diag(c)[present] / rows[present]))


# -- instances ----------------------------------------------------------------------------

@dataclass
class Instance:
    """A person: a pixel mask plus a part-label map read inside the mask.

    Ground-truth instances carry score 1.
    """
    mask: np.ndarray
    parts: np.ndarray
    score: float = 1.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != np.asarray(self.parts).shape:
            raise MetricError("instance mask and part map dims differ")
        if not self.mask.any():
            raise MetricError("instance mask is empty")
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise MetricError(f"instance score {self.score} outside [0, 1]")

    def part(self, c: int) -> np.ndarray:
        return self.mask & (self.parts == c)

    def part_classes(self, background: int = 0) -> set:
        vals = np.unique(self.parts[self.mask])
        return {int(v) for v in vals if v != background and v != IGNORE_INDEX}


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def mask_iou(a: Instance, b: Instance) -> float:
    return _iou(a.mask, b.mask)


def part_iou(pred: Instance, gt: Instance, c: int) -> float:
    return _iou(pred.part(c), gt.part(c))


def part_aware_iou(pred: Instance, gt: Instance) -> float:
    """Mean per-part IoU over part classes present in either instance.

    Falls back to the person-mask IoU when neither instance has any part.
    """
    classes = sorted(pred.part_classes() | gt.part_classes())
    if not classes:
        return mask_iou(pred, gt)
    return float(np.mean([part_iou(pred, gt, c) for c in classes]))


def score_order(preds: Sequence[Instance]) -> list:
    """Indices by descending score, ties by ascending index."""
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))


def greedy_match(order: Sequence[int], sim: np.ndarray, threshold: float, strict: bool = False) -> dict:
    """Score-ordered greedy matching: each prediction takes the unmatched gt
    with the highest similarity passing the threshold (ties: lowest gt index)."""
    taken: set = set()
    match = {}
    for i in order:
        best, best_s = None, -np.inf
        for j in range(sim.shape[1]):
            s = sim[i, j]
            ok = s > threshold if strict else s >= threshold
            if j not in taken and ok and s > best_s:
                best, best_s = j, s
        if best is not None:
            taken.add(best)
            match[i] = best
    return match


def average_precision(tp: Sequence[bool], num_gt: int) -> float:
    """All-points interpolated area under the precision/recall curve.

    ``tp`` lists true-positive flags in ranked order.
    """
    if num_gt == 0:
        return 0.0 if len(tp) else 1.0
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    # precision envelope, nonincreasing in rank
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def _sim_matrix(preds, gts, fn) -> np.ndarray:
    sim = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            sim[i, j] = fn(p, g)
    return sim


def ap_r(preds: Sequence[Instance], gts: Sequence[Instance],
         thresholds: Sequence[float] = AP_R_THRESHOLDS) -> dict:
    """Region-level AP at each part-aware IoU threshold plus their mean under key "mean"."""
    order = score_order(preds)
    sim = _sim_matrix(preds, gts, part_aware_iou)
    out = {}
    for t in thresholds:
        match = greedy_match(order, sim, t)
        out[t] = average_precision([i in match for i in order], len(gts))
    out["mean"] = float(np.mean([out[t] for t in thresholds]))
    return out


def person_match(preds: Sequence[Instance], gts: Sequence[Instance]) -> dict:
    """Greedy score-ordered 1:1 matching by person-mask IoU (> 0)."""
    return greedy_match(score_order(preds), _sim_matrix(preds, gts, mask_iou), 0.0, strict=True)


def pcp(preds: Sequence[Instance], gts: Sequence[Instance], threshold: float = PCP_THRESHOLD) -> float:
    """Mean over gt persons of the fraction of their parts predicted with IoU above ``threshold``."""
    if not gts:
        raise MetricError("PCP needs at least one ground-truth person")
    inverse = {j: i for i, j in person_match(preds, gts).items()}
    per_person = []
    for j, g in enumerate(gts):
        classes = sorted(g.part_classes())
        if j not in inverse or not classes:
            per_person.append(0.0 if j not in inverse else 1.0)
            continue
        p = preds[inverse[j]]
        per_person.append(float(np.mean([part_iou(p, g, c) > threshold for c in classes])))
    return float(np.mean(per_person))


def ap_p(preds: Sequence[Instance], gts: Sequence[Instance],
         thresholds: Sequence[float] = AP_P_THRESHOLDS) -> dict:
    """Person-level AP: a matched person is positive when its part-aware IoU reaches the threshold."""
    order = score_order(preds)
    match = person_match(preds, gts)
    quality = {i: part_aware_iou(preds[i], gts[j]) for i, j in match.items()}
    out = {}
    for t in thresholds:
        out[t] = average_precision([i in quality and quality[i] >= t for i in order], len(gts))
    out["mean"] = float(np.mean([out[t] for t in thresholds]))
    return out


# -- building instances from maps -----------------------------------------------------------

def instance_score(probs: np.ndarray, pred: np.ndarray, mask: np.ndarray) -> float:
    """Mean, over the mask, of the probability of each pixel's predicted class."""
    p = np.take_along_axis(probs, pred[None].astype(np.intp), axis=0)[0]
    return float(np.clip(p[mask].mean(), 0.0, 1.0))


def instances_from_maps(instances: np.ndarray, labels: np.ndarray,
                        probs: Optional[np.ndarray] = None) -> list:
    """One Instance per nonzero instance id; scored from ``probs`` (C, H, W) when given."""
    out = []
    for k in np.unique(instances):
        if k == 0:
            continue
        mask = instances == k
        score = 1.0 if probs is None else instance_score(probs, labels, mask)
        out.append(Instance(mask, labels, score))
    return out


# -- reports --------------------------------------------------------------------------------

@dataclass
class MetricReport:
    pixel_acc: float
    mean_acc: float
    miou: float
    per_class_iou: np.ndarray
    ap_r: dict = field(default_factory=dict)
    pcp: Optional[float] = None
    ap_p: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricReport":
        iou, m = miou(cm)
        return cls(pixel_acc(cm), mean_acc(cm), m, iou)


class InstanceAccumulator:
    """Collects per-image instance lists; AP is pooled over all images."""

    def __init__(self):
        self.images: list = []

    def add(self, preds: list, gts: list) -> None:
        self.images.append((preds, gts))

    def _pooled_ap(self, thresholds, quality_fn) -> dict:
        ranked, num_gt = [], 0
        for k, (preds, gts) in enumerate(self.images):
            num_gt += len(gts)
            for i, flags in quality_fn(preds, gts).items():
                ranked.append((-preds[i].score, k, i, flags))
        ranked.sort(key=lambda r: r[:3])
        out = {t: average_precision([r[3][n] for r in ranked], num_gt) for n, t in enumerate(thresholds)}
        out["mean"] = float(np.mean([out[t] for t in thresholds]))
        return out

    def ap_r(self, thresholds=AP_R_THRESHOLDS) -> dict:
        def flags(preds, gts):
            order = score_order(preds)
            sim = _sim_matrix(preds, gts, part_aware_iou)
            matches = [greedy_match(order, sim, t) for t in thresholds]
            return {i: [i in m for m in matches] for i in order}
        return self._pooled_ap(thresholds, flags)

    def ap_p(self, thresholds=AP_P_THRESHOLDS) -> dict:
        def flags(preds, gts):
            match = person_match(preds, gts)
            q = {i: part_aware_iou(preds[i], gts[j]) for i, j in match.items()}
            return {i: [i in q and q[i] >= t for t in thresholds] for i in range(len(preds))}
        return self._pooled_ap(thresholds, flags)

    def pcp(self, threshold=PCP_THRESHOLD) -> float:
        vals, n = 0.0, 0
        for preds, gts in self.images:
            if gts:
                vals += pcp(preds, gts, threshold) * len(gts)
                n += len(gts)
        if n == 0:
            raise MetricError("no ground-truth persons")
        return vals / n


def write_report(path: Union[str, Path], report: MetricReport, class_names: Sequence[str]) -> None:
    """Per-class IoU rows, a summary row, then ``threshold,value`` rows for instance metrics."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "iou"])
        for name, v in zip(class_names, report.per_class_iou):
            w.writerow([name, "" if np.isnan(v) else f"{v:.6f}"])
        w.writerow([])
        w.writerow(["pixel_acc", "mean_acc", "miou"])
        w.writerow([f"{report.pixel_acc:.6f}", f"{report.mean_acc:.6f}", f"{report.miou:.6f}"])
        if report.ap_r or report.ap_p or report.pcp is not None:
            w.writerow([])
            w.writerow(["threshold", "value"])
            for t, v in report.ap_r.items():
                w.writerow([f"ap_r@{t}", f"{v:.6f}"])
            if report.pcp is not None:
                w.writerow([f"pcp@{PCP_THRESHOLD}", f"{report.pcp:.6f}"])
            for t, v in report.ap_p.items():
                w.writerow([f"ap_p@{t}", f"{v:.6f}"])


def read_summary(path: Union[str, Path]) -> dict:
    """Parse the summary and instance rows of a report written by :func:`write_report`."""
    rows = list(csv.reader(open(path, newline="")))
    out = {}
    for k, row in enumerate(rows):
        if row == ["pixel_acc", "mean_acc", "miou"]:
            out.update(zip(row, map(float, rows[k + 1])))
        elif len(row) == 2 and "@" in row[0]:
            out[row[0]] = float(row[1])
    return out
