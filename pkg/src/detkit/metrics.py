"""Detection evaluation: greedy matching, precision/recall, AP, mAP, confusion matrix.

Conventions
-----------
* Detections are ranked by descending score; equal scores keep input order.
* A detection matches the highest-IoU unmatched, non-ignored ground truth of
  its class with IoU >= threshold (ties go to the lower ground-truth index).
* Ignored ground truths never match and never count as false negatives.
* AP uses all-point interpolation by default, evaluated in exact rational
  arithmetic and rounded once, so equal inputs give bit-identical results
  whatever the evaluation order. ``points=101`` samples the precision
  envelope at 101 evenly spaced recall levels instead.
* mAP averages over classes that have at least one non-ignored ground truth.
* A zero denominator in precision or recall yields 0.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .losses import Box, iou

IOU_RANGE = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: Box
    ignore: bool = False


@dataclass
class MatchResult:
    order: list[int]  # detection indices in ranking order
    det_tp: list[bool]  # per detection, input order
    det_gt: list[int | None]  # matched ground-truth index per detection
    gt_matched: list[bool]

    @property
    def tp(self) -> int:
        return sum(self.det_tp)

    @property
    def fp(self) -> int:
        return len(self.det_tp) - self.tp


@dataclass
class EvalReport:
    iou_threshold: float
    ap: dict[int, float]
    map: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "map": self.map,
            "precision": self.precision,
            "recall": self.recall,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "ap": {str(k): self.ap[k] for k in sorted(self.ap)},
        }


def rank(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5
) -> MatchResult:
    """One-to-one greedy matching within a single image."""
    order = rank(dets)
    gt_matched = [False] * len(gts)
    det_tp = [False] * len(dets)
    det_gt: list[int | None] = [None] * len(dets)
    for i in order:
        d = dets[i]
        best, best_iou = None, iou_threshold
        for j, g in enumerate(gts):
            if g.ignore or gt_matched[j] or g.class_id != d.class_id:
                continue
            o = iou(d.box, g.box)
            if o >= best_iou and (best is None or o > best_iou):
                best, best_iou = j, o
        if best is not None:
            gt_matched[best] = True
            det_tp[i] = True
            det_gt[i] = best
    return MatchResult(order, det_tp, det_gt, gt_matched)


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def pr_curve(labels: Sequence[bool], total_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (recall, precision) after each ranked detection."""
    tp = np.cumsum(np.asarray(labels, dtype=np.int64))
    ranks = np.arange(1, len(labels) + 1)
    return tp / total_gt, tp / ranks


def _ap_exact(labels: Sequence[bool], total_gt: int) -> Fraction:
    # envelope value at each rank as an integer pair (tp, k), scanned right to left
    pairs, tp = [], 0
    for k, hit in enumerate(labels, start=1):
        tp += bool(hit)
        pairs.append((tp, k))
    best, plateau = (0, 1), defaultdict(int)
    for (t, k), hit in zip(reversed(pairs), reversed(labels)):
        if t * best[1] > best[0] * k:
            best = (t, k)
        if hit:
            plateau[best] += 1
    den = 1
    for _, k in plateau:
        den = den * k // math.gcd(den, k)
    num = sum(c * t * (den // k) for (t, k), c in plateau.items())
    return Fraction(num, den * total_gt)


def average_precision(labels: Sequence[bool], total_gt: int, points: int | None = None) -> float:
    """Area under the monotone precision envelope; ``labels`` already ranked."""
    if total_gt < 1:
        raise EvaluationError("average precision undefined without ground truth")
    if not len(labels):
        return 0.0
    if points is None:
        return float(_ap_exact(labels, total_gt))
    recall, precision = pr_curve(labels, total_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, points)
    idx = np.searchsorted(recall, grid, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


def _by_image(items: Iterable) -> dict[str, list]:
    out: dict[str, list] = defaultdict(list)
    for it in items:
        out[it.image_id].append(it)
    return out


def map_at(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5, points: int | None = None
) -> EvalReport:
    gt_counts: dict[int, int] = defaultdict(int)
    for g in gts:
        if not g.ignore:
            gt_counts[g.class_id] += 1
    if not gt_counts:
        raise EvaluationError("no (non-ignored) ground truth to evaluate against")

    # per class: (score, global index, is_tp) across all images
    scored: dict[int, list[tuple[float, int, bool]]] = defaultdict(list)
    gts_by_img = _by_image(gts)
    det_idx: dict[str, list[int]] = defaultdict(list)
    for k, d in enumerate(dets):
        det_idx[d.image_id].append(k)
    tp_total = fp_total = 0
    for image_id, idxs in det_idx.items():
        m = match_detections([dets[k] for k in idxs], gts_by_img.get(image_id, []), iou_threshold)
        for k, hit in zip(idxs, m.det_tp):
            scored[dets[k].class_id].append((dets[k].score, k, hit))
        tp_total += m.tp
        fp_total += m.fp

    ap: dict[int, float] = {}
    exact: list[Fraction] = []
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for cls, n_gt in sorted(gt_counts.items()):
        ranked = sorted(scored.get(cls, []), key=lambda t: (-t[0], t[1]))
        labels = [hit for _, _, hit in ranked]
        if points is None:
            exact.append(_ap_exact(labels, n_gt))
            ap[cls] = float(exact[-1])
        else:
            ap[cls] = average_precision(labels, n_gt, points)
        if labels:
            curves[cls] = pr_curve(labels, n_gt)
    mean_ap = float(sum(exact) / len(exact)) if points is None else float(np.mean(list(ap.values())))
    n_gt_total = sum(gt_counts.values())
    precision, recall = precision_recall(tp_total, fp_total, n_gt_total - tp_total)
    return EvalReport(
        iou_threshold=iou_threshold,
        ap=ap,
        map=mean_ap,
        precision=precision,
        recall=recall,
        tp=tp_total,
        fp=fp_total,
        fn=n_gt_total - tp_total,
        pr_curves=curves,
    )


def map_range(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    thresholds: Sequence[float] = IOU_RANGE,
    points: int | None = None,
) -> float:
    """mAP averaged over IoU thresholds 0.50:0.05:0.95."""
    return float(np.mean([map_at(dets, gts, t, points).map for t in thresholds]))


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes; the last index is background."""

    classes: tuple[int, ...]
    counts: np.ndarray

    @property
    def background(self) -> int:
        return len(self.classes)

    def cell(self, true_cls: int | None, pred_cls: int | None) -> int:
        r = self.background if true_cls is None else self.classes.index(true_cls)
        c = self.background if pred_cls is None else self.classes.index(pred_cls)
        return int(self.counts[r, c])


def confusion_matrix(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    classes: Sequence[int],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.25,
) -> ConfusionMatrix:
    """Same-class greedy matches fill the diagonal; leftover detections that
    overlap a leftover ground truth of another class land off-diagonal; the
    rest go to the background row or column."""
    classes = tuple(classes)
    k = len(classes)
    pos = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((k + 1, k + 1), dtype=np.int64)
    gts_by_img = _by_image(g for g in gts if not g.ignore)
    dets_by_img = _by_image(d for d in dets if d.score >= score_threshold)
    for image_id in sorted(set(gts_by_img) | set(dets_by_img)):
        img_gts = gts_by_img.get(image_id, [])
        img_dets = dets_by_img.get(image_id, [])
        m = match_detections(img_dets, img_gts, iou_threshold)
        gt_used = list(m.gt_matched)
        for i, j in enumerate(m.det_gt):
            if j is not None:
                counts[pos[img_gts[j].class_id], pos[img_dets[i].class_id]] += 1
        for i in m.order:
            if m.det_tp[i]:
                continue
            d = img_dets[i]
            best, best_iou = None, iou_threshold
            for j, g in enumerate(img_gts):
                if gt_used[j]:
                    continue
                o = iou(d.box, g.box)
                if o >= best_iou and (best is None or o > best_iou):
                    best, best_iou = j, o
            if best is None:
                counts[k, pos[d.class_id]] += 1
            else:
                gt_used[best] = True
                counts[pos[img_gts[best].class_id], pos[d.class_id]] += 1
        for j, used in enumerate(gt_used):
            if not used:
                counts[pos[img_gts[j].class_id], k] += 1
    return ConfusionMatrix(classes, counts)
