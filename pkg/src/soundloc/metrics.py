"""Localization metrics: IoU, AUC, CIoU, NSA, NMI, sounding mAP and heatmap boxes.

Boxes are ``(x0, y0, x1, y1)`` pixel coordinates, inclusive-exclusive; maps
and masks are indexed ``[row, col]`` = ``[y, x]``.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError, NoBoxError

AUC_GRID = np.arange(21) / 20.0
DEFAULT_NSA_TAU = 0.05
REGION_THRESHOLD = 0.5


class Box(NamedTuple):
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self):
        return max(0, self.x1 - self.x0) * max(0, self.y1 - self.y0)


@dataclass
class BoundingBox:
    box: Box
    category: int = -1
    sounding: bool = True
    score: float = 1.0

    def __post_init__(self):
        self.box = Box(*map(int, self.box))
        if not (self.box.x0 < self.box.x1 and self.box.y0 < self.box.y1):
            raise InvalidInputError(f"degenerate box {tuple(self.box)}")


@dataclass
class EvalRecord:
    """Per-sample, per-category IoU with the category's sounding flag."""

    ious: np.ndarray
    sounding: np.ndarray

    def __post_init__(self):
        self.ious = np.asarray(self.ious, dtype=np.float64)
        self.sounding = np.asarray(self.sounding, dtype=bool)
        if self.ious.shape != self.sounding.shape:
            raise InvalidInputError("ious and sounding flags must align")


def heatmap_to_box(heatmap, rel_threshold: float = REGION_THRESHOLD) -> Box:
    """Smallest box covering the cells at or above ``rel_threshold`` of the map maximum."""
    h = np.asarray(heatmap, dtype=np.float64)
    peak = h.max() if h.size else 0.0
    if not peak > 0:
        raise NoBoxError("heatmap has no positive activation")
    rows, cols = np.nonzero(h / peak >= rel_threshold)
    return Box(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


def box_mask(box, shape):
    m = np.zeros(shape, dtype=bool)
    x0, y0, x1, y1 = box
    m[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
    return m


def region_mask(heatmap, rel_threshold: float = REGION_THRESHOLD):
    """Binary region ``heatmap / max >= rel_threshold``; empty if the map has no positive value."""
    h = np.asarray(heatmap, dtype=np.float64)
    peak = h.max()
    if not peak > 0:
        return np.zeros(h.shape, dtype=bool)
    return h / peak >= rel_threshold


def box_iou(a, b) -> float:
    a, b = Box(*a), Box(*b)
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0) * max(ih, 0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou(pred, gt, shape=None) -> float:
    """IoU between a predicted region (bool mask or box) and a ground-truth box or mask.

    Pixel counting; an empty union gives 0.
    """
    pred_is_mask = isinstance(pred, np.ndarray) and pred.dtype == bool
    gt_is_mask = isinstance(gt, np.ndarray) and gt.dtype == bool
    if not pred_is_mask and not gt_is_mask:
        return box_iou(pred, gt)
    if shape is None:
        shape = pred.shape if pred_is_mask else gt.shape
    p = pred if pred_is_mask else box_mask(pred, shape)
    g = gt if gt_is_mask else box_mask(gt, shape)
    union = np.count_nonzero(p | g)
    return np.count_nonzero(p & g) / union if union else 0.0


def success_curve(ious, grid=AUC_GRID):
    ious = np.asarray(ious, dtype=np.float64)
    return (ious[None, :] >= grid[:, None]).mean(axis=1)


def auc(ious) -> float:
    """Trapezoidal area under r(t) = fraction of IoUs >= t, t = 0, 0.05, ..., 1."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise InvalidInputError("auc of an empty list")
    if ((ious < 0) | (ious > 1)).any():
        raise InvalidInputError("IoU values must lie in [0, 1]")
    r = success_curve(ious)
    return float(np.sum((r[1:] + r[:-1]) * np.diff(AUC_GRID)) / 2.0)


def ciou_scores(records: Sequence[EvalRecord]) -> np.ndarray:
    """Per-sample mean IoU over sounding categories only."""
    out = []
    for rec in records:
        n = rec.sounding.sum()
        if n == 0:
            raise InvalidInputError("a CIoU record has no sounding category")
        out.append(float((rec.ious * rec.sounding).sum() / n))
    return np.array(out)


def ciou(records: Sequence[EvalRecord], iou_threshold: float = 0.3) -> float:
    """CIoU@t: fraction of samples whose class-aware IoU is at least ``iou_threshold``."""
    scores = ciou_scores(records)
    if scores.size == 0:
        raise InvalidInputError("ciou of an empty record list")
    return float((scores >= iou_threshold).mean())


def ciou_mean(records: Sequence[EvalRecord]) -> float:
    return float(ciou_scores(records).mean())


def nsa_sample(maps, sounding, tau: float = DEFAULT_NSA_TAU, normalize: bool = True) -> float:
    """No-sounding-area of one sample.

    ``maps`` holds raw per-category activations ``(N, H, W)``; with ``normalize``
    they are divided by the sample-wide maximum before comparing with ``tau``.
    """
    maps = np.asarray(maps, dtype=np.float64)
    silent = ~np.asarray(sounding, dtype=bool)
    if not silent.any():
        raise InvalidInputError("NSA needs at least one silent category")
    if normalize:
        peak = maps.max()
        if peak > 0:
            maps = maps / peak
    area = maps.shape[-2] * maps.shape[-1]
    below = np.count_nonzero(maps[silent] < tau)
    return below / (silent.sum() * area)


def nsa(samples, tau: float = DEFAULT_NSA_TAU, normalize: bool = True) -> float:
    """Mean NSA over ``(maps, sounding)`` pairs."""
    vals = [nsa_sample(m, s, tau, normalize) for m, s in samples]
    if not vals:
        raise InvalidInputError("nsa of an empty sample list")
    return float(np.mean(vals))


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignments, labels) -> float:
    """Mutual information normalized by the arithmetic mean of the two entropies."""
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if a.shape != b.shape:
        raise InvalidInputError("assignments and labels must have equal length")
    if a.size == 0:
        raise InvalidInputError("nmi of empty partitions")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        return 1.0 if ha == hb else 0.0
    n = a.size
    nz = table > 0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    return float(min(1.0, max(0.0, mi / ((ha + hb) / 2.0))))


def eleven_point_ap(recall, precision) -> float:
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    ap = 0.0
    for t in np.arange(11) / 10.0:
        mask = recall >= t
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 11.0


def average_precision(preds, gts, iou_t: float = 0.3) -> float:
    """AP of one category. ``preds``: (image, score, box); ``gts``: (image, box)."""
    if not gts:
        raise InvalidInputError("average precision needs at least one ground-truth box")
    by_image = defaultdict(list)
    for img, box in gts:
        by_image[img].append(Box(*box))
    used = {img: [False] * len(v) for img, v in by_image.items()}
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _, box = preds[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(by_image.get(img, [])):
            o = box_iou(box, g)
            if o > best:
                best, best_j = o, j
        if best >= iou_t and not used[img][best_j]:
            used[img][best_j] = True
            tp[rank] = 1.0
    if len(order) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(order) + 1)
    return eleven_point_ap(recall, precision)


def sounding_map(pred_boxes: Sequence[tuple], gt_boxes: Sequence[tuple], iou_t: float = 0.3) -> float:
    """Mean AP over categories with sounding ground truth.

    ``pred_boxes``: ``(image_id, category, score, box)``;
    ``gt_boxes``: ``(image_id, category, box)``, sounding objects only.
    """
    if not gt_boxes:
        raise InvalidInputError("sounding mAP needs ground-truth boxes")
    gts = defaultdict(list)
    for img, cat, box in gt_boxes:
        gts[cat].append((img, box))
    preds = defaultdict(list)
    for img, cat, score, box in pred_boxes:
        preds[cat].append((img, score, box))
    aps = [average_precision(preds.get(cat, []), gts[cat], iou_t) for cat in sorted(gts)]
    return float(np.mean(aps))
