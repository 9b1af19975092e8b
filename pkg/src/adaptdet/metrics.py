"""COCO-style average precision for the synthetic detection benchmark.

Images are scored independently; per class and IoU threshold, detections are
ranked by confidence across all images and greedily matched to unclaimed
ground truth in their own image. Precision is interpolated at 101 recall
points. Size-bucketed AP follows the COCO ignore rules: ground truth outside
the area range is ignored, and so are unmatched detections outside it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .boxes import cxcywh_to_xyxy, iou_matrix

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
# normalised-area cutoffs: COCO's 32^2 and 96^2 on a 300^2 image, rescaled
AREA_SMALL = (32.0 / 300.0) ** 2
AREA_MEDIUM = (96.0 / 300.0) ** 2
AREA_RANGES = {
    "all": (0.0, np.inf),
    "small": (0.0, AREA_SMALL),
    "medium": (AREA_SMALL, AREA_MEDIUM),
    "large": (AREA_MEDIUM, np.inf),
}


@dataclass
class ImageDetections:
    """Predictions and ground truth of one image, boxes in corner form."""

    scores: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray
    gt_labels: np.ndarray
    gt_boxes: np.ndarray

    @classmethod
    def from_cxcywh(cls, scores, labels, boxes, gt_labels, gt_boxes) -> "ImageDetections":
        return cls(
            np.asarray(scores, dtype=np.float64).reshape(-1),
            np.asarray(labels, dtype=np.int64).reshape(-1),
            cxcywh_to_xyxy(np.asarray(boxes, dtype=np.float64).reshape(-1, 4)),
            np.asarray(gt_labels, dtype=np.int64).reshape(-1),
            cxcywh_to_xyxy(np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)),
        )


@dataclass
class EvalResult:
    AP: float
    AP50: float
    AP75: float
    AP_S: float
    AP_M: float
    AP_L: float
    per_class_AP50: dict[int, float] = field(default_factory=dict)
    num_images: int = 0
    num_gt: int = 0
    num_detections: int = 0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["per_class_AP50"] = {str(k): v for k, v in self.per_class_AP50.items()}
        return d

    def headline(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")}


def box_areas(xyxy: np.ndarray) -> np.ndarray:
    return np.clip(xyxy[:, 2] - xyxy[:, 0], 0, None) * np.clip(xyxy[:, 3] - xyxy[:, 1], 0, None)


def match_predictions(
    pred_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    iou_threshold: float,
    gt_ignore: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching of confidence-sorted predictions to ground truth.

    Each prediction claims the unclaimed gt of highest IoU >= threshold
    (first index on ties), preferring non-ignored gt. Returns
    ``(matched_gt_index or -1, ignored flag)`` per prediction.
    """
    n = len(pred_boxes)
    matched = np.full(n, -1, dtype=np.int64)
    ignored = np.zeros(n, dtype=bool)
    if n == 0 or len(gt_boxes) == 0:
        return matched, ignored
    ious = iou_matrix(pred_boxes, gt_boxes)
    gi = np.zeros(len(gt_boxes), dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    # visit non-ignored gt first, as COCO does
    order = np.argsort(gi, kind="stable")
    claimed = np.zeros(len(gt_boxes), dtype=bool)
    for d in range(n):
        best, best_g = iou_threshold, -1
        for g in order:
            if claimed[g]:
                continue
            if best_g >= 0 and not gi[best_g] and gi[g]:
                break
            v = ious[d, g]
            if v >= best and (best_g < 0 or v > best):
                best, best_g = v, g
        if best_g >= 0:
            matched[d] = best_g
            ignored[d] = gi[best_g]
            claimed[best_g] = True
    return matched, ignored


def average_precision(tp_flags: Sequence[int], num_gt: int) -> float:
    """101-point interpolated AP from TP flags of confidence-ranked detections."""
    if num_gt <= 0:
        raise ValueError("average_precision needs at least one ground-truth object")
    tp = np.asarray(tp_flags, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    ok = idx < tp.size
    return float(envelope[idx[ok]].sum() / RECALL_POINTS.size)


def class_ap(images: Sequence[ImageDetections], cls: int, thr: float, area=(0.0, np.inf)) -> float | None:
    """AP for one class / threshold / area range; None when no gt is counted."""
    lo, hi = area
    entries = []  # (score, image, rank within image, tp, ignore)
    num_gt = 0
    for i, im in enumerate(images):
        gmask = im.gt_labels == cls
        gboxes = im.gt_boxes[gmask]
        ga = box_areas(gboxes)
        gignore = (ga < lo) | (ga > hi)
        num_gt += int((~gignore).sum())
        dmask = np.flatnonzero(im.labels == cls)
        order = dmask[np.argsort(-im.scores[dmask], kind="stable")]
        matched, ignored = match_predictions(im.boxes[order], gboxes, thr, gignore)
        da = box_areas(im.boxes[order])
        for r, d in enumerate(order):
            ign = bool(ignored[r]) or (matched[r] < 0 and not (lo <= da[r] <= hi))
            entries.append((-im.scores[d], i, r, int(matched[r] >= 0), ign))
    if num_gt == 0:
        return None
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    flags = [e[3] for e in entries if not e[4]]
    return average_precision(flags, num_gt)


def _mean_over_classes(images, classes, thresholds, area) -> float:
    vals = []
    for thr in thresholds:
        for c in classes:
            ap = class_ap(images, c, float(thr), area)
            if ap is not None:
                vals.append(ap)
    return float(np.mean(vals)) if vals else 0.0


def evaluate(images: Sequence[ImageDetections], num_classes: int) -> EvalResult:
    classes = range(num_classes)
    per_class = {}
    for c in classes:
        ap = class_ap(images, c, 0.5)
        if ap is not None:
            per_class[c] = ap
    return EvalResult(
        AP=_mean_over_classes(images, classes, IOU_THRESHOLDS, AREA_RANGES["all"]),
        AP50=float(np.mean(list(per_class.values()))) if per_class else 0.0,
        AP75=_mean_over_classes(images, classes, [0.75], AREA_RANGES["all"]),
        AP_S=_mean_over_classes(images, classes, IOU_THRESHOLDS, AREA_RANGES["small"]),
        AP_M=_mean_over_classes(images, classes, IOU_THRESHOLDS, AREA_RANGES["medium"]),
        AP_L=_mean_over_classes(images, classes, IOU_THRESHOLDS, AREA_RANGES["large"]),
        per_class_AP50=per_class,
        num_images=len(images),
        num_gt=int(sum(len(im.gt_labels) for im in images)),
        num_detections=int(sum(len(im.scores) for im in images)),
    )
