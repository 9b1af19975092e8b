"""Box geometry in normalised (cx, cy, w, h) and corner (x0, y0, x1, y1) forms."""

from __future__ import annotations

import numpy as np

from . import autograd as ag


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def box_area(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form boxes ``a`` [N,4] and ``b`` [M,4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(a, b) -> float:
    """IoU of two corner-form boxes, in [0, 1]."""
    return float(iou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = np.clip(erb - elt, 0, None)
    enclose = ewh[..., 0] * ewh[..., 1]
    return inter / union - (enclose - union) / enclose


def giou(a, b) -> float:
    """Generalised IoU of two corner-form boxes, in (-1, 1]."""
    return float(giou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def giou_pairs(pred: ag.Tensor, target: np.ndarray) -> ag.Tensor:
    """Differentiable GIoU between paired cxcywh boxes ``pred`` [N,4] and ``target`` [N,4]."""
    t = cxcywh_to_xyxy(target)
    cx, cy, w, h = (pred[:, i] for i in range(4))
    px0, py0 = cx - w * 0.5, cy - h * 0.5
    px1, py1 = cx + w * 0.5, cy + h * 0.5
    tx0, ty0, tx1, ty1 = t[:, 0], t[:, 1], t[:, 2], t[:, 3]
    iw = ag.maximum(ag.minimum(px1, tx1) - ag.maximum(px0, tx0), 0.0)
    ih = ag.maximum(ag.minimum(py1, ty1) - ag.maximum(py0, ty0), 0.0)
    inter = iw * ih
    union = w * h + (tx1 - tx0) * (ty1 - ty0) - inter
    ew = ag.maximum(px1, tx1) - ag.minimum(px0, tx0)
    eh = ag.maximum(py1, ty1) - ag.minimum(py0, ty0)
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose
