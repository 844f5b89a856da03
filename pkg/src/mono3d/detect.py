"""Anchor-based 2D-3D detection: anchors, target assignment, residual coding,
losses, NMS and center back-projection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    getitem,
    log_sigmoid,
    mul,
    power,
    scale,
    sigmoid,
    smooth_l1,
    sub,
    tsum,
)

FULL_RATIOS = (0.5, 1.0, 1.5)
FULL_SCALES = tuple(24.0 * 2.0 ** (i / 4.0) for i in range(16))
PRIOR_FIELDS = ("z", "w3d", "h3d", "l3d", "theta")
NUM_RESIDUALS = 11
DIM_CLAMP = 10.0


@dataclass
class Anchor2D3D:
    x2d: float
    y2d: float
    w2d: float
    h2d: float
    xp: float
    yp: float
    z: float
    w3d: float
    h3d: float
    l3d: float
    theta: float


@dataclass
class AnchorGrid:
    """Anchors for an ``H x W`` map, ordered by (row, column, template).

    ``boxes`` holds one ``[x2d, y2d, w2d, h2d, xp, yp, z, w3d, h3d, l3d, theta]``
    row per anchor.
    """

    boxes: np.ndarray
    height: int
    width: int
    templates: np.ndarray  # T x 2 (width, height) in pixels

    @property
    def per_pixel(self) -> int:
        return len(self.templates)

    def __len__(self) -> int:
        return len(self.boxes)

    def anchor(self, i: int) -> Anchor2D3D:
        return Anchor2D3D(*(float(v) for v in self.boxes[i]))

    def corners(self) -> np.ndarray:
        return center_to_corners(self.boxes[:, :4])


def template_shapes(ratios: Sequence[float], scales: Sequence[float]) -> np.ndarray:
    """Anchor (width, height) per template: height = scale, width = scale * ratio."""
    if not ratios or not scales:
        raise ValueError("need at least one ratio and one scale")
    return np.array([(s * r, s) for r in ratios for s in scales], dtype=np.float64)


def default_priors(num_templates: int) -> np.ndarray:
    """Neutral 3D priors (mean z=20 m, car-sized dims, theta 0) for grids built before statistics exist."""
    return np.tile(np.array([20.0, 1.6, 1.5, 3.9, 0.0]), (num_templates, 1))


def generate_anchors(
    height: int,
    width: int,
    stride: float,
    ratios: Sequence[float],
    scales: Sequence[float],
    priors: Optional[np.ndarray] = None,
) -> AnchorGrid:
    templates = template_shapes(ratios, scales)
    t = len(templates)
    priors = default_priors(t) if priors is None else np.asarray(priors, dtype=np.float64)
    if priors.shape != (t, len(PRIOR_FIELDS)):
        raise ShapeError(f"priors must be {t} x {len(PRIOR_FIELDS)}, got {priors.shape}")
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    cx = ((xs.reshape(-1) + 0.5) * stride).repeat(t)
    cy = ((ys.reshape(-1) + 0.5) * stride).repeat(t)
    shapes = np.tile(templates, (height * width, 1))
    prior_rows = np.tile(priors, (height * width, 1))
    boxes = np.column_stack([cx, cy, shapes[:, 0], shapes[:, 1], cx, cy, prior_rows])
    return AnchorGrid(boxes, height, width, templates)


# -- IoU and assignment ---------------------------------------------------------------------


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    half_w, half_h = b[..., 2] / 2, b[..., 3] / 2
    return np.stack([b[..., 0] - half_w, b[..., 1] - half_h, b[..., 0] + half_w, b[..., 1] + half_h], axis=-1)


def iou_2d(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two ``(x1, y1, x2, y2)`` boxes; zero-area boxes give 0."""
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner boxes ``a`` (M x 4) and ``b`` (K x 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=valid & (union > 0))
    return out


def assign_targets(anchor_corners: np.ndarray, gt_corners: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Matched GT index per anchor (IoU strictly above ``threshold``), or -1 for negatives.

    Ties between GTs resolve to the lowest GT index.
    """
    m = len(anchor_corners)
    if len(gt_corners) == 0:
        return np.full(m, -1, dtype=np.int64)
    ious = iou_matrix(anchor_corners, gt_corners)
    best = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(m), best]
    return np.where(best_iou > threshold, best, -1).astype(np.int64)


def compute_anchor_priors(gt_boxes2d: np.ndarray, gt_params3d: np.ndarray, templates: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-template mean and variance of ``(z, w3d, h3d, l3d, theta)``.

    Each GT joins the template whose shape (centered on the GT) overlaps its 2D
    box best; templates that collect nothing take the global statistics.
    """
    gt_boxes2d = np.asarray(gt_boxes2d, dtype=np.float64).reshape(-1, 4)
    params = np.asarray(gt_params3d, dtype=np.float64).reshape(-1, len(PRIOR_FIELDS))
    if len(gt_boxes2d) == 0:
        raise ValueError("cannot compute anchor priors from zero labels")
    gw = gt_boxes2d[:, 2] - gt_boxes2d[:, 0]
    gh = gt_boxes2d[:, 3] - gt_boxes2d[:, 1]
    inter = np.minimum(gw[:, None], templates[None, :, 0]) * np.minimum(gh[:, None], templates[None, :, 1])
    union = (gw * gh)[:, None] + (templates[:, 0] * templates[:, 1])[None, :] - inter
    bucket = np.argmax(inter / union, axis=1)
    g_mean, g_var = params.mean(axis=0), params.var(axis=0)
    means = np.tile(g_mean, (len(templates), 1))
    variances = np.tile(g_var, (len(templates), 1))
    for t in range(len(templates)):
        members = params[bucket == t]
        if len(members):
            means[t] = members.mean(axis=0)
            variances[t] = members.var(axis=0)
    return means, variances


# -- residual coding --------------------------------------------------------------------------


def encode_targets(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Residuals ``[tx, ty, tw, th]_2d + [tx, ty, tw, th, tl, tz, ttheta]_3d`` of GT rows against anchors.

    Both inputs use the anchor row layout ``[x2d, y2d, w2d, h2d, xp, yp, z, w3d, h3d, l3d, theta]``.
    """
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    if np.any(gt[:, [2, 3, 7, 8, 9]] <= 0):
        raise ValueError("ground-truth sizes must be positive")
    out = np.empty((len(gt), NUM_RESIDUALS))
    out[:, 0] = (gt[:, 0] - a[:, 0]) / a[:, 2]
    out[:, 1] = (gt[:, 1] - a[:, 1]) / a[:, 3]
    out[:, 2] = np.log(gt[:, 2] / a[:, 2])
    out[:, 3] = np.log(gt[:, 3] / a[:, 3])
    out[:, 4] = (gt[:, 4] - a[:, 4]) / a[:, 2]
    out[:, 5] = (gt[:, 5] - a[:, 5]) / a[:, 3]
    out[:, 6] = np.log(gt[:, 7] / a[:, 7])
    out[:, 7] = np.log(gt[:, 8] / a[:, 8])
    out[:, 8] = np.log(gt[:, 9] / a[:, 9])
    out[:, 9] = gt[:, 6] - a[:, 6]
    out[:, 10] = gt[:, 10] - a[:, 10]
    return out


@dataclass
class Decoded:
    boxes: np.ndarray  # anchor row layout, recovered values
    clamped: np.ndarray  # per row: a size residual hit the exp clamp


def decode(residuals: np.ndarray, anchors: np.ndarray) -> Decoded:
    """Recover boxes from residuals; projected 3D centers share the anchor's 2D center."""
    t = np.atleast_2d(np.asarray(residuals, dtype=np.float64))
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    sizes = t[:, [2, 3, 6, 7, 8]]
    clamped = np.any(np.abs(sizes) > DIM_CLAMP, axis=1)
    sizes = np.clip(sizes, -DIM_CLAMP, DIM_CLAMP)
    out = np.empty_like(a)
    out[:, 0] = t[:, 0] * a[:, 2] + a[:, 0]
    out[:, 1] = t[:, 1] * a[:, 3] + a[:, 1]
    out[:, 4] = t[:, 4] * a[:, 2] + a[:, 4]
    out[:, 5] = t[:, 5] * a[:, 3] + a[:, 5]
    out[:, 7] = np.exp(sizes[:, 2]) * a[:, 7]
    out[:, 8] = np.exp(sizes[:, 3]) * a[:, 8]
    out[:, 9] = np.exp(sizes[:, 4]) * a[:, 9]
    out[:, 2] = np.exp(sizes[:, 0]) * a[:, 2]
    out[:, 3] = np.exp(sizes[:, 1]) * a[:, 3]
    out[:, 6] = t[:, 9] + a[:, 6]
    out[:, 10] = t[:, 10] + a[:, 10]
    return Decoded(out, clamped)


# -- losses --------------------------------------------------------------------------------------


@dataclass
class LossWeights:
    cls: float = 1.0
    reg: float = 1.0
    dep: float = 1.0


@dataclass
class DetectionLoss:
    total: Tensor
    cls: Tensor
    reg: Tensor
    num_pos: int


def sigmoid_focal(logits: Tensor, targets: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Elementwise binary focal loss on logits against 0/1 targets."""
    if logits.shape != targets.shape:
        raise ShapeError(f"focal: logits {logits.shape} vs targets {targets.shape}")
    t = targets.astype(logits.data.dtype)
    p = sigmoid(logits)
    log_p = log_sigmoid(logits)
    log_q = log_sigmoid(scale(logits, -1.0))
    pos_w = Tensor(alpha * t)
    neg_w = Tensor((1.0 - alpha) * (1.0 - t))
    if gamma:
        one = Tensor(np.ones_like(t))
        pos = mul(mul(pos_w, power(sub(one, p), gamma)), log_p)
        neg = mul(mul(neg_w, power(p, gamma)), log_q)
    else:
        pos, neg = mul(pos_w, log_p), mul(neg_w, log_q)
    return scale(pos + neg, -1.0)


def detection_loss(
    cls_logits: Tensor,
    reg: Tensor,
    reg_targets: np.ndarray,
    gt_classes: np.ndarray,
    assignment: np.ndarray,
    weights: LossWeights = LossWeights(),
    gamma: float = 2.0,
    alpha: float = 0.25,
) -> DetectionLoss:
    """Classification focal loss over all anchors plus smooth-L1 over positive anchors.

    ``cls_logits`` is ``M x K`` (one-vs-all, no background column), ``reg`` is
    ``M x 11``, ``reg_targets`` is ``M x 11`` (rows of negatives ignored),
    ``assignment`` holds a GT index or -1 per anchor and ``gt_classes`` maps GT
    index to class id. Both terms are normalized by the positive count.
    """
    m, k = cls_logits.shape
    if reg.shape != (m, NUM_RESIDUALS) or reg_targets.shape != (m, NUM_RESIDUALS) or assignment.shape != (m,):
        raise ShapeError("detection_loss: misaligned anchor arrays")
    pos = np.nonzero(assignment >= 0)[0]
    num_pos = len(pos)
    onehot = np.zeros((m, k))
    if num_pos:
        onehot[pos, np.asarray(gt_classes)[assignment[pos]]] = 1.0
    norm = 1.0 / max(1, num_pos)
    cls_loss = scale(tsum(sigmoid_focal(cls_logits, onehot, gamma, alpha)), norm)
    if num_pos:
        diff = sub(getitem(reg, pos), Tensor(reg_targets[pos]))
        reg_loss = scale(tsum(smooth_l1(diff)), norm)
    else:
        reg_loss = Tensor(0.0)
    total = scale(cls_loss, weights.cls) + scale(reg_loss, weights.reg)
    return DetectionLoss(total, cls_loss, reg_loss, num_pos)


# -- post-processing ---------------------------------------------------------------------------------


@dataclass
class Detection3D:
    class_id: int
    score: float
    box2d: Tuple[float, float, float, float]
    center3d: Tuple[float, float, float]  # geometric center, camera frame
    dims: Tuple[float, float, float]  # (w, h, l)
    ry: float
    alpha: float = 0.0


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.4, score_thresh: float = 0.75) -> List[int]:
    """Greedy NMS on corner boxes. Returns kept indices, highest score first.

    Boxes scoring below ``score_thresh`` are dropped first; equal scores keep
    the original order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    candidates = np.nonzero(scores >= score_thresh)[0]
    order = candidates[np.argsort(-scores[candidates], kind="stable")]
    keep: List[int] = []
    while len(order):
        i = order[0]
        keep.append(int(i))
        if len(order) == 1:
            break
        ious = iou_matrix(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_thresh]
    return keep


def nms_detections(dets: Sequence[Detection3D], iou_thresh: float = 0.4, score_thresh: float = 0.75) -> List[Detection3D]:
    if not dets:
        return []
    keep = nms(np.array([d.box2d for d in dets]), np.array([d.score for d in dets]), iou_thresh, score_thresh)
    return [dets[i] for i in keep]


def backproject_center(xp: float, yp: float, z: float, P: np.ndarray) -> Tuple[float, float, float]:
    """Camera-frame point at depth ``z`` that projects to pixel ``(xp, yp)`` under the 3x4 matrix ``P``.

    Solves the two projection equations for X and Y with Z fixed, so the
    translation column is honoured.
    """
    if z <= 0:
        raise ValueError(f"depth must be positive, got {z}")
    P = np.asarray(P, dtype=np.float64)
    # u * (P2 . X~) = P0 . X~  and  v * (P2 . X~) = P1 . X~, linear in (X, Y)
    A = np.array(
        [
            [P[0, 0] - xp * P[2, 0], P[0, 1] - xp * P[2, 1]],
            [P[1, 0] - yp * P[2, 0], P[1, 1] - yp * P[2, 1]],
        ]
    )
    rhs = np.array(
        [
            xp * (P[2, 2] * z + P[2, 3]) - (P[0, 2] * z + P[0, 3]),
            yp * (P[2, 2] * z + P[2, 3]) - (P[1, 2] * z + P[1, 3]),
        ]
    )
    x, y = np.linalg.solve(A, rhs)
    return float(x), float(y), float(z)


def normalize_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a
