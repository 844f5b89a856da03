"""BEV / 3D IoU and 40-point interpolated average precision."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detect import iou_2d

RECALL_POSITIONS = np.arange(1, 41) / 40.0


# -- rotated rectangles ----------------------------------------------------------------------


def bev_corners(box: Sequence[float]) -> np.ndarray:
    """Counter-clockwise corners (4 x 2) of ``(cx, cz, w, l, yaw)`` in the (x, z) plane.

    Length runs along the heading direction ``(cos yaw, -sin yaw)``, the
    camera-frame convention for rotation about the downward y axis.
    """
    cx, cz, w, l, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    x = cx + local[:, 0] * c + local[:, 1] * s
    z = cz - local[:, 0] * s + local[:, 1] * c
    pts = np.column_stack([x, z])
    return pts if polygon_area(pts) >= 0 else pts[::-1]


def polygon_area(pts: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex counter-clockwise polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        src, out = out, []
        for j in range(len(src)):
            cur, nxt = src[j], src[(j + 1) % len(src)]
            sc, sn = side(cur), side(nxt)
            if sc >= 0:
                out.append(cur)
            if (sc >= 0) != (sn >= 0):
                t = sc / (sc - sn)
                out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def bev_intersection(a: Sequence[float], b: Sequence[float]) -> float:
    return max(0.0, polygon_area(clip_polygon(bev_corners(a), bev_corners(b))))


def iou_bev(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two rotated ground-plane rectangles ``(cx, cz, w, l, yaw)``."""
    area_a, area_b = a[2] * a[3], b[2] * b[3]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = bev_intersection(a, b)
    union = area_a + area_b - inter
    return min(1.0, inter / union) if union > 0 else 0.0


def iou_3d(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of yawed 3D boxes ``(X, Y_bottom, Z, h, w, l, ry)`` with y pointing down.

    Each box spans ``[Y_bottom - h, Y_bottom]`` vertically.
    """
    xa, ya, za, ha, wa, la, ra = a
    xb, yb, zb, hb, wb, lb, rb = b
    vol_a, vol_b = ha * wa * la, hb * wb * lb
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    overlap_h = min(ya, yb) - max(ya - ha, yb - hb)
    if overlap_h <= 0:
        return 0.0
    inter = bev_intersection((xa, za, wa, la, ra), (xb, zb, wb, lb, rb)) * overlap_h
    union = vol_a + vol_b - inter
    return min(1.0, inter / union) if union > 0 else 0.0


# -- AP40 --------------------------------------------------------------------------------------


@dataclass
class APResult:
    ap: Optional[float]  # None when there is no ground truth to recall
    pr: List[Tuple[float, float]]  # (recall position, interpolated precision) x 40
    matches: List[Tuple[int, int, int]]  # (image, det index, gt index)
    num_gt: int
    num_det: int
    raw: List[Tuple[float, float]] = field(default_factory=list)  # (recall, precision) after each detection


def ap40(
    dets: Sequence[Sequence[Tuple[object, float]]],
    gts: Sequence[Sequence[object]],
    iou_fn: Callable[[object, object], float],
    iou_thresh: float,
    gt_ignore: Optional[Sequence[Sequence[bool]]] = None,
) -> APResult:
    """40-recall-point AP over a set of images.

    ``dets[i]`` is a list of ``(box, score)`` and ``gts[i]`` a list of boxes for
    image ``i``. Detections are visited in descending score order and each
    takes the unmatched GT of highest IoU (at least ``iou_thresh``) in its
    image. GTs flagged in ``gt_ignore`` are not counted; a detection that
    matches one is dropped rather than counted as a false positive.
    """
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth must cover the same images")
    ignore = gt_ignore if gt_ignore is not None else [[False] * len(g) for g in gts]
    num_gt = sum(1 for flags in ignore for f in flags if not f)
    flat = [(score, img, j) for img, ds in enumerate(dets) for j, (_, score) in enumerate(ds)]
    flat.sort(key=lambda t: -t[0])  # stable: ties keep image/index order

    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    tp_flags, matches = [], []
    for score, img, j in flat:
        box = dets[img][j][0]
        best, best_iou = -1, iou_thresh
        for k, g in enumerate(gts[img]):
            if taken[img][k]:
                continue
            iou = iou_fn(box, g)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = k, iou
        if best >= 0:
            taken[img][best] = True
            if ignore[img][best]:
                continue
            matches.append((img, j, best))
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    if num_gt == 0:
        return APResult(None, [], matches, 0, len(flat))
    tp = np.cumsum(tp_flags)
    counted = np.arange(1, len(tp_flags) + 1)
    recall = tp / num_gt
    precision = tp / counted if len(tp_flags) else np.zeros(0)
    # interpolated precision: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    interp = []
    for r in RECALL_POSITIONS:
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        interp.append(float(envelope[idx]) if idx < len(envelope) else 0.0)
    return APResult(
        ap=float(np.mean(interp)),
        pr=[(float(r), p) for r, p in zip(RECALL_POSITIONS, interp)],
        matches=matches,
        num_gt=num_gt,
        num_det=len(flat),
        raw=list(zip(recall.tolist(), precision.tolist())),
    )


# -- report ------------------------------------------------------------------------------------


@dataclass
class EvalEntry:
    cls: str
    metric: str  # AP3D, APBEV or AP2D
    iou: float
    result: APResult

    def to_json(self) -> dict:
        return {
            "class": self.cls,
            "metric": self.metric,
            "iou": self.iou,
            "ap": self.result.ap,
            "pr": [[r, p] for r, p in self.result.pr],
        }


@dataclass
class EvalReport:
    entries: List[EvalEntry] = field(default_factory=list)

    def get(self, cls: str, metric: str, iou: Optional[float] = None) -> Optional[float]:
        for e in self.entries:
            if e.cls == cls and e.metric == metric and (iou is None or abs(e.iou - iou) < 1e-12):
                return e.result.ap
        raise KeyError((cls, metric, iou))

    def to_json(self) -> str:
        return json.dumps([e.to_json() for e in self.entries], indent=2)

    def summary(self) -> str:
        lines = [f"{'class':<12}{'metric':<8}{'IoU':>6}{'AP40':>10}{'GT':>6}{'det':>6}"]
        for e in self.entries:
            ap = "absent" if e.result.ap is None else f"{100 * e.result.ap:.2f}"
            lines.append(f"{e.cls:<12}{e.metric:<8}{e.iou:>6.2f}{ap:>10}{e.result.num_gt:>6}{e.result.num_det:>6}")
        return "\n".join(lines)


METRICS: Dict[str, Tuple[str, Callable]] = {
    "AP2D": ("bbox", iou_2d),
    "APBEV": ("box_bev", iou_bev),
    "AP3D": ("box3d", iou_3d),
}


def _in_dont_care(det, cares: Sequence, regions: Sequence, thresh: float, fn: Callable, attr: str) -> bool:
    """True for a detection that reaches ``thresh`` with no real GT but overlaps a DontCare region in 2D."""
    if not any(iou_2d(det.bbox, r.bbox) >= thresh for r in regions):
        return False
    box = getattr(det, attr)() if attr != "bbox" else det.bbox
    return not any(fn(box, g) >= thresh for g in cares)


def evaluate_labels(
    det_images: Sequence[Sequence],
    gt_images: Sequence[Sequence],
    iou_thresholds: Dict[str, float],
    metrics: Sequence[str] = ("AP2D", "APBEV", "AP3D"),
    gt_filter: Optional[Callable] = None,
) -> EvalReport:
    """Evaluate parsed KITTI labels (per image) for every class in ``iou_thresholds``.

    Objects rejected by ``gt_filter`` are ignored ground truth. ``DontCare``
    regions only carry 2D extents: a detection that matches no real object but
    overlaps one of them in 2D is dropped from every metric.
    """
    report = EvalReport()
    for cls, thresh in iou_thresholds.items():
        for metric in metrics:
            attr, fn = METRICS[metric]

            def box_of(lb):
                return lb.bbox if metric == "AP2D" else getattr(lb, attr)()

            m_gts, m_ign, m_dets = [], [], []
            for d_img, g_img in zip(det_images, gt_images):
                rows = [g for g in g_img if g.type == cls]
                regions = [g for g in g_img if g.dont_care]
                boxes = [box_of(g) for g in rows]
                m_gts.append(boxes)
                m_ign.append([gt_filter is not None and not gt_filter(g) for g in rows])
                kept = [d for d in d_img if d.type == cls and not _in_dont_care(d, boxes, regions, thresh, fn, attr)]
                m_dets.append([(box_of(d), d.score if d.score is not None else 1.0) for d in kept])
            report.entries.append(EvalEntry(cls, metric, thresh, ap40(m_dets, m_gts, fn, thresh, m_ign)))
    return report
