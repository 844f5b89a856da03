"""Deterministic synthetic scenes standing in for images plus a real backbone.

Each scene places a few car-sized boxes in front of a pinhole camera, renders a
smooth random input field carrying per-object cues at the feature resolution,
and samples exact depth points on the box surfaces for depth supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.ndimage import uniform_filter

from .config import RunConfig
from .depthbin import DepthBinSpec, DepthTargetMap, rasterize_depth_gt
from .detect import iou_2d
from .evaluation import iou_bev
from .kittiio import Calibration, KittiLabel, alpha_from_ry, project_points, projected_box2d
from .tensor import make_rng

CAMERA_HEIGHT = 1.65
FIELD_CHANNELS = 8
POINTS_PER_BOX = 400


@dataclass
class SyntheticScene:
    seed: int
    field: np.ndarray  # in_channels x H x W
    calib: Calibration  # network pixel coordinates
    labels: List[KittiLabel]
    class_ids: np.ndarray
    points: np.ndarray  # camera-frame samples on box surfaces
    depth: DepthTargetMap  # at feature resolution
    image_hw: tuple

    def gt_rows(self) -> np.ndarray:
        """Per object ``[x2d, y2d, w2d, h2d, xp, yp, z, w3d, h3d, l3d, alpha]`` (anchor layout)."""
        rows = []
        for lb in self.labels:
            x1, y1, x2, y2 = lb.bbox
            h, w, l = lb.dims
            X, Yb, Z = lb.location
            u, v, _ = project_points(np.array([[X, Yb - h / 2, Z]]), self.calib)[0]
            rows.append([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, u, v, Z, w, h, l, lb.alpha])
        return np.array(rows, dtype=np.float64).reshape(-1, 11)

    def gt_corners(self) -> np.ndarray:
        return np.array([lb.bbox for lb in self.labels], dtype=np.float64).reshape(-1, 4)


def scene_camera(cfg: RunConfig) -> Calibration:
    img_h, img_w = cfg.H * cfg.stride, cfg.W * cfg.stride
    return Calibration.from_intrinsics(1.6 * img_w, img_w / 2.0, 0.4 * img_h)


def _sample_object(rng, calib, img_hw):
    img_h, img_w = img_hw
    dims = (rng.uniform(1.4, 1.6), rng.uniform(1.5, 1.8), rng.uniform(3.4, 4.2))
    z = rng.uniform(8.0, 22.0)
    x = rng.uniform(-0.25, 0.25) * z
    ry = rng.uniform(-math.pi, math.pi)
    loc = (x, CAMERA_HEIGHT, z)
    try:
        box = projected_box2d(loc, dims, ry, calib)
    except ValueError:
        return None
    x1, y1, x2, y2 = box
    if x1 < 0 or y1 < 0 or x2 > img_w - 1 or y2 > img_h - 1:
        return None
    if y2 - y1 < 12 or x2 - x1 > 0.85 * img_w:
        return None
    return KittiLabel("Car", 0.0, 0, alpha_from_ry(ry, x, z), box, dims, loc, ry)


def _surface_points(rng, lb: KittiLabel, n: int) -> np.ndarray:
    """Uniform samples on the six faces of the box."""
    h, w, l = lb.dims
    face = rng.integers(0, 6, size=n)
    a, b = rng.uniform(-0.5, 0.5, size=n), rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    local[:, 0] = np.where(axis == 0, sign, a)
    local[:, 1] = np.where(axis == 1, sign, np.where(axis == 0, a, b))
    local[:, 2] = np.where(axis == 2, sign, b)
    c, s = math.cos(lb.rotation_y), math.sin(lb.rotation_y)
    xs, ys, zs = local[:, 0] * l, local[:, 1] * h - h / 2, local[:, 2] * w
    X = lb.location[0] + c * xs + s * zs
    Z = lb.location[2] - s * xs + c * zs
    Y = lb.location[1] + ys
    return np.column_stack([X, Y, Z])


def _render_field(rng, cfg: RunConfig, labels: List[KittiLabel], in_channels: int) -> np.ndarray:
    h, w, s = cfg.H, cfg.W, cfg.stride
    field = 0.2 * uniform_filter(rng.standard_normal((in_channels, h, w)), size=(1, 3, 3), mode="nearest")
    ys, xs = np.meshgrid((np.arange(h) + 0.5) * s, (np.arange(w) + 0.5) * s, indexing="ij")
    for lb in labels:
        x1, y1, x2, y2 = lb.bbox
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        sx, sy = max((x2 - x1) / 2, s / 2), max((y2 - y1) / 2, s / 2)
        mask = np.exp(-0.5 * (((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2))
        mask *= (xs >= x1 - s / 2) & (xs <= x2 + s / 2) & (ys >= y1 - s / 2) & (ys <= y2 + s / 2)
        z = lb.location[2]
        hh, ww, ll = lb.dims
        cues = [
            1.0,
            math.sin(2 * math.pi * z / 8.0),
            math.cos(2 * math.pi * z / 8.0),
            math.sin(lb.alpha),
            math.cos(lb.alpha),
            5.0 * (hh - 1.5),
            2.0 * (ll - 3.8),
            5.0 * (ww - 1.65),
        ]
        for ch, cue in enumerate(cues[:in_channels]):
            field[ch] += mask * cue
    return field


def make_scene(seed: int, cfg: RunConfig, num_objects: int = None) -> SyntheticScene:
    rng = make_rng(seed, stream=7)
    calib = scene_camera(cfg)
    img_hw = (cfg.H * cfg.stride, cfg.W * cfg.stride)
    want = cfg.objects if num_objects is None else num_objects
    labels: List[KittiLabel] = []
    for _ in range(500):
        if len(labels) == want:
            break
        lb = _sample_object(rng, calib, img_hw)
        if lb is None:
            continue
        if any(iou_2d(lb.bbox, o.bbox) > 0.1 or iou_bev(lb.box_bev(), o.box_bev()) > 0 for o in labels):
            continue
        labels.append(lb)
    if len(labels) < want:
        raise RuntimeError(f"could not place {want} objects in a {img_hw} image (seed {seed})")
    pts = np.vstack([_surface_points(rng, lb, POINTS_PER_BOX) for lb in labels]) if labels else np.zeros((0, 3))
    uvd = project_points(pts, calib)
    spec = DepthBinSpec(cfg.d_min, cfg.d_max, cfg.D, cfg.depth_method)
    s = cfg.stride
    feat_pts = [(u / s - 0.5, v / s - 0.5, d) for u, v, d in uvd]
    depth = rasterize_depth_gt(feat_pts, cfg.H, cfg.W, spec)
    field = _render_field(rng, cfg, labels, cfg.in_channels)
    return SyntheticScene(
        seed=seed,
        field=field,
        calib=calib,
        labels=labels,
        class_ids=np.zeros(len(labels), dtype=np.int64),
        points=pts,
        depth=depth,
        image_hw=img_hw,
    )
