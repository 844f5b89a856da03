"""End-to-end detector: stub backbone, context branch, DFE, DTR with DPE and the 2D-3D head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import detect
from .config import RunConfig
from .dfe import DepthDistribution, DfeState, dfe_forward
from .dtr import AttentionConfig, DpeState, DtrState, build_dpe, dtr_forward
from .kittiio import Calibration, ry_from_alpha
from .tensor import Conv2dParams, Tensor, conv2d, elu, make_rng, reshape, transpose

CLS_PRIOR = 0.01


@dataclass
class HeadOutput:
    cls_logits: Tensor  # M x K
    reg: Tensor  # M x 11
    dist: Optional[DepthDistribution]


class Detector:
    """Parameter container plus forward pass for one ``in_channels x H x W`` input field."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator = None):
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else make_rng(cfg.seed, stream=1)
        c = cfg.C
        self.num_anchors = len(cfg.ratios) * cfg.scale_count
        self.num_classes = len(cfg.classes)
        self.attn_cfg = AttentionConfig(
            model_dim=c,
            heads=cfg.heads,
            kind=cfg.attention,
            enc_layers=cfg.enc_layers,
            dec_layers=cfg.dec_layers,
            layer_norm=cfg.layer_norm,
        )
        self.backbone = Conv2dParams.create(cfg.in_channels, c, 3, rng, padding=1)
        self.context = Conv2dParams.create(c, c, 3, rng, padding=1)
        self.dfe = DfeState.create(c, cfg.D, cfg.r, rng) if cfg.use_dfe else None
        self.dpe = DpeState.create(cfg.D, c, rng) if cfg.use_dpe else None
        self.dtr = DtrState.create(self.attn_cfg, rng)
        self.head = Conv2dParams.create(c, c, 3, rng, padding=1)
        self.cls_out = Conv2dParams.create(c, self.num_anchors * self.num_classes, 1, rng)
        self.reg_out = Conv2dParams.create(c, self.num_anchors * detect.NUM_RESIDUALS, 1, rng)
        self.cls_out.bias.data[:] = -math.log((1 - CLS_PRIOR) / CLS_PRIOR)
        self.reg_out.weight.data *= 0.1
        self.reg_out.bias.data[:] = 0.0

    def parameters(self) -> List[Tensor]:
        params = self.backbone.parameters() + self.context.parameters()
        if self.dfe is not None:
            params += self.dfe.parameters()
        if self.dpe is not None:
            params += self.dpe.parameters()
        params += self.dtr.parameters()
        for conv in (self.head, self.cls_out, self.reg_out):
            params += conv.parameters()
        return params

    def state_dict(self) -> dict:
        return {f"p{i:03d}": p.data.copy() for i, p in enumerate(self.parameters())}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        if len(state) != len(params):
            raise ValueError(f"checkpoint has {len(state)} tensors, model has {len(params)}")
        for i, p in enumerate(params):
            arr = state[f"p{i:03d}"]
            if arr.shape != p.shape:
                raise ValueError(f"tensor {i}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data[...] = arr

    def _per_anchor(self, t: Tensor, k: int) -> Tensor:
        a = self.num_anchors
        _, h, w = t.shape
        grid = reshape(t, (a, k, h, w))
        return reshape(transpose(grid, (2, 3, 0, 1)), (h * w * a, k))

    def forward(self, x: Tensor) -> HeadOutput:
        feat = elu(conv2d(x, self.backbone))
        context = elu(conv2d(feat, self.context))
        if self.dfe is not None:
            depth_feat, dist = dfe_forward(feat, self.dfe)
        else:
            depth_feat, dist = feat, None
        dpe = build_dpe(dist, self.dpe) if self.dpe is not None else None
        fused = dtr_forward(context, depth_feat, dpe, self.dtr)
        shared = elu(conv2d(fused, self.head))
        return HeadOutput(
            self._per_anchor(conv2d(shared, self.cls_out), self.num_classes),
            self._per_anchor(conv2d(shared, self.reg_out), detect.NUM_RESIDUALS),
            dist,
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def postprocess(
    out: HeadOutput,
    anchors: detect.AnchorGrid,
    calib: Calibration,
    score_thresh: float,
    nms_iou: float,
) -> List[detect.Detection3D]:
    """Score, decode, suppress and lift surviving anchors to camera-frame detections."""
    probs = _sigmoid(out.cls_logits.data)
    cls_ids = np.argmax(probs, axis=1)
    scores = probs[np.arange(len(probs)), cls_ids]
    keep = np.nonzero(scores >= score_thresh)[0]
    if len(keep) == 0:
        return []
    decoded = detect.decode(out.reg.data[keep], anchors.boxes[keep]).boxes
    corners = detect.center_to_corners(decoded[:, :4])
    dets = []
    for j in detect.nms(corners, scores[keep], nms_iou, score_thresh):
        row = decoded[j]
        z = row[6]
        if z <= 0:
            continue
        center = detect.backproject_center(row[4], row[5], z, calib.P2)
        alpha = detect.normalize_angle(row[10])
        dets.append(
            detect.Detection3D(
                class_id=int(cls_ids[keep[j]]),
                score=float(scores[keep[j]]),
                box2d=tuple(float(v) for v in corners[j]),
                center3d=center,
                dims=(float(row[7]), float(row[8]), float(row[9])),
                ry=ry_from_alpha(alpha, center[0], center[2]),
                alpha=alpha,
            )
        )
    return dets
