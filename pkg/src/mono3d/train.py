"""Toy training loop: Adam with cosine annealing over synthetic scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import detect
from .config import RunConfig
from .depthbin import depth_focal_loss
from .evaluation import EvalReport, evaluate_labels
from .kittiio import detection_to_label
from .model import Detector, postprocess
from .synthetic import SyntheticScene, make_scene
from .tensor import NonFiniteError, Tensor, scale


class NonFiniteLoss(FloatingPointError):
    """Training produced a NaN or infinite loss; ``diagnostics`` says where."""

    def __init__(self, step: int, diagnostics: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.diagnostics = diagnostics


def cosine_lr(lr0: float, step: int, total: int) -> float:
    """``lr0 * (1 + cos(pi * step / total)) / 2``."""
    if total <= 0:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * min(step, total) / total)) / 2.0


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class SceneTargets:
    assignment: np.ndarray
    reg_targets: np.ndarray


def build_anchors(cfg: RunConfig, scenes: Sequence[SyntheticScene]) -> detect.AnchorGrid:
    """Anchor grid whose 3D priors are statistics of the scenes' ground truth."""
    templates = detect.template_shapes(cfg.ratios, cfg.scales())
    rows = np.vstack([s.gt_rows() for s in scenes])
    boxes = detect.center_to_corners(rows[:, :4])
    params = rows[:, [6, 7, 8, 9, 10]]
    means, _ = detect.compute_anchor_priors(boxes, params, templates)
    return detect.generate_anchors(cfg.H, cfg.W, cfg.stride, cfg.ratios, cfg.scales(), means)


def scene_targets(scene: SyntheticScene, anchors: detect.AnchorGrid, pos_iou: float) -> SceneTargets:
    assignment = detect.assign_targets(anchors.corners(), scene.gt_corners(), pos_iou)
    reg = np.zeros((len(anchors), detect.NUM_RESIDUALS))
    pos = np.nonzero(assignment >= 0)[0]
    if len(pos):
        reg[pos] = detect.encode_targets(scene.gt_rows()[assignment[pos]], anchors.boxes[pos])
    return SceneTargets(assignment, reg)


@dataclass
class StepLoss:
    total: Tensor
    cls: float
    reg: float
    dep: float
    num_pos: int


def scene_loss(model: Detector, scene: SyntheticScene, targets: SceneTargets) -> StepLoss:
    cfg = model.cfg
    out = model.forward(Tensor(scene.field))
    weights = detect.LossWeights(cfg.w_cls, cfg.w_reg, cfg.w_dep)
    det = detect.detection_loss(
        out.cls_logits,
        out.reg,
        targets.reg_targets,
        scene.class_ids,
        targets.assignment,
        weights,
        cfg.focal_gamma,
        cfg.focal_alpha,
    )
    total = det.total
    dep = 0.0
    if out.dist is not None and scene.depth.valid_mask.any():
        dl = depth_focal_loss(out.dist.probs, scene.depth, cfg.focal_gamma, cfg.focal_alpha)
        dep = dl.item()
        total = total + scale(dl, cfg.w_dep)
    return StepLoss(total, det.cls.item(), det.reg.item(), dep, det.num_pos)


@dataclass
class TrainResult:
    cfg: RunConfig
    model: Detector
    anchors: detect.AnchorGrid
    scenes: List[SyntheticScene]
    curve: List[dict] = field(default_factory=list)  # one row per step

    def loss_reduction(self, start_step: int = 10) -> float:
        """Fractional drop of the total loss from ``start_step`` to the last step."""
        first = self.curve[min(start_step, len(self.curve) - 1)]["total"]
        return 1.0 - self.curve[-1]["total"] / first

    def curve_csv(self) -> str:
        lines = ["step,total,cls,reg,dep,lr"]
        for row in self.curve:
            lines.append(
                f"{row['step']},{row['total']!r},{row['cls']!r},{row['reg']!r},{row['dep']!r},{row['lr']!r}"
            )
        return "\n".join(lines) + "\n"


def train_toy(cfg: RunConfig, log: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Overfit ``cfg.scenes`` synthetic scenes for ``cfg.steps`` Adam steps.

    Each step averages the per-scene totals (detection plus weighted depth
    loss). Raises ``NonFiniteLoss`` as soon as a loss stops being finite.
    """
    cfg.validate()
    scenes = [make_scene(cfg.seed * 1000 + i, cfg) for i in range(cfg.scenes)]
    anchors = build_anchors(cfg, scenes)
    targets = [scene_targets(s, anchors, cfg.pos_iou) for s in scenes]
    model = Detector(cfg)
    opt = Adam(model.parameters())
    result = TrainResult(cfg, model, anchors, scenes)
    n = len(scenes)
    for step in range(cfg.steps):
        lr = cosine_lr(cfg.lr, step, cfg.steps)
        opt.zero_grad()
        totals = [0.0, 0.0, 0.0, 0.0]
        for scene, tgt in zip(scenes, targets):
            try:
                sl = scene_loss(model, scene, tgt)
            except NonFiniteError as exc:
                raise NonFiniteLoss(step, _diagnostics(model, scene, None, step, lr, str(exc))) from None
            value = sl.total.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(step, _diagnostics(model, scene, sl, step, lr))
            scale(sl.total, 1.0 / n).backward()
            for k, v in enumerate((value, sl.cls, sl.reg, sl.dep)):
                totals[k] += v / n
        opt.step(lr)
        row = {"step": step, "total": totals[0], "cls": totals[1], "reg": totals[2], "dep": totals[3], "lr": lr}
        result.curve.append(row)
        if log is not None:
            log(row)
    return result


def _diagnostics(
    model: Detector, scene: SyntheticScene, sl: Optional[StepLoss], step: int, lr: float, where: str = "loss"
) -> dict:
    params = model.parameters()
    return {
        "step": step,
        "lr": lr,
        "scene_seed": scene.seed,
        "where": where,
        "cls": None if sl is None else sl.cls,
        "reg": None if sl is None else sl.reg,
        "dep": None if sl is None else sl.dep,
        "num_pos": None if sl is None else sl.num_pos,
        "nonfinite_params": [i for i, p in enumerate(params) if not np.all(np.isfinite(p.data))],
        "max_abs_param": max(float(np.nanmax(np.abs(p.data), initial=0.0)) for p in params),
    }


def predict(result: TrainResult, scene: SyntheticScene) -> list:
    cfg = result.cfg
    out = result.model.forward(Tensor(scene.field))
    return postprocess(out, result.anchors, scene.calib, cfg.score_thresh, cfg.nms_iou)


def evaluate_training_scenes(result: TrainResult, iou: Optional[float] = None) -> EvalReport:
    """AP40 on the training scenes themselves (the overfit check)."""
    cfg = result.cfg
    thresh = cfg.toy_eval_iou if iou is None else iou
    det_images = [[detection_to_label(d, cfg.classes) for d in predict(result, s)] for s in result.scenes]
    gt_images = [s.labels for s in result.scenes]
    return evaluate_labels(det_images, gt_images, {c: thresh for c in cfg.classes})
