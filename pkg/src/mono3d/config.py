"""Flat ``key=value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, Tuple


class ConfigError(ValueError):
    pass


def _doc(default, text: str):
    return field(default=default, metadata={"doc": text})


@dataclass
class RunConfig:
    seed: int = _doc(0, "master seed for every generator")
    # feature map and depth bins (full-scale defaults)
    C: int = _doc(256, "feature channels")
    H: int = _doc(36, "feature map height (input / 8)")
    W: int = _doc(160, "feature map width (input / 8)")
    in_channels: int = _doc(8, "channels of the synthetic stub-backbone input field")
    D: int = _doc(96, "depth bins")
    r: int = _doc(4, "bin merge scale, D' = D / r")
    d_min: float = _doc(1.0, "nearest binned depth (m)")
    d_max: float = _doc(80.0, "farthest binned depth (m)")
    depth_method: str = _doc("LID", "UD, SID or LID")
    # transformer
    heads: int = _doc(8, "attention heads")
    enc_layers: int = _doc(1, "encoder layers")
    dec_layers: int = _doc(1, "decoder layers")
    attention: str = _doc("linear", "vanilla or linear")
    layer_norm: bool = _doc(False, "layer normalization after each residual")
    use_dfe: bool = _doc(True, "depth-aware feature enhancement (False: pass-through)")
    use_dpe: bool = _doc(True, "depth positional encoding")
    # anchors and head
    stride: int = _doc(8, "input pixels per feature pixel")
    ratios: Tuple[float, ...] = _doc((0.5, 1.0, 1.5), "anchor width/height ratios")
    scale_base: float = _doc(24.0, "smallest anchor height (px)")
    scale_count: int = _doc(16, "anchor heights base * 2^(i/4), i < scale_count")
    classes: Tuple[str, ...] = _doc(("Car",), "class names, in head order")
    pos_iou: float = _doc(0.5, "2D IoU above which an anchor is positive")
    # losses and optimization
    w_cls: float = _doc(1.0, "classification loss weight")
    w_reg: float = _doc(1.0, "regression loss weight")
    w_dep: float = _doc(1.0, "depth loss weight")
    focal_gamma: float = _doc(2.0, "focal loss gamma")
    focal_alpha: float = _doc(0.25, "focal loss alpha")
    lr: float = _doc(1e-4, "initial Adam learning rate (cosine annealed)")
    epochs: int = _doc(120, "epochs at full scale")
    steps: int = _doc(500, "optimizer steps in toy training")
    scenes: int = _doc(1, "synthetic scenes in toy training")
    objects: int = _doc(2, "objects per synthetic scene")
    # inference and evaluation
    score_thresh: float = _doc(0.75, "drop detections scoring below this")
    nms_iou: float = _doc(0.4, "NMS IoU threshold")
    eval_iou: Tuple[str, ...] = _doc(("Car:0.7", "Pedestrian:0.5", "Cyclist:0.5"), "class:IoU pairs for evaluation")
    toy_eval_iou: float = _doc(0.5, "3D IoU threshold for toy evaluation")
    # preprocessing
    crop_top: int = _doc(100, "rows cropped from the top of each image")
    input_h: int = _doc(288, "network input height")
    input_w: int = _doc(1280, "network input width")
    # gradient checks
    gc_seeds: int = _doc(20, "seeds per gradient check")
    gc_eps: float = _doc(1e-5, "finite-difference step")
    gc_tol: float = _doc(1e-4, "max relative error")
    # benchmark
    bench_sizes: Tuple[int, ...] = _doc((512, 1024, 2048, 4096), "token counts")
    bench_dim: int = _doc(256, "channels in the benchmark")
    bench_heads: int = _doc(8, "heads in the benchmark")
    bench_runs: int = _doc(5, "timed runs per cell (median reported)")
    # io
    out_dir: str = _doc("runs", "output directory")
    parallel: bool = _doc(False, "parallelize across independent files")

    def scales(self) -> Tuple[float, ...]:
        return tuple(self.scale_base * 2.0 ** (i / 4.0) for i in range(self.scale_count))

    def eval_thresholds(self) -> Dict[str, float]:
        out = {}
        for item in self.eval_iou:
            name, _, value = item.partition(":")
            try:
                out[name] = float(value)
            except ValueError:
                raise ConfigError(f"eval_iou entry {item!r} is not class:IoU") from None
        return out

    def validate(self) -> "RunConfig":
        if self.D % self.r:
            raise ConfigError(f"D={self.D} must be divisible by r={self.r}")
        if self.C % self.heads:
            raise ConfigError(f"C={self.C} must be divisible by heads={self.heads}")
        if self.use_dpe and not self.use_dfe:
            raise ConfigError("use_dpe needs the depth distribution predicted by the DFE")
        if self.attention not in ("vanilla", "linear"):
            raise ConfigError(f"attention must be vanilla or linear, got {self.attention!r}")
        self.eval_thresholds()
        return self

    # -- text form -------------------------------------------------------------------
    def dump(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"# {f.metadata.get('doc', '')}")
            lines.append(f"{f.name}={_format(value)}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, pairs: Dict[str, str]) -> "RunConfig":
        types = {f.name: f for f in fields(self)}
        updates = {}
        for key, raw in pairs.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            updates[key] = _coerce(types[key], raw)
        return dataclasses.replace(self, **updates)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig" = None) -> "RunConfig":
        return (base or cls()).with_overrides(parse_pairs(text.splitlines()))


def parse_pairs(lines: Iterable[str]) -> Dict[str, str]:
    out = {}
    for n, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _scalar(kind, raw: str, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def _coerce(f: dataclasses.Field, raw: str):
    default = f.default
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if not items:
            raise ConfigError(f"{f.name}: needs at least one value")
        return tuple(_scalar(kind, s, f.name) for s in items)
    return _scalar(type(default), raw, f.name)


TOY_PRESET = {
    "C": "32",
    "H": "12",
    "W": "12",
    "D": "24",
    "r": "4",
    "heads": "2",
    "d_max": "40",
    "scale_base": "10",
    "lr": "0.002",
}
"""Overrides applied by toy training before user overrides: desk-scale shapes,
a shorter depth range matching the synthetic scenes and a learning rate that
converges within a few hundred steps."""


def toy_config(overrides: Dict[str, str] = None) -> RunConfig:
    """Defaults, then the toy preset, then ``overrides`` (config file and command line)."""
    return RunConfig().with_overrides({**TOY_PRESET, **(overrides or {})}).validate()
