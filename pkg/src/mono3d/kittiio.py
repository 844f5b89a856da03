"""KITTI label/calibration parsing, point projection, preprocessing and flips."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .detect import Detection3D, normalize_angle

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_INTEGER = re.compile(r"[+-]?\d+")
_TYPE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

FIELD_NAMES = (
    "type",
    "truncated",
    "occluded",
    "alpha",
    "x1",
    "y1",
    "x2",
    "y2",
    "h",
    "w",
    "l",
    "X",
    "Y",
    "Z",
    "rotation_y",
    "score",
)


class ParseError(ValueError):
    """Malformed input, located by 1-based line and character column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column
        self.reason = message


@dataclass
class KittiLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: Tuple[float, float, float, float]
    dims: Tuple[float, float, float]  # h, w, l
    location: Tuple[float, float, float]  # bottom center, camera frame
    rotation_y: float
    score: Optional[float] = None

    @property
    def dont_care(self) -> bool:
        return self.type == "DontCare"

    def box3d(self) -> Tuple[float, ...]:
        """``(X, Y_bottom, Z, h, w, l, ry)``, the layout the 3D IoU expects."""
        h, w, l = self.dims
        return (*self.location, h, w, l, self.rotation_y)

    def box_bev(self) -> Tuple[float, float, float, float, float]:
        h, w, l = self.dims
        return (self.location[0], self.location[2], w, l, self.rotation_y)


def _fields(line: str):
    """Yield ``(token, 1-based column)`` for whitespace-separated tokens."""
    for m in re.finditer(r"\S+", line):
        yield m.group(0), m.start() + 1


def _number(tok: str, lineno: int, col: int, name: str) -> float:
    if not _NUMBER.fullmatch(tok):
        raise ParseError(f"field '{name}' is not a number: {tok!r}", lineno, col)
    value = float(tok)
    if not math.isfinite(value):
        raise ParseError(f"field '{name}' is out of range: {tok!r}", lineno, col)
    return value


def parse_label_line(line: str, lineno: int = 1) -> KittiLabel:
    toks = list(_fields(line))
    if len(toks) not in (15, 16):
        col = toks[-1][1] if toks else 1
        raise ParseError(f"expected 15 or 16 fields, found {len(toks)}", lineno, col)
    kind, kcol = toks[0]
    if not _TYPE.fullmatch(kind):
        raise ParseError(f"invalid object type {kind!r}", lineno, kcol)
    occ_tok, occ_col = toks[2]
    if not _INTEGER.fullmatch(occ_tok):
        raise ParseError(f"field 'occluded' is not an integer: {occ_tok!r}", lineno, occ_col)
    occluded = int(occ_tok)
    if occluded not in (-1, 0, 1, 2, 3):
        raise ParseError(f"field 'occluded' must be in -1..3, got {occluded}", lineno, occ_col)
    nums = {}
    for idx in (1,) + tuple(range(3, len(toks))):
        tok, col = toks[idx]
        nums[idx] = _number(tok, lineno, col, FIELD_NAMES[idx])
    if nums[4] > nums[6]:
        raise ParseError("bbox has x1 > x2", lineno, toks[6][1])
    if nums[5] > nums[7]:
        raise ParseError("bbox has y1 > y2", lineno, toks[7][1])
    return KittiLabel(
        type=kind,
        truncated=nums[1],
        occluded=occluded,
        alpha=nums[3],
        bbox=(nums[4], nums[5], nums[6], nums[7]),
        dims=(nums[8], nums[9], nums[10]),
        location=(nums[11], nums[12], nums[13]),
        rotation_y=nums[14],
        score=nums.get(15),
    )


def parse_labels(text: str) -> List[KittiLabel]:
    """One object per non-blank line; raises :class:`ParseError` on the first malformed line."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            out.append(parse_label_line(line, lineno))
    return out


def _fmt(value: float, exact: bool, decimals: int = 2) -> str:
    return f"{value:.17g}" if exact else f"{value:.{decimals}f}"


def format_label(label: KittiLabel, exact: bool = False) -> str:
    """One label line.

    Compatibility output uses 2 decimals (4 for the score); ``exact`` writes 17
    significant digits so that parsing recovers every value bit-for-bit.
    """
    parts = [label.type, _fmt(label.truncated, exact), str(label.occluded)]
    vals = [label.alpha, *label.bbox, *label.dims, *label.location, label.rotation_y]
    parts += [_fmt(v, exact) for v in vals]
    if label.score is not None:
        parts.append(_fmt(label.score, exact, decimals=4))
    return " ".join(parts)


def serialize_labels(labels: Iterable[KittiLabel], exact: bool = False) -> str:
    return "".join(format_label(lb, exact) + "\n" for lb in labels)


# -- calibration ----------------------------------------------------------------------------


@dataclass
class Calibration:
    P2: np.ndarray  # 3 x 4

    def __post_init__(self):
        self.P2 = np.asarray(self.P2, dtype=np.float64).reshape(3, 4)

    @property
    def fx(self) -> float:
        return float(self.P2[0, 0])

    @property
    def fy(self) -> float:
        return float(self.P2[1, 1])

    @property
    def cx(self) -> float:
        return float(self.P2[0, 2])

    @property
    def cy(self) -> float:
        return float(self.P2[1, 2])

    @classmethod
    def from_intrinsics(cls, f: float, cx: float, cy: float, fy: Optional[float] = None) -> "Calibration":
        return cls(np.array([[f, 0, cx, 0], [0, f if fy is None else fy, cy, 0], [0, 0, 1, 0]], dtype=np.float64))

    def validate(self) -> List[str]:
        problems = []
        if self.P2[2, 2] == 0:
            problems.append("P2[2][2] is zero")
        if self.fx <= 0 or self.fy <= 0:
            problems.append("focal lengths must be positive")
        return problems


def parse_calib(text: str) -> Calibration:
    """Read the ``P2:`` row (12 reals) from a KITTI calibration file; other rows are ignored."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.lstrip()
        if not stripped.startswith("P2:"):
            continue
        offset = len(line) - len(stripped) + 3
        toks = [(t, c + offset) for t, c in _fields(stripped[3:])]
        if len(toks) != 12:
            raise ParseError(f"P2 needs 12 numbers, found {len(toks)}", lineno, toks[-1][1] if toks else offset)
        vals = [_number(t, lineno, c, "P2") for t, c in toks]
        calib = Calibration(np.array(vals))
        problems = calib.validate()
        if problems:
            raise ParseError("; ".join(problems), lineno, offset)
        return calib
    raise ParseError("missing 'P2:' line", max(1, len(text.splitlines())), 1)


def serialize_calib(calib: Calibration) -> str:
    return "P2: " + " ".join(f"{v:.17g}" for v in calib.P2.reshape(-1)) + "\n"


# -- geometry -----------------------------------------------------------------------------------


def project_points(points: np.ndarray, calib: Calibration) -> np.ndarray:
    """Camera-frame ``N x 3`` points to ``M x 3`` rows of ``(u, v, depth)``; points with depth <= 0 are dropped."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hom = np.column_stack([pts, np.ones(len(pts))]) @ calib.P2.T
    keep = hom[:, 2] > 0
    hom = hom[keep]
    return np.column_stack([hom[:, 0] / hom[:, 2], hom[:, 1] / hom[:, 2], hom[:, 2]])


def load_point_file(path: str) -> np.ndarray:
    """Little-endian float32 ``(x, y, z, reflectance)`` records; returns the ``N x 3`` coordinates."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: size is not a whole number of 4-float records")
    return raw.reshape(-1, 4)[:, :3].astype(np.float64)


def alpha_from_ry(ry: float, x: float, z: float) -> float:
    if z <= 0:
        raise ValueError("object must be in front of the camera (Z > 0)")
    return normalize_angle(ry - math.atan2(x, z))


def ry_from_alpha(alpha: float, x: float, z: float) -> float:
    if z <= 0:
        raise ValueError("object must be in front of the camera (Z > 0)")
    return normalize_angle(alpha + math.atan2(x, z))


def box_corners(location: Sequence[float], dims: Sequence[float], ry: float) -> np.ndarray:
    """The 8 corners (8 x 3) of a box given its bottom-center location, ``(h, w, l)`` and yaw."""
    h, w, l = dims
    xs = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (l / 2)
    ys = np.array([0, 0, 0, 0, -1, -1, -1, -1]) * h
    zs = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * (w / 2)
    c, s = math.cos(ry), math.sin(ry)
    rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return (rot @ np.vstack([xs, ys, zs])).T + np.asarray(location, dtype=np.float64)


def projected_box2d(location, dims, ry, calib: Calibration) -> Tuple[float, float, float, float]:
    uvd = project_points(box_corners(location, dims, ry), calib)
    if len(uvd) < 8:
        raise ValueError("box is partly behind the camera")
    return (float(uvd[:, 0].min()), float(uvd[:, 1].min()), float(uvd[:, 0].max()), float(uvd[:, 1].max()))


# -- preprocessing ------------------------------------------------------------------------------


@dataclass(frozen=True)
class PixelTransform:
    """``u' = sx * u + ox``, ``v' = sy * v + oy`` from original to network pixels."""

    sx: float
    sy: float
    ox: float
    oy: float

    def apply(self, u, v):
        return self.sx * np.asarray(u) + self.ox, self.sy * np.asarray(v) + self.oy

    def inverse(self) -> "PixelTransform":
        return PixelTransform(1 / self.sx, 1 / self.sy, -self.ox / self.sx, -self.oy / self.sy)

    def matrix(self) -> np.ndarray:
        return np.array([[self.sx, 0, self.ox], [0, self.sy, self.oy], [0, 0, 1.0]])

    def apply_calib(self, calib: Calibration) -> Calibration:
        return Calibration(self.matrix() @ calib.P2)

    def apply_label(self, label: KittiLabel) -> KittiLabel:
        x1, y1 = self.apply(label.bbox[0], label.bbox[1])
        x2, y2 = self.apply(label.bbox[2], label.bbox[3])
        return replace(label, bbox=(float(x1), float(y1), float(x2), float(y2)))


def preprocess(image_hw: Tuple[int, int], crop_top: int, target_hw: Tuple[int, int]) -> PixelTransform:
    """Transform for cropping ``crop_top`` rows off the top, then resizing to ``target_hw``."""
    h, w = image_hw
    th, tw = target_hw
    if not 0 <= crop_top < h:
        raise ValueError(f"crop {crop_top} must be in [0, {h})")
    if th <= 0 or tw <= 0 or w <= 0:
        raise ValueError("target and image sizes must be positive")
    sx, sy = tw / w, th / (h - crop_top)
    return PixelTransform(sx, sy, 0.0, -sy * crop_top)


def flip_horizontal(labels: Sequence[KittiLabel], calib: Calibration, width: int):
    """Mirror labels and calibration about the vertical image axis ``u -> width - 1 - u``."""
    if width <= 0:
        raise ValueError("image width must be positive")
    m = width - 1
    P = calib.P2
    flipped = P.copy()
    flipped[0] = m * P[2] - P[0]
    flipped[:, 0] *= -1
    out = []
    for lb in labels:
        x1, y1, x2, y2 = lb.bbox
        X, Y, Z = lb.location
        ry = normalize_angle(math.pi - lb.rotation_y)
        alpha = alpha_from_ry(ry, -X, Z) if Z > 0 else normalize_angle(math.pi - lb.alpha)
        out.append(
            replace(lb, bbox=(m - x2, y1, m - x1, y2), location=(-X, Y, Z), rotation_y=ry, alpha=alpha)
        )
    return out, Calibration(flipped)


# -- result files ---------------------------------------------------------------------------------


def detection_to_label(det: Detection3D, class_names: Sequence[str]) -> KittiLabel:
    w, h, l = det.dims
    X, Yc, Z = det.center3d
    return KittiLabel(
        type=class_names[det.class_id],
        truncated=-1.0,
        occluded=-1,
        alpha=det.alpha,
        bbox=tuple(det.box2d),
        dims=(h, w, l),
        location=(X, Yc + h / 2, Z),
        rotation_y=det.ry,
        score=det.score,
    )


def format_results(dets: Sequence[Detection3D], class_names: Sequence[str]) -> str:
    return serialize_labels((detection_to_label(d, class_names) for d in dets), exact=False)
