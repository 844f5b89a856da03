"""Depth discretization, sparse depth-target rasterization and the depth focal loss."""

from __future__ import annotations

import bisect
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from .tensor import Tensor, ShapeError, getitem, log, mean, power, scale, sub

INVALID = -1
METHODS = ("UD", "SID", "LID")


class EmptyDepthTargetWarning(UserWarning):
    """The depth target had no valid pixel; the loss was reported as zero."""


@dataclass(frozen=True)
class DepthBinSpec:
    d_min: float = 1.0
    d_max: float = 80.0
    num_bins: int = 96
    method: str = "LID"

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.num_bins < 2:
            raise ValueError("need at least 2 depth bins")
        if self.method not in METHODS:
            raise ValueError(f"unknown discretization {self.method!r}; expected one of {METHODS}")


def boundaries(spec: DepthBinSpec) -> list:
    """The ``D + 1`` bin edges, ``d_min`` first and ``d_max`` last, exactly."""
    D, lo, hi = spec.num_bins, spec.d_min, spec.d_max
    span = hi - lo
    if spec.method == "UD":
        edges = [lo + span * (i / D) for i in range(D + 1)]
    elif spec.method == "SID":
        log_lo, log_hi = math.log(lo), math.log(hi)
        edges = [math.exp(log_lo + (log_hi - log_lo) * i / D) for i in range(D + 1)]
    else:
        # width of bin i grows linearly: edge(i) = lo + span * i(i+1) / (D(D+1))
        edges = [lo + span * ((i * (i + 1)) / (D * (D + 1))) for i in range(D + 1)]
    edges[0], edges[-1] = lo, hi
    return edges


def depth_to_bin(spec: DepthBinSpec, depth: float, edges: Sequence[float] = None) -> int:
    """Index ``i`` with ``edge(i) <= depth < edge(i+1)``, or ``INVALID`` outside ``[d_min, d_max)``."""
    if edges is None:
        edges = boundaries(spec)
    if not (math.isfinite(depth) and edges[0] <= depth < edges[-1]):
        return INVALID
    return bisect.bisect_right(edges, depth) - 1


@dataclass
class DepthTargetMap:
    bins: np.ndarray  # H x W int, INVALID where no label
    num_bins: int

    @property
    def valid_mask(self) -> np.ndarray:
        return self.bins != INVALID

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bins.shape

    def to_text(self) -> str:
        h, w = self.bins.shape
        rows = [f"DBIN {h} {w} {self.num_bins}"]
        rows += [" ".join(str(int(v)) for v in row) for row in self.bins]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DepthTargetMap":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty DBIN text")
        head = lines[0].split()
        if len(head) != 4 or head[0] != "DBIN":
            raise ValueError("line 1: expected header 'DBIN H W D'")
        try:
            h, w, d = (int(v) for v in head[1:])
        except ValueError:
            raise ValueError("line 1: non-integer DBIN header field") from None
        if h <= 0 or w <= 0 or d < 2:
            raise ValueError("line 1: DBIN dimensions out of range")
        if len(lines) != h + 1:
            raise ValueError(f"expected {h} rows after header, found {len(lines) - 1}")
        bins = np.empty((h, w), dtype=np.int64)
        for r, line in enumerate(lines[1:]):
            toks = line.split()
            if len(toks) != w:
                raise ValueError(f"line {r + 2}: expected {w} values, found {len(toks)}")
            try:
                vals = [int(t) for t in toks]
            except ValueError:
                raise ValueError(f"line {r + 2}: non-integer bin value") from None
            if any(v != INVALID and not 0 <= v < d for v in vals):
                raise ValueError(f"line {r + 2}: bin value outside [0, {d - 1}] and not {INVALID}")
            bins[r] = vals
        return cls(bins, d)


def rasterize_depth_gt(
    points: Iterable[Tuple[float, float, float]], height: int, width: int, spec: DepthBinSpec
) -> DepthTargetMap:
    """Scatter ``(u, v, depth)`` samples onto an ``height x width`` bin map; the nearest sample wins."""
    edges = boundaries(spec)
    nearest = np.full((height, width), np.inf)
    bins = np.full((height, width), INVALID, dtype=np.int64)
    for u, v, d in points:
        b = depth_to_bin(spec, d, edges)
        if b == INVALID:
            continue
        col, row = math.floor(u + 0.5), math.floor(v + 0.5)
        if 0 <= row < height and 0 <= col < width and d < nearest[row, col]:
            nearest[row, col] = d
            bins[row, col] = b
    return DepthTargetMap(bins, spec.num_bins)


def depth_focal_loss(probs: Tensor, target: DepthTargetMap, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean over labelled pixels of ``-alpha (1 - p)^gamma log p`` at the target bin.

    ``probs`` is a ``D x H x W`` per-pixel distribution. An all-invalid target
    yields a zero loss and an :class:`EmptyDepthTargetWarning`.
    """
    if probs.ndim != 3 or probs.shape[1:] != target.shape or probs.shape[0] != target.num_bins:
        raise ShapeError(f"depth loss: prediction {probs.shape} vs target {target.shape} with D={target.num_bins}")
    rows, cols = np.nonzero(target.valid_mask)
    if rows.size == 0:
        warnings.warn("depth target has no valid pixel", EmptyDepthTargetWarning, stacklevel=2)
        return Tensor(0.0)
    p = getitem(probs, (target.bins[rows, cols], rows, cols))
    per_pixel = scale(log(p), -alpha)
    if gamma != 0:
        per_pixel = power(sub(Tensor(np.ones_like(p.data)), p), gamma) * per_pixel
    return mean(per_pixel)


def batch_depth_loss(per_image: Sequence[Tensor]) -> Tensor:
    """Per-image averages combined by a plain batch mean."""
    total = per_image[0]
    for t in per_image[1:]:
        total = total + t
    return scale(total, 1.0 / len(per_image))
