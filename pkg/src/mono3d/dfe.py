"""Depth-aware feature enhancement.

Predicts a per-pixel distribution over depth bins, merges adjacent bins with a
grouped 1x1 convolution, pools features into one prototype per merged bin and
redistributes the prototypes back onto pixels before fusing with the initial
depth-aware features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Conv2dParams,
    ShapeError,
    Tensor,
    add,
    broadcast_to,
    concat,
    conv2d,
    div,
    elu,
    matmul,
    reshape,
    softmax,
    transpose,
    tsum,
)


@dataclass
class DepthDistribution:
    probs: Tensor  # D x H x W, softmax over the first axis

    @property
    def num_bins(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> np.ndarray:
        """Per-pixel most likely bin; ties resolve to the lowest index."""
        return np.argmax(self.probs.data, axis=0)


@dataclass
class DfeState:
    feat_conv: Conv2dParams  # C -> C, 3x3 pad 1, followed by elu
    logit_conv: Conv2dParams  # C -> D, 1x1
    merge_conv: Conv2dParams  # D -> D', 1x1, groups = D'
    fuse_conv: Conv2dParams  # 2C -> C, 1x1
    r: int

    @classmethod
    def create(cls, channels: int, num_bins: int, r: int, rng: np.random.Generator) -> "DfeState":
        if num_bins % r:
            raise ValueError(f"depth bins D={num_bins} not divisible by merge scale r={r}")
        merged = num_bins // r
        merge = Conv2dParams(
            num_bins,
            merged,
            1,
            1,
            Tensor(np.full((merged, r, 1, 1), 1.0 / r), requires_grad=True),
            groups=merged,
        )
        return cls(
            feat_conv=Conv2dParams.create(channels, channels, 3, rng, padding=1),
            logit_conv=Conv2dParams.create(channels, num_bins, 1, rng),
            merge_conv=merge,
            fuse_conv=Conv2dParams.create(2 * channels, channels, 1, rng),
            r=r,
        )

    def parameters(self) -> list:
        out = []
        for conv in (self.feat_conv, self.logit_conv, self.merge_conv, self.fuse_conv):
            out += conv.parameters()
        return out


def predict_depth(x: Tensor, s: DfeState):
    """Return the initial depth-aware feature map and its depth distribution."""
    if x.ndim != 3 or x.shape[0] != s.feat_conv.in_channels:
        raise ShapeError(f"predict_depth: input {x.shape} vs {s.feat_conv.in_channels} channels")
    feat = elu(conv2d(x, s.feat_conv))
    return feat, DepthDistribution(softmax(conv2d(feat, s.logit_conv), axis=0))


def merge_bins(dist: DepthDistribution, s: DfeState) -> Tensor:
    """Pool ``r`` adjacent bins per group and renormalize to a distribution over ``D / r``."""
    if dist.num_bins % s.r or dist.num_bins != s.merge_conv.in_channels:
        raise ValueError(f"cannot merge {dist.num_bins} bins with r={s.r}")
    merged = conv2d(dist.probs, s.merge_conv)
    mass = tsum(merged, axis=0, keepdims=True)
    return div(merged, broadcast_to(mass, merged.shape))


def depth_prototypes(feat: Tensor, merged: Tensor) -> Tensor:
    """One feature vector per merged bin: the probability-weighted mean over all pixels (D' x C).

    Bins with zero total mass give zero vectors.
    """
    if feat.ndim != 3 or merged.ndim != 3 or feat.shape[1:] != merged.shape[1:]:
        raise ShapeError(f"depth_prototypes: features {feat.shape} vs distribution {merged.shape}")
    c, h, w = feat.shape
    d = merged.shape[0]
    weights = reshape(merged, (d, h * w))
    pooled = matmul(weights, transpose(reshape(feat, (c, h * w))))
    mass = tsum(weights, axis=1, keepdims=True)
    safe = add(mass, Tensor((mass.data == 0).astype(mass.data.dtype)))
    return div(pooled, broadcast_to(safe, pooled.shape))


def reconstruct(merged: Tensor, prototypes: Tensor) -> Tensor:
    """Per-pixel mixture of prototypes under the merged distribution (C x H x W)."""
    d, h, w = merged.shape
    if prototypes.ndim != 2 or prototypes.shape[0] != d:
        raise ShapeError(f"reconstruct: prototypes {prototypes.shape} vs distribution {merged.shape}")
    c = prototypes.shape[1]
    return reshape(matmul(transpose(prototypes), reshape(merged, (d, h * w))), (c, h, w))


def enhance(feat: Tensor, recon: Tensor, s: DfeState) -> Tensor:
    if feat.shape != recon.shape:
        raise ShapeError(f"enhance: {feat.shape} vs {recon.shape}")
    return conv2d(concat([feat, recon], axis=0), s.fuse_conv)


def dfe_forward(x: Tensor, s: DfeState):
    """Full module: returns ``(depth_aware_features, depth_distribution)``."""
    feat, dist = predict_depth(x, s)
    merged = merge_bins(dist, s)
    recon = reconstruct(merged, depth_prototypes(feat, merged))
    return enhance(feat, recon, s), dist
