"""Depth-aware transformer: attention kernels, encoder/decoder stacks and the
depth positional encoding."""

from __future__ import annotations

import gc
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .dfe import DepthDistribution
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
    finite_checks,
    getitem,
    make_rng,
    matmul,
    mean,
    mul,
    power,
    precision,
    relu,
    reshape,
    scale,
    softmax,
    sub,
    transpose,
    tsum,
    uniform_init,
)

KINDS = ("vanilla", "linear")
LINEAR_EPS = 1e-9


@dataclass
class AttentionConfig:
    model_dim: int = 32
    heads: int = 1
    kind: str = "linear"
    ffn_dim: Optional[int] = None
    enc_layers: int = 1
    dec_layers: int = 1
    layer_norm: bool = False

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.model_dim


# -- kernels ------------------------------------------------------------------------


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention operands must be 2-D (tokens x channels)")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} are incompatible")


def attention_vanilla(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(C)) V."""
    _check_qkv(q, k, v)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return matmul(softmax(scores, axis=1), v)


def feature_map(x: Tensor) -> Tensor:
    return add(elu(x), 1.0)


def _guard(den: Tensor) -> Tensor:
    """Lift denominators that underflowed below ``LINEAR_EPS``; others pass unchanged so outputs stay convex."""
    lift = np.where(den.data < LINEAR_EPS, LINEAR_EPS, 0.0).astype(den.data.dtype)
    return add(den, Tensor(lift))


def attention_linear(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Kernelized attention with phi(x) = elu(x) + 1, aggregated over keys first (linear in N)."""
    _check_qkv(q, k, v)
    fq, fk = feature_map(q), feature_map(k)
    kv = matmul(transpose(fk), v)  # C x Cv
    k_sum = tsum(fk, axis=0, keepdims=True)  # 1 x C
    num = matmul(fq, kv)
    den = _guard(matmul(fq, transpose(k_sum)))  # N x 1
    return div(num, broadcast_to(den, num.shape))


def attention_linear_explicit(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Same kernel as :func:`attention_linear` through the full N x N weight matrix."""
    _check_qkv(q, k, v)
    weights = matmul(feature_map(q), transpose(feature_map(k)))
    norm = _guard(tsum(weights, axis=1, keepdims=True))
    return matmul(div(weights, broadcast_to(norm, weights.shape)), v)


KERNELS = {"vanilla": attention_vanilla, "linear": attention_linear}


# -- learned layers -------------------------------------------------------------------


@dataclass
class Linear:
    weight: Tensor  # in x out
    bias: Tensor  # out

    @classmethod
    def create(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "Linear":
        return cls(uniform_init(rng, (d_in, d_out), d_in), uniform_init(rng, (d_out,), d_in))

    @classmethod
    def identity(cls, dim: int) -> "Linear":
        return cls(Tensor(np.eye(dim), True), Tensor(np.zeros(dim), True))

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, broadcast_to(self.bias, y.shape))

    def parameters(self) -> list:
        return [self.weight, self.bias]


@dataclass
class MultiHeadParams:
    q: Linear
    k: Linear
    v: Linear
    out: Linear

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator) -> "MultiHeadParams":
        return cls(*(Linear.create(dim, dim, rng) for _ in range(4)))

    @classmethod
    def identity(cls, dim: int) -> "MultiHeadParams":
        return cls(*(Linear.identity(dim) for _ in range(4)))

    def parameters(self) -> list:
        return self.q.parameters() + self.k.parameters() + self.v.parameters() + self.out.parameters()


def multi_head(q_in: Tensor, k_in: Tensor, v_in: Tensor, cfg: AttentionConfig, p: MultiHeadParams) -> Tensor:
    """Project, split channels into ``cfg.heads`` groups, attend per head, concat, project out."""
    if q_in.shape[1] != cfg.model_dim or k_in.shape[1] != cfg.model_dim:
        raise ShapeError(f"multi_head: expected {cfg.model_dim} channels")
    kernel = KERNELS[cfg.kind]
    q, k, v = p.q(q_in), p.k(k_in), p.v(v_in)
    if cfg.heads == 1:
        return p.out(kernel(q, k, v))
    dh = cfg.model_dim // cfg.heads
    heads = []
    for i in range(cfg.heads):
        cols = (slice(None), slice(i * dh, (i + 1) * dh))
        heads.append(kernel(getitem(q, cols), getitem(k, cols), getitem(v, cols)))
    return p.out(concat(heads, axis=1))


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = broadcast_to(mean(x, axis=1, keepdims=True), x.shape)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return mul(centered, broadcast_to(inv, x.shape))


@dataclass
class FeedForward:
    up: Linear
    down: Linear

    @classmethod
    def create(cls, dim: int, hidden: int, rng: np.random.Generator) -> "FeedForward":
        return cls(Linear.create(dim, hidden, rng), Linear.create(hidden, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(relu(self.up(x)))

    def parameters(self) -> list:
        return self.up.parameters() + self.down.parameters()


@dataclass
class EncoderLayer:
    attn: MultiHeadParams
    ffn: FeedForward

    def parameters(self) -> list:
        return self.attn.parameters() + self.ffn.parameters()


@dataclass
class DecoderLayer:
    self_attn: MultiHeadParams
    cross_attn: MultiHeadParams
    ffn: FeedForward

    def parameters(self) -> list:
        return self.self_attn.parameters() + self.cross_attn.parameters() + self.ffn.parameters()


def _residual(x: Tensor, update: Tensor, cfg: AttentionConfig) -> Tensor:
    y = add(x, update)
    return layer_norm(y) if cfg.layer_norm else y


def flatten_tokens(x: Tensor) -> Tensor:
    """C x H x W -> (H*W) x C, row-major over pixels."""
    c, h, w = x.shape
    return transpose(reshape(x, (c, h * w)))


def unflatten_tokens(tokens: Tensor, h: int, w: int) -> Tensor:
    n, c = tokens.shape
    if n != h * w:
        raise ShapeError(f"cannot fold {n} tokens into {h}x{w}")
    return reshape(transpose(tokens), (c, h, w))


def encoder_forward(
    context: Tensor, dpe: Optional[Tensor], layers: Sequence[EncoderLayer], cfg: AttentionConfig
) -> Tensor:
    """Encode context features as ``N x C`` tokens, with the positional encoding added once at input."""
    if dpe is not None and dpe.shape != context.shape:
        raise ShapeError(f"encoder: context {context.shape} vs encoding {dpe.shape}")
    x = flatten_tokens(context if dpe is None else add(context, dpe))
    for layer in layers:
        x = _residual(x, multi_head(x, x, x, cfg, layer.attn), cfg)
        x = _residual(x, layer.ffn(x), cfg)
    return x


def decoder_forward(
    depth_feat: Tensor,
    encoded: Tensor,
    dpe: Optional[Tensor],
    layers: Sequence[DecoderLayer],
    cfg: AttentionConfig,
) -> Tensor:
    """Depth-aware features act as queries over the encoded context; returns C x H x W."""
    if dpe is not None and dpe.shape != depth_feat.shape:
        raise ShapeError(f"decoder: depth features {depth_feat.shape} vs encoding {dpe.shape}")
    if encoded.ndim != 2 or encoded.shape[1] != depth_feat.shape[0]:
        raise ShapeError(f"decoder: encoded tokens {encoded.shape} vs {depth_feat.shape[0]} channels")
    _, h, w = depth_feat.shape
    x = flatten_tokens(depth_feat if dpe is None else add(depth_feat, dpe))
    for layer in layers:
        x = _residual(x, multi_head(x, x, x, cfg, layer.self_attn), cfg)
        x = _residual(x, multi_head(x, encoded, encoded, cfg, layer.cross_attn), cfg)
        x = _residual(x, layer.ffn(x), cfg)
    return unflatten_tokens(x, h, w)


# -- depth positional encoding ----------------------------------------------------------


@dataclass
class DpeState:
    table: Tensor  # D x C, one learnable encoding per depth bin
    conv: Conv2dParams  # C -> C, 3x3 pad 1

    @classmethod
    def create(cls, num_bins: int, channels: int, rng: np.random.Generator) -> "DpeState":
        return cls(
            uniform_init(rng, (num_bins, channels), channels),
            Conv2dParams.create(channels, channels, 3, rng, padding=1),
        )

    def parameters(self) -> list:
        return [self.table] + self.conv.parameters()


def build_dpe(dist: DepthDistribution, s: DpeState) -> Tensor:
    """Look up each pixel's argmax-bin encoding and add a 3x3 convolution of the looked-up map."""
    d, h, w = dist.probs.shape
    if d != s.table.shape[0]:
        raise ShapeError(f"DPE table has {s.table.shape[0]} bins, distribution has {d}")
    idx = dist.argmax().reshape(-1)
    lookup = getitem(s.table, idx)  # (H*W) x C
    enc = unflatten_tokens(lookup, h, w)
    return add(enc, conv2d(enc, s.conv))


# -- whole module -------------------------------------------------------------------------


@dataclass
class DtrState:
    cfg: AttentionConfig
    encoder: List[EncoderLayer] = field(default_factory=list)
    decoder: List[DecoderLayer] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "DtrState":
        c, f = cfg.model_dim, cfg.ffn_dim
        enc = [
            EncoderLayer(MultiHeadParams.create(c, rng), FeedForward.create(c, f, rng)) for _ in range(cfg.enc_layers)
        ]
        dec = [
            DecoderLayer(MultiHeadParams.create(c, rng), MultiHeadParams.create(c, rng), FeedForward.create(c, f, rng))
            for _ in range(cfg.dec_layers)
        ]
        return cls(cfg, enc, dec)

    def parameters(self) -> list:
        out = []
        for layer in list(self.encoder) + list(self.decoder):
            out += layer.parameters()
        return out


def dtr_forward(context: Tensor, depth_feat: Tensor, dpe: Optional[Tensor], s: DtrState) -> Tensor:
    encoded = encoder_forward(context, dpe, s.encoder, s.cfg)
    return decoder_forward(depth_feat, encoded, dpe, s.decoder, s.cfg)


# -- benchmark ---------------------------------------------------------------------------------


@dataclass
class BenchRow:
    n: int
    kind: str
    median_ms: float
    runs: int
    seed: int
    peak_elements: int

    def csv(self) -> str:
        return f"{self.n},{self.kind},{self.median_ms:.3f},{self.runs},{self.seed}"


BENCH_HEADER = "N,kind,median_ms,runs,seed"


def peak_live_elements(kind: str, n: int, dim: int, heads: int) -> int:
    """Largest set of simultaneously live intermediate elements for one attention call."""
    dh = dim // heads
    inputs = 3 * n * dim
    if kind == "vanilla":
        return inputs + 2 * n * n + n * dh  # scores and probabilities of one head
    return inputs + 2 * n * dh + dh * dh + n * dh  # features, K-V summary, output


def _time_kernel(kernel, heads, runs: int) -> float:
    """Median wall time in ms of ``runs`` passes over all heads, after one warm-up pass."""
    for h in heads:  # warm-up: page in every buffer once
        kernel(*h)
    times = []
    gc_was_enabled = gc.isenabled()
    gc.disable()  # keep collector pauses out of the timed region
    try:
        for _ in range(runs):
            t0 = time.perf_counter()
            for h in heads:
                kernel(*h)
            times.append((time.perf_counter() - t0) * 1e3)
    finally:
        if gc_was_enabled:
            gc.enable()
    return float(np.median(times))


def bench_attention(cfg: AttentionConfig, sizes: Sequence[int], seed: int = 0, runs: int = 5, bits: int = 32):
    """Time the raw multi-head attention kernel for both kinds at each token count.

    Inputs are drawn deterministically from ``seed``; each entry is the median
    wall time of ``runs`` calls (forward only, no gradient tracking). All sizes
    of one kind are timed before the next kind so that the large score buffers
    of vanilla attention do not disturb the allocator state seen by linear
    attention. Rows come back ordered by size, then kind.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    if runs < 1:
        raise ValueError("need at least one run")
    dh = cfg.model_dim // cfg.heads
    timings = {}
    with precision(bits), finite_checks(False):
        dtype = np.float64 if bits == 64 else np.float32
        for kind in KINDS:
            for n in sizes:
                rng = make_rng(seed, stream=n)
                q, k, v = (rng.standard_normal((n, cfg.model_dim)).astype(dtype) for _ in range(3))
                heads = [
                    tuple(Tensor(m[:, i * dh : (i + 1) * dh].copy()) for m in (q, k, v)) for i in range(cfg.heads)
                ]
                timings[n, kind] = _time_kernel(KERNELS[kind], heads, runs)
    return [
        BenchRow(n, kind, timings[n, kind], runs, seed, peak_live_elements(kind, n, cfg.model_dim, cfg.heads))
        for n in sizes
        for kind in KINDS
    ]
