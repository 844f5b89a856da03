"""Named finite-difference checks for every differentiable op and composite module."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import detect, dtr
from .depthbin import DepthTargetMap, depth_focal_loss
from .dfe import DepthDistribution, DfeState, dfe_forward
from .tensor import (
    Conv2dParams,
    Tensor,
    _make,
    add,
    broadcast_to,
    concat,
    conv2d,
    div,
    elu,
    exp,
    getitem,
    gradcheck,
    log,
    log_sigmoid,
    matmul,
    mean,
    mul,
    neg,
    power,
    precision,
    relu,
    reshape,
    scale,
    sigmoid,
    smooth_l1,
    softmax,
    sub,
    transpose,
    tsum,
    make_rng,
)

Builder = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], List[Tensor]]]


def _leaf(rng, shape, low=-2.0, high=2.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from(rng, shape, kinks: Sequence[float], margin: float = 1e-2) -> Tensor:
    """Random values at least ``margin`` from every kink, so central differences never straddle one."""
    x = rng.uniform(-2.0, 2.0, size=shape)
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + np.where(x[close] >= k, margin, -margin) * 2
    return Tensor(x, requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """Contract with fixed random weights so every output coordinate matters."""
    w = Tensor(rng.uniform(0.5, 1.5, size=out.shape))
    return tsum(mul(out, w))


def _unary(op, low=-2.0, high=2.0, shape=(3, 4)) -> Builder:
    def build(rng):
        x = _leaf(rng, shape, low, high)
        return (lambda a: op(a)), [x]

    return build


def _binary(op, b_low=-2.0, b_high=2.0) -> Builder:
    def build(rng):
        return op, [_leaf(rng, (3, 4)), _leaf(rng, (3, 4), b_low, b_high)]

    return build


def _b_relu(rng):
    return relu, [_away_from(rng, (4, 5), [0.0])]


def _b_smooth_l1(rng):
    return smooth_l1, [_away_from(rng, (4, 5), [-1.0, 1.0])]


def _b_div(rng):
    b = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    return div, [_leaf(rng, (3, 4)), Tensor(b, requires_grad=True)]


def _b_softmax(rng):
    w = Tensor(rng.uniform(-1, 1, size=(4, 5)))
    axis = int(rng.integers(0, 2))
    return (lambda a: tsum(mul(softmax(a, axis=axis), w))), [_leaf(rng, (4, 5))]


def _b_matmul(rng):
    return matmul, [_leaf(rng, (3, 4)), _leaf(rng, (4, 2))]


def _b_layout(rng):
    x = _leaf(rng, (2, 3, 4))
    w = rng.uniform(0.5, 1.5, size=(4, 6))

    def fn(a):
        t = transpose(a, (2, 0, 1))
        return tsum(mul(reshape(t, (4, 6)), Tensor(w)))

    return fn, [x]


def _b_concat(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (4, 3))
    w = rng.uniform(0.5, 1.5, size=(6, 3))
    return (lambda x, y: tsum(mul(concat([x, y], axis=0), Tensor(w)))), [a, b]


def _b_getitem(rng):
    x = _leaf(rng, (5, 4))
    idx = rng.integers(0, 5, size=7)  # repeats exercise gradient accumulation
    w = rng.uniform(0.5, 1.5, size=(7, 4))
    return (lambda a: tsum(mul(getitem(a, idx), Tensor(w)))), [x]


def _b_broadcast(rng):
    x = _leaf(rng, (3, 1))
    w = rng.uniform(0.5, 1.5, size=(3, 4))
    return (lambda a: tsum(mul(broadcast_to(a, (3, 4)), Tensor(w)))), [x]


def _b_reductions(rng):
    x = _leaf(rng, (3, 4))
    w = rng.uniform(0.5, 1.5, size=(4,))
    return (lambda a: add(tsum(mul(mean(a, axis=0), Tensor(w))), tsum(a, axis=None))), [x]


def _b_power(rng):
    p = float(rng.choice([-1.5, 0.5, 2.0, 3.0]))
    return (lambda a: power(a, p)), [_leaf(rng, (3, 4), 0.5, 2.0)]


def _b_conv(rng):
    groups = int(rng.choice([1, 2]))
    stride = int(rng.choice([1, 2]))
    p = Conv2dParams.create(4, 4, 3, rng, groups=groups, padding=1, stride=stride)
    x = _leaf(rng, (4, 5, 5))
    return (lambda a, w, b: _weighted(conv2d(a, p), np.random.default_rng(0))), [x, p.weight, p.bias]


def _b_attention(kind) -> Builder:
    def build(rng):
        n, m, c = 5, 4, 3
        q, k, v = _leaf(rng, (n, c)), _leaf(rng, (m, c)), _leaf(rng, (m, c))
        kernel = dtr.KERNELS[kind]
        return (lambda a, b, d: _weighted(kernel(a, b, d), np.random.default_rng(1))), [q, k, v]

    return build


def _b_layer_norm(rng):
    return (lambda a: _weighted(dtr.layer_norm(a), np.random.default_rng(2))), [_leaf(rng, (4, 6))]


def _b_depth_loss(rng):
    d, h, w = 6, 3, 4
    logits = _leaf(rng, (d, h, w))
    bins = rng.integers(-1, d, size=(h, w))
    bins[0, 0] = 1
    target = DepthTargetMap(bins, d)
    return (lambda a: depth_focal_loss(softmax(a, axis=0), target)), [logits]


TOY = dict(C=32, H=12, W=12, D=24, r=4)


def _b_dfe(rng):
    s = DfeState.create(TOY["C"], TOY["D"], TOY["r"], rng)
    x = _leaf(rng, (TOY["C"], TOY["H"], TOY["W"]), -1.0, 1.0)

    def fn(inp, *params):
        out, dist = dfe_forward(inp, s)
        return add(_weighted(out, np.random.default_rng(3)), _weighted(dist.probs, np.random.default_rng(4)))

    return fn, [x] + s.parameters()


def _b_dtr_layer(rng):
    c, heads = TOY["C"], 2
    cfg = dtr.AttentionConfig(model_dim=c, heads=heads, kind="linear")
    s = dtr.DtrState.create(cfg, rng)
    h = w = 4  # tokens are the expensive part; channels stay at toy width
    context = _leaf(rng, (c, h, w), -1.0, 1.0)
    depth_feat = _leaf(rng, (c, h, w), -1.0, 1.0)
    dpe = _leaf(rng, (c, h, w), -0.5, 0.5)

    def fn(ctx, dep, enc, *params):
        return _weighted(dtr.dtr_forward(ctx, dep, enc, s), np.random.default_rng(5))

    return fn, [context, depth_feat, dpe] + s.parameters()


def _b_dpe(rng):
    d, c, h, w = 6, 4, 3, 3
    s = dtr.DpeState.create(d, c, rng)
    probs = Tensor(rng.dirichlet(np.ones(d), size=(h, w)).transpose(2, 0, 1).copy())
    dist = DepthDistribution(probs)
    return (lambda *params: _weighted(dtr.build_dpe(dist, s), np.random.default_rng(6))), s.parameters()


def _b_detection_loss(rng):
    """Two anchors, one ground-truth box; one anchor positive."""
    anchors = np.array(
        [
            [20, 20, 10, 10, 20, 20, 15, 1.6, 1.5, 3.9, 0.0],
            [40, 20, 10, 10, 40, 20, 15, 1.6, 1.5, 3.9, 0.0],
        ],
        dtype=np.float64,
    )
    gt = anchors[:1] + rng.uniform(-0.5, 0.5, size=(1, 11)) * np.array([4, 4, 2, 2, 4, 4, 3, 0.2, 0.2, 0.5, 1.0])
    assignment = np.array([0, -1])
    targets = np.zeros((2, detect.NUM_RESIDUALS))
    targets[0] = detect.encode_targets(gt, anchors[:1])[0]
    logits = _leaf(rng, (2, 1))
    reg = _away_from(rng, (2, detect.NUM_RESIDUALS), [])
    # keep every residual difference clear of the smooth-L1 kink at |d| = 1
    diff = reg.data - targets
    near = np.abs(np.abs(diff) - 1.0) < 1e-2
    reg.data[near] += 0.05

    def fn(lg, rg):
        return detect.detection_loss(lg, rg, targets, np.array([0]), assignment).total

    return fn, [logits, reg]


CHECKS: Dict[str, Tuple[Builder, Optional[int]]] = {
    "add": (_binary(add), None),
    "sub": (_binary(sub), None),
    "mul": (_binary(mul), None),
    "div": (_b_div, None),
    "scale": (_unary(lambda a: scale(a, -1.7)), None),
    "neg": (_unary(neg), None),
    "exp": (_unary(exp), None),
    "log": (_unary(log, 0.2, 3.0), None),
    "elu": (_unary(elu), None),
    "relu": (_b_relu, None),
    "sigmoid": (_unary(sigmoid, -6.0, 6.0), None),
    "log_sigmoid": (_unary(log_sigmoid, -6.0, 6.0), None),
    "power": (_b_power, None),
    "smooth_l1": (_b_smooth_l1, None),
    "sum_mean": (_b_reductions, None),
    "matmul": (_b_matmul, None),
    "softmax": (_b_softmax, None),
    "reshape_transpose": (_b_layout, None),
    "concat": (_b_concat, None),
    "getitem": (_b_getitem, None),
    "broadcast_to": (_b_broadcast, None),
    "conv2d": (_b_conv, 24),
    "attention_vanilla": (_b_attention("vanilla"), None),
    "attention_linear": (_b_attention("linear"), None),
    "layer_norm": (_b_layer_norm, None),
    "depth_focal_loss": (_b_depth_loss, None),
    "dpe": (_b_dpe, 12),
    "dfe": (_b_dfe, 3),
    "dtr_layer": (_b_dtr_layer, 3),
    "detection_loss": (_b_detection_loss, None),
}


def _corrupt(t: Tensor) -> Tensor:
    """Identity forward with a deliberately wrong (scaled) backward."""
    return _make(t.data.copy(), (t,), lambda g: (1.01 * g,), "corrupt")


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int
    seeds: int
    seconds: float
    passed: bool

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<20} max_rel_err={self.max_rel_error:.3e} coords={self.coords} seeds={self.seeds} {status}"


def run_check(
    name: str,
    seeds: int,
    eps: float = 1e-5,
    tol: float = 1e-4,
    base_seed: int = 0,
    corrupt: bool = False,
) -> CheckResult:
    builder, max_coords = CHECKS[name]
    worst, coords, ok = 0.0, 0, True
    t0 = time.perf_counter()
    with precision(64):
        for i in range(seeds):
            rng = make_rng(base_seed + i, stream=hash_name(name))
            fn, wrt = builder(rng)
            if corrupt:
                inner = fn
                fn = lambda *a, _f=inner: _corrupt(_f(*a))  # noqa: E731
            rep = gradcheck(fn, wrt, eps=eps, tol=tol, max_coords=max_coords, rng=rng)
            worst = max(worst, rep.max_rel_error)
            coords += rep.checked
            ok = ok and rep.passed
    return CheckResult(name, worst, coords, seeds, time.perf_counter() - t0, ok)


def hash_name(name: str) -> int:
    """Stable small integer per check name (Python's ``hash`` is salted per process)."""
    return sum((i + 1) * ord(ch) for i, ch in enumerate(name)) % 100_003


def run_suite(
    seeds: int = 20,
    eps: float = 1e-5,
    tol: float = 1e-4,
    base_seed: int = 0,
    names: Optional[Sequence[str]] = None,
    corrupt: Optional[str] = None,
) -> List[CheckResult]:
    if corrupt is not None and corrupt not in CHECKS:
        raise KeyError(f"unknown check {corrupt!r}")
    selected = list(CHECKS) if names is None else list(names)
    return [run_check(n, seeds, eps, tol, base_seed, corrupt=(n == corrupt)) for n in selected]
