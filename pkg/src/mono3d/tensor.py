"""Dense tensors with reverse-mode differentiation, backed by numpy arrays.

Every op returns a freshly allocated tensor. When any input tracks gradients
the result records its parents and a closure mapping the output gradient to
input gradients; ``Tensor.backward`` walks that graph in reverse topological
order and accumulates into leaf ``grad`` buffers.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterator, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Conv2dParams",
    "NonFiniteError",
    "ShapeError",
    "GradcheckReport",
    "make_rng",
    "uniform_init",
    "precision",
    "finite_checks",
    "get_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "exp",
    "log",
    "elu",
    "relu",
    "sigmoid",
    "log_sigmoid",
    "power",
    "smooth_l1",
    "tsum",
    "mean",
    "matmul",
    "softmax",
    "reshape",
    "transpose",
    "concat",
    "broadcast_to",
    "conv2d",
    "gradcheck",
    "save_tensor",
    "load_tensor",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


class ShapeError(ValueError):
    pass


_state = {"dtype": np.float64, "check_finite": True}


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the default float width (64 for checks, 32 for benchmarks)."""
    if bits not in (32, 64):
        raise ValueError(f"unsupported precision: {bits}")
    prev = _state["dtype"]
    _state["dtype"] = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    prev = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = prev


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Seeded generator; distinct ``stream`` ids give independent sequences."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


Scalar = Union[int, float]
_Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        _parents: tuple = (),
        _backward: Optional[_Backward] = None,
        op: str = "leaf",
    ):
        arr = np.array(data, dtype=get_dtype()) if not isinstance(data, np.ndarray) else data
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.grad = np.zeros_like(arr) if (requires_grad and _backward is None) else None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, shape, requires_grad=False) -> "Tensor":
        return cls(np.zeros(shape, dtype=get_dtype()), requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False) -> "Tensor":
        return cls(np.ones(shape, dtype=get_dtype()), requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- autodiff ---------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf reachable from ``self``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple, backward: _Backward, op: str) -> Tensor:
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    tracked = any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data, op=op)
    return Tensor(data, True, _parents=parents, _backward=backward, op=op)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ----------------------------------------------------------------


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _make(a.data + b, (a,), lambda g: (g,), "add")
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return _make(a.data - b, (a,), lambda g: (g,), "sub")
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(a: Tensor, s: Scalar) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def elu(a: Tensor) -> Tensor:
    ad = a.data
    neg_part = np.expm1(np.minimum(ad, 0.0))
    out = np.where(ad > 0, ad, neg_part)
    return _make(out, (a,), lambda g: (g * np.where(ad > 0, 1.0, neg_part + 1.0),), "elu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    ad = a.data
    out = np.minimum(ad, 0.0) - np.log1p(np.exp(-np.abs(ad)))
    slope = _sigmoid_np(-ad)
    return _make(out, (a,), lambda g: (g * slope,), "log_sigmoid")


def power(a: Tensor, p: Scalar) -> Tensor:
    ad = a.data
    if p < 1 and np.any(ad <= 0):
        raise ValueError("power: exponent < 1 needs strictly positive inputs")
    out = ad**p
    return _make(out, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 / beta inside |x| < beta, |x| - beta / 2 outside."""
    ad = a.data
    small = np.abs(ad) < beta
    out = np.where(small, 0.5 * ad * ad / beta, np.abs(ad) - 0.5 * beta)
    slope = np.where(small, ad / beta, np.sign(ad))
    return _make(out, (a,), lambda g: (g * slope,), "smooth_l1")


# -- reductions -----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


# -- linear algebra -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    if not -ad.ndim <= axis < ad.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    shifted = ad - np.max(ad, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), back, "softmax")


# -- layout ----------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def getitem(a: Tensor, index) -> Tensor:
    src_shape, dtype = a.shape, a.data.dtype

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), back, "getitem")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the only non-scalar broadcasting the library performs."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {src} -> {shape}") from exc
    lead = len(shape) - len(src)
    expanded = tuple(i for i, s in enumerate(src) if s == 1 and shape[lead + i] != 1)

    def back(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if expanded:
            g = g.sum(axis=expanded, keepdims=True)
        return (g,)

    return _make(out, (a,), back, "broadcast_to")


# -- convolution -------------------------------------------------------------------


def uniform_init(rng: np.random.Generator, shape, fan_in: int, requires_grad: bool = True) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(get_dtype()), requires_grad)


@dataclass
class Conv2dParams:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    weight: Tensor
    bias: Optional[Tensor] = None
    groups: int = 1
    padding: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        expected = (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)
        if self.weight.shape != expected:
            raise ShapeError(f"conv weight shape {self.weight.shape}, expected {expected}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"conv bias shape {self.bias.shape}, expected ({self.out_channels},)")

    @classmethod
    def create(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        *,
        groups: int = 1,
        padding: int = 0,
        stride: int = 1,
        bias: bool = True,
    ) -> "Conv2dParams":
        fan_in = (in_channels // groups) * kernel * kernel
        w = uniform_init(rng, (out_channels, in_channels // groups, kernel, kernel), fan_in)
        b = uniform_init(rng, (out_channels,), fan_in) if bias else None
        return cls(in_channels, out_channels, kernel, kernel, w, b, groups, padding, stride)

    def parameters(self) -> list:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Direct (shift-and-multiply) 2-D convolution of a single C x H x W map."""
    if x.ndim != 3 or x.shape[0] != p.in_channels:
        raise ShapeError(f"conv2d: input {x.shape} does not match in_channels={p.in_channels}")
    _, h, w = x.shape
    kh, kw, s, pad, g = p.kernel_h, p.kernel_w, p.stride, p.padding, p.groups
    span_h, span_w = h + 2 * pad - kh, w + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % s or span_w % s:
        raise ShapeError(f"conv2d: output size not integral for input {x.shape}, kernel {kh}x{kw}, stride {s}")
    ho, wo = span_h // s + 1, span_w // s + 1
    cin_g, cout_g = p.in_channels // g, p.out_channels // g

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xg = xp.reshape(g, cin_g, xp.shape[1], xp.shape[2])
    wg = p.weight.data.reshape(g, cout_g, cin_g, kh, kw)

    def window(i, j):
        return xg[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s].reshape(g, cin_g, ho * wo)

    out = np.zeros((g, cout_g, ho * wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += wg[:, :, :, i, j] @ window(i, j)
    out = out.reshape(p.out_channels, ho, wo)
    if p.bias is not None:
        out = out + p.bias.data[:, None, None]

    def back(grad):
        gout = grad.reshape(g, cout_g, ho * wo)
        dxp = np.zeros_like(xg)
        dw = np.zeros_like(wg)
        for i in range(kh):
            for j in range(kw):
                dw[:, :, :, i, j] = gout @ window(i, j).transpose(0, 2, 1)
                dpatch = (wg[:, :, :, i, j].transpose(0, 2, 1) @ gout).reshape(g, cin_g, ho, wo)
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dpatch
        dx = dxp.reshape(xp.shape)
        if pad:
            dx = dx[:, pad : pad + h, pad : pad + w]
        grads = [dx, dw.reshape(p.weight.shape)]
        if p.bias is not None:
            grads.append(grad.sum(axis=(1, 2)))
        return grads

    parents = (x, p.weight) + ((p.bias,) if p.bias is not None else ())
    return _make(out, parents, back, "conv2d")


# -- gradient checking ---------------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_input: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    checked: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error < self.tol


def _scalar_output(fn, wrt) -> Tensor:
    out = fn(*wrt)
    return out if out.size == 1 else tsum(out)


def gradcheck(
    fn: Callable[..., Tensor],
    wrt: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-6,
    tol: float = 1e-4,
    *,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-5,
) -> GradcheckReport:
    """Compare analytic gradients of ``fn(*wrt)`` with central differences.

    Non-scalar outputs are summed. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords`` only a random
    subset of each tensor's coordinates is perturbed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    wrt = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    for t in wrt:
        if not t.requires_grad:
            raise ValueError("gradcheck inputs must have requires_grad=True")
        t.zero_grad()
    loss = _scalar_output(fn, wrt)
    loss.backward()
    analytic = [t.grad.copy() for t in wrt]

    report = GradcheckReport(max_rel_error=0.0, tol=tol)
    rng = rng if rng is not None else make_rng(0)
    for k, (t, grad) in enumerate(zip(wrt, analytic)):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = _scalar_output(fn, wrt).item()
            flat[c] = orig - eps
            down = _scalar_output(fn, wrt).item()
            flat[c] = orig
            numeric = (up - down) / (2 * eps)
            a = grad.reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst:
                worst = err
            if err >= tol:
                report.failures.append((k, int(c), float(a), float(numeric), float(err)))
        report.per_input.append(worst)
        report.checked += len(coords)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


# -- binary fixture format ----------------------------------------------------------------

_MAGIC = b"TNSR"


def save_tensor(dest: Union[str, BinaryIO], t: Union[Tensor, np.ndarray]) -> None:
    """Write ``TNSR | u32 rank | u64 dims... | f64 row-major data``, little-endian."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
    payload = _MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes()
    if isinstance(dest, str):
        with open(dest, "wb") as fh:
            fh.write(payload)
    else:
        dest.write(payload)


def load_tensor(src: Union[str, BinaryIO, bytes]) -> Tensor:
    if isinstance(src, bytes):
        raw = src
    elif isinstance(src, str):
        with open(src, "rb") as fh:
            raw = fh.read()
    else:
        raw = src.read()
    if raw[:4] != _MAGIC or len(raw) < 8:
        raise ValueError("not a TNSR tensor file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    header = 8 + 8 * rank
    if len(raw) < header:
        raise ValueError("truncated TNSR header")
    dims = struct.unpack_from(f"<{rank}Q", raw, 8)
    if any(d <= 0 for d in dims):
        raise ValueError(f"TNSR dims must be positive, got {dims}")
    count = int(np.prod(dims)) if rank else 1
    if len(raw) != header + 8 * count:
        raise ValueError(f"TNSR payload holds {(len(raw) - header) // 8} values, header says {count}")
    data = np.frombuffer(raw, dtype="<f8", offset=header, count=count).astype(np.float64).reshape(dims)
    return Tensor(data)
