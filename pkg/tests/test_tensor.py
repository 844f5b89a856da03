import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mono3d import tensor as T
from mono3d.gradsuite import CHECKS, run_check
from mono3d.tensor import Conv2dParams, NonFiniteError, ShapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_elu_values():
    assert T.elu(Tensor(0.0)).item() == 0.0
    assert T.elu(Tensor(-20.0)).item() == pytest.approx(-1 + math.exp(-20), abs=1e-15)
    assert T.elu(Tensor(-20.0)).item() == pytest.approx(-0.99999999794, abs=1e-11)
    assert T.elu(Tensor(3.0)).item() == 3.0


def test_add_and_shape_mismatch():
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4, 6])
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), 1.5).data, [2.5, 3.5])
    with pytest.raises(ShapeError):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        T.log(Tensor([1.0, 0.0]))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.exp(Tensor([1000.0]))
    with T.finite_checks(False), np.errstate(over="ignore"):
        assert np.isinf(T.exp(Tensor([1000.0])).data[0])


def test_matmul_examples():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data[0, 0] == 11
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_5x7x3():
    rng = T.make_rng(3)
    a, b = leaf(rng.standard_normal((5, 7))), leaf(rng.standard_normal((7, 3)))
    rep = T.gradcheck(T.matmul, [a, b], eps=1e-6, tol=1e-6)
    assert rep.passed, rep.failures[:3]


def test_matmul_backward_formula():
    rng = T.make_rng(4)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    T.tsum(T.mul(T.matmul(a, b), Tensor(g))).backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-14)


def test_softmax_examples():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert out[0] == pytest.approx(1.0) and out[1] < 1e-300 + 1e-12
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=5e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)), st.integers(0, 1))
def test_softmax_slices_sum_to_one(x, axis):
    out = T.softmax(Tensor(x), axis=axis).data
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)
    assert np.all(out >= 0)


def test_conv_identity_and_ones():
    x = Tensor(T.make_rng(0).standard_normal((3, 4, 5)))
    ident = Conv2dParams(3, 3, 1, 1, Tensor(np.eye(3).reshape(3, 3, 1, 1)))
    np.testing.assert_array_equal(T.conv2d(x, ident).data, x.data)
    ones = Conv2dParams(1, 1, 3, 3, Tensor(np.ones((1, 1, 3, 3))), padding=1)
    out = T.conv2d(Tensor(np.full((1, 5, 6), 2.5)), ones).data
    np.testing.assert_allclose(out[0, 1:-1, 1:-1], 9 * 2.5)
    assert out[0, 0, 0] == pytest.approx(4 * 2.5)


def _conv_loops(x, w, b, stride, pad, groups):
    """Direct scalar-loop reference."""
    cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    opg = cout // groups
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        g = o // opg
        for i in range(ho):
            for j in range(wo):
                acc = b[o] if b is not None else 0.0
                for c in range(cpg):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[g * cpg + c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


@pytest.mark.parametrize("groups,stride,pad", [(1, 1, 1), (2, 1, 0), (4, 2, 1), (1, 2, 2)])
def test_conv_matches_loop_oracle(groups, stride, pad):
    rng = T.make_rng(groups * 10 + stride)
    p = Conv2dParams.create(4, 8, 3, rng, groups=groups, padding=pad, stride=stride)
    x = rng.standard_normal((4, 7, 7))
    got = T.conv2d(Tensor(x), p).data
    np.testing.assert_allclose(got, _conv_loops(x, p.weight.data, p.bias.data, stride, pad, groups), atol=1e-12)


def test_grouped_conv_equals_independent_convs():
    rng = T.make_rng(9)
    p = Conv2dParams.create(6, 4, 3, rng, groups=2, padding=1)
    x = rng.standard_normal((6, 5, 5))
    parts = []
    for g in range(2):
        sub = Conv2dParams(3, 2, 3, 3, Tensor(p.weight.data[2 * g : 2 * g + 2]), Tensor(p.bias.data[2 * g : 2 * g + 2]), padding=1)
        parts.append(T.conv2d(Tensor(x[3 * g : 3 * g + 3]), sub).data)
    np.testing.assert_allclose(T.conv2d(Tensor(x), p).data, np.concatenate(parts), atol=1e-13)
    # block-diagonal dense weights reproduce the grouped result
    dense = np.zeros((4, 6, 3, 3))
    dense[:2, :3] = p.weight.data[:2]
    dense[2:, 3:] = p.weight.data[2:]
    full = Conv2dParams(6, 4, 3, 3, Tensor(dense), Tensor(p.bias.data), padding=1)
    np.testing.assert_allclose(T.conv2d(Tensor(x), full).data, np.concatenate(parts), atol=1e-13)


def test_conv_validation():
    rng = T.make_rng(0)
    with pytest.raises(ValueError):
        Conv2dParams.create(3, 4, 3, rng, groups=2)
    p = Conv2dParams.create(2, 2, 3, rng, stride=2)
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((2, 6, 6))), p)  # (6 - 3) / 2 is not integral
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((3, 5, 5))), p)


def test_layout_round_trips():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4))
    np.testing.assert_array_equal(T.reshape(T.reshape(x, (6, 4)), (2, 3, 4)).data, x.data)
    np.testing.assert_array_equal(T.transpose(T.transpose(x, (2, 0, 1)), (1, 2, 0)).data, x.data)
    assert T.concat([Tensor(np.ones((2, 3, 3))), Tensor(np.ones((5, 3, 3)))], axis=0).shape == (7, 3, 3)
    with pytest.raises(ShapeError):
        T.reshape(x, (5, 5))


def test_backward_examples_and_accumulation():
    x = leaf([1.0, -2.0, 3.0])
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x.zero_grad()
    T.tsum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2, -4, 6])
    T.tsum(T.mul(x, x)).backward()  # no zeroing: accumulates
    np.testing.assert_array_equal(x.grad, [4, -8, 12])
    with pytest.raises(ValueError):
        T.mul(x, x).backward()


def test_gradcheck_examples():
    x = leaf(T.make_rng(1).standard_normal((3, 4)))
    # analytic gradient is exactly 1; only round-off in the differences remains
    assert T.gradcheck(lambda a: T.tsum(a), x).max_rel_error < 1e-8
    rep = T.gradcheck(lambda a: T.tsum(T.softmax(a, axis=1)), x)
    assert rep.passed  # constant function: both gradients vanish
    with pytest.raises(ValueError):
        T.gradcheck(lambda a: T.tsum(a), x, eps=0.0)


@pytest.mark.parametrize("name", [n for n in CHECKS if n not in ("dfe", "dtr_layer", "dpe", "detection_loss")])
def test_op_gradients_over_100_seeds(name):
    res = run_check(name, seeds=100)
    assert res.passed, res.line()


def test_corrupted_backward_is_caught():
    res = run_check("mul", seeds=2, corrupt=True)
    assert not res.passed and res.max_rel_error > 1e-3


def test_precision_modes():
    with T.precision(32):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64


def test_rng_streams_reproducible_and_distinct():
    a = T.make_rng(5, stream=1).standard_normal(4)
    np.testing.assert_array_equal(a, T.make_rng(5, stream=1).standard_normal(4))
    assert not np.allclose(a, T.make_rng(5, stream=2).standard_normal(4))


def test_uniform_init_bounds():
    w = T.uniform_init(T.make_rng(0), (50, 40), fan_in=16)
    assert np.all(np.abs(w.data) <= 0.25) and w.requires_grad


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=4))
def test_tnsr_round_trip(dims):
    arr = T.make_rng(len(dims)).standard_normal(dims)
    buf = io.BytesIO()
    T.save_tensor(buf, arr)
    back = T.load_tensor(buf.getvalue()).data
    assert back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_tnsr_rejects_bad_files():
    buf = io.BytesIO()
    T.save_tensor(buf, np.ones((2, 3)))
    raw = buf.getvalue()
    for bad in (b"XXXX" + raw[4:], raw[:-8], raw + b"\0" * 8, raw[:10]):
        with pytest.raises(ValueError):
            T.load_tensor(bad)
