import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mono3d import dtr
from mono3d.dfe import DepthDistribution
from mono3d.tensor import ShapeError, Tensor, gradcheck, make_rng, mul, tsum
from oracles import attention_loop

KERNELS = [dtr.attention_vanilla, dtr.attention_linear]


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape))


@pytest.mark.parametrize("kernel", KERNELS)
def test_single_token_returns_v(kernel):
    rng = make_rng(0)
    v = _t(rng, 1, 4)
    np.testing.assert_allclose(kernel(_t(rng, 1, 4), _t(rng, 1, 4), v).data, v.data, atol=1e-15)


def test_identical_keys_give_mean_of_values():
    rng = make_rng(1)
    k = Tensor(np.tile(rng.standard_normal(4), (6, 1)))
    v = _t(rng, 6, 4)
    out = dtr.attention_vanilla(_t(rng, 3, 4), k, v).data
    np.testing.assert_allclose(out, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-14)


def test_vanilla_matches_scalar_loop():
    rng = make_rng(2)
    for _ in range(20):
        q, k, v = (rng.standard_normal((6, 4)) for _ in range(3))
        got = dtr.attention_vanilla(Tensor(q), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(got, attention_loop(q, k, v), atol=1e-12, rtol=0)


def test_linear_pre_aggregated_equals_explicit():
    rng = make_rng(3)
    for _ in range(50):
        n, m, c = (int(x) for x in rng.integers(1, 12, size=3))
        q, k, v = _t(rng, n, c), _t(rng, m, c), _t(rng, m, c)
        a = dtr.attention_linear(q, k, v).data
        b = dtr.attention_linear_explicit(q, k, v).data
        np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**32 - 1), st.sampled_from([0, 1]))
def test_outputs_stay_in_value_hull(n, m, c, seed, which):
    rng = np.random.default_rng(seed)
    q, k = rng.standard_normal((n, c)) * 3, rng.standard_normal((m, c)) * 3
    v = rng.uniform(0, 1, size=(m, c))
    out = KERNELS[which](Tensor(q), Tensor(k), Tensor(v)).data
    assert np.all(out >= v.min(axis=0) - 1e-12) and np.all(out <= v.max(axis=0) + 1e-12)


def test_vanilla_permutation_equivariance():
    rng = make_rng(4)
    q, k, v = (rng.standard_normal((7, 3)) for _ in range(3))
    base = dtr.attention_vanilla(Tensor(q), Tensor(k), Tensor(v)).data
    p = rng.permutation(7)
    np.testing.assert_allclose(dtr.attention_vanilla(Tensor(q), Tensor(k[p]), Tensor(v[p])).data, base, atol=1e-14)
    np.testing.assert_allclose(dtr.attention_vanilla(Tensor(q[p]), Tensor(k), Tensor(v)).data, base[p], atol=1e-14)


@pytest.mark.parametrize("kernel", KERNELS)
def test_kernel_shape_errors(kernel):
    rng = make_rng(5)
    with pytest.raises(ShapeError):
        kernel(_t(rng, 3, 4), _t(rng, 3, 5), _t(rng, 3, 4))
    with pytest.raises(ShapeError):
        kernel(_t(rng, 3, 4), _t(rng, 3, 4), _t(rng, 2, 4))


@pytest.mark.parametrize("kind", dtr.KINDS)
def test_single_head_identity_projection_is_the_kernel(kind):
    rng = make_rng(6)
    cfg = dtr.AttentionConfig(model_dim=4, heads=1, kind=kind)
    q, k, v = _t(rng, 5, 4), _t(rng, 3, 4), _t(rng, 3, 4)
    got = dtr.multi_head(q, k, v, cfg, dtr.MultiHeadParams.identity(4)).data
    np.testing.assert_allclose(got, dtr.KERNELS[kind](q, k, v).data, atol=1e-14)


def test_multi_head_splits_channels():
    rng = make_rng(7)
    cfg = dtr.AttentionConfig(model_dim=6, heads=3, kind="vanilla")
    q, k, v = _t(rng, 4, 6), _t(rng, 5, 6), _t(rng, 5, 6)
    got = dtr.multi_head(q, k, v, cfg, dtr.MultiHeadParams.identity(6)).data
    for h in range(3):
        cols = slice(2 * h, 2 * h + 2)
        ref = attention_loop(q.data[:, cols], k.data[:, cols], v.data[:, cols])
        np.testing.assert_allclose(got[:, cols], ref, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        dtr.AttentionConfig(model_dim=6, heads=4)
    with pytest.raises(ValueError):
        dtr.AttentionConfig(model_dim=4, kind="sparse")


def test_multi_head_gradient_two_heads():
    rng = make_rng(8)
    cfg = dtr.AttentionConfig(model_dim=4, heads=2, kind="linear")
    p = dtr.MultiHeadParams.create(4, rng)
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    w = Tensor(rng.uniform(0.5, 1.5, size=(5, 4)))
    rep = gradcheck(lambda a, *ps: tsum(mul(dtr.multi_head(a, a, a, cfg, p), w)), [x] + p.parameters(), eps=1e-5)
    assert rep.passed, rep.failures[:3]


def _dpe_state(d, c, rng):
    s = dtr.DpeState.create(d, c, rng)
    s.conv.weight.data[:] = 0
    s.conv.bias.data[:] = 0
    return s


def _onehot_dist(idx, d):
    return DepthDistribution(Tensor(np.eye(d)[idx].transpose(2, 0, 1).copy()))


def test_dpe_lookup_examples():
    rng = make_rng(9)
    s = _dpe_state(6, 4, rng)
    enc = dtr.build_dpe(_onehot_dist(np.full((3, 3), 2), 6), s).data
    np.testing.assert_array_equal(enc, np.broadcast_to(s.table.data[2][:, None, None], enc.shape))
    idx = rng.integers(0, 6, size=(3, 4))
    idx[1, 2] = 3
    enc = dtr.build_dpe(_onehot_dist(idx, 6), s).data
    np.testing.assert_array_equal(enc[:, 1, 2], s.table.data[3])


def test_dpe_locality_and_argmax_invariance():
    rng = make_rng(10)
    s = dtr.DpeState.create(5, 3, rng)
    idx = np.zeros((5, 8), dtype=int)
    idx[1:4, 0:3] = [[1, 2, 3], [4, 0, 1], [2, 2, 2]]
    idx[1:4, 5:8] = idx[1:4, 0:3]
    enc = dtr.build_dpe(_onehot_dist(idx, 5), s).data
    np.testing.assert_allclose(enc[:, 2, 1], enc[:, 2, 6], atol=1e-14)
    soft = np.eye(5)[idx].transpose(2, 0, 1) * 0.6 + 0.4 / 5
    enc2 = dtr.build_dpe(DepthDistribution(Tensor(soft)), s).data
    np.testing.assert_array_equal(enc, enc2)
    with pytest.raises(ShapeError):
        dtr.build_dpe(_onehot_dist(idx, 5), dtr.DpeState.create(4, 3, rng))


def test_dpe_ties_pick_lowest_bin():
    dist = DepthDistribution(Tensor(np.full((4, 1, 1), 0.25)))
    assert dist.argmax()[0, 0] == 0


def test_zero_layer_stacks_pass_through():
    rng = make_rng(11)
    cfg = dtr.AttentionConfig(model_dim=4, heads=2, enc_layers=0, dec_layers=0)
    ctx, dep, pe = _t(rng, 4, 2, 3), _t(rng, 4, 2, 3), _t(rng, 4, 2, 3)
    enc = dtr.encoder_forward(ctx, pe, [], cfg)
    np.testing.assert_allclose(enc.data, (ctx.data + pe.data).reshape(4, 6).T, atol=1e-15)
    out = dtr.decoder_forward(dep, enc, pe, [], cfg)
    np.testing.assert_allclose(out.data, dep.data + pe.data, atol=1e-15)


def test_cross_attention_single_context_token():
    """With one key the cross-attention block adds the same vector to every query."""
    rng = make_rng(12)
    cfg = dtr.AttentionConfig(model_dim=4, heads=2, kind="vanilla")
    p = dtr.MultiHeadParams.create(4, rng)
    queries, token = _t(rng, 6, 4), _t(rng, 1, 4)
    out = dtr.multi_head(queries, token, token, cfg, p).data
    np.testing.assert_allclose(out, np.tile(out[0], (6, 1)), atol=1e-14)


@pytest.mark.parametrize("kind", dtr.KINDS)
@pytest.mark.parametrize("layer_norm", [False, True])
def test_stack_shapes(kind, layer_norm):
    rng = make_rng(13)
    cfg = dtr.AttentionConfig(model_dim=8, heads=2, kind=kind, enc_layers=2, dec_layers=2, layer_norm=layer_norm)
    s = dtr.DtrState.create(cfg, rng)
    ctx, dep = _t(rng, 8, 3, 5), _t(rng, 8, 3, 5)
    enc = dtr.encoder_forward(ctx, None, s.encoder, cfg)
    assert enc.shape == (15, 8)
    assert dtr.dtr_forward(ctx, dep, None, s).shape == (8, 3, 5)
    with pytest.raises(ShapeError):
        dtr.encoder_forward(ctx, _t(rng, 8, 3, 4), s.encoder, cfg)
    with pytest.raises(ShapeError):
        dtr.decoder_forward(dep, _t(rng, 15, 6), None, s.decoder, cfg)


def test_one_layer_gradients():
    rng = make_rng(14)
    cfg = dtr.AttentionConfig(model_dim=4, heads=2, kind="vanilla")
    s = dtr.DtrState.create(cfg, rng)
    ctx = Tensor(rng.standard_normal((4, 2, 3)), requires_grad=True)
    dep = Tensor(rng.standard_normal((4, 2, 3)), requires_grad=True)
    w = Tensor(rng.uniform(0.5, 1.5, size=(4, 2, 3)))
    rep = gradcheck(lambda a, b, *p: tsum(mul(dtr.dtr_forward(a, b, None, s), w)), [ctx, dep] + s.parameters(), eps=1e-5)
    assert rep.passed, rep.failures[:3]


def test_bench_rows_and_validation():
    cfg = dtr.AttentionConfig(model_dim=8, heads=2)
    rows = dtr.bench_attention(cfg, [16, 32], runs=2)
    assert [(r.n, r.kind) for r in rows] == [(16, "vanilla"), (16, "linear"), (32, "vanilla"), (32, "linear")]
    assert all(r.median_ms > 0 for r in rows)
    assert rows[0].csv().count(",") == dtr.BENCH_HEADER.count(",")
    assert dtr.peak_live_elements("vanilla", 4096, 256, 8) > dtr.peak_live_elements("linear", 4096, 256, 8)
    with pytest.raises(ValueError):
        dtr.bench_attention(cfg, [32, 16])
