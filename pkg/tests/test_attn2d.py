import math

import numpy as np
import numpy.testing as npt
import pytest

from magnet import attn2d
from magnet import tensor as tz
from magnet.tensor import Tensor, named_tensors


def _gelu_np(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _softmax_rows(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _featurewise_oracle(z, p):
    """Straight-line per-pair evaluation: feature i is the N x T matrix z[:, :, i]."""
    n, t, d = z.shape
    c, lp = p.channels, p.proj_len
    wq, wk, wv = p.wq.data, p.wk.data, p.wv.data
    bq, bk, bv = p.bq.data, p.bk.data, p.bv.data
    q = [[z[:, :, i] @ wq[ch] + bq[ch] for i in range(d)] for ch in range(c)]
    k = [[z[:, :, i] @ wk[ch] + bk[ch] for i in range(d)] for ch in range(c)]
    v = [[z[:, :, i] @ wv[ch] + bv[ch] for i in range(d)] for ch in range(c)]
    alpha = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            vec = np.concatenate(
                [(q[ch][i] @ k[ch][j].T / math.sqrt(lp)).ravel() for ch in range(c)]
            )
            hidden = _gelu_np(vec @ p.fuse_w1.data + p.fuse_b1.data)
            alpha[i, j] = hidden @ p.fuse_w2.data[:, 0] + p.fuse_b2.data[0]
    attn = _softmax_rows(alpha)
    out = np.zeros((n, t, d))
    for i in range(d):
        agg = [sum(attn[i, j] * v[ch][j] for j in range(d)) for ch in range(c)]
        flat = np.stack(agg, axis=-1).reshape(n, lp * c)
        out[:, :, i] = flat @ p.out_w.data + p.out_b.data
    return attn, out


def _stockwise_oracle(z, p):
    """Mirror oracle: stock n is the T x D matrix z[n]."""
    n, t, d = z.shape
    c, lp = p.channels, p.proj_len
    wq, wk, wv = p.wq.data, p.wk.data, p.wv.data
    bq, bk, bv = p.bq.data, p.bk.data, p.bv.data
    q = [[z[i] @ wq[ch] + bq[ch] for i in range(n)] for ch in range(c)]
    k = [[z[i] @ wk[ch] + bk[ch] for i in range(n)] for ch in range(c)]
    v = [[z[i] @ wv[ch] + bv[ch] for i in range(n)] for ch in range(c)]
    alpha = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            vec = np.concatenate(
                [(q[ch][i] @ k[ch][j].T / math.sqrt(lp)).ravel() for ch in range(c)]
            )
            hidden = _gelu_np(vec @ p.fuse_w1.data + p.fuse_b1.data)
            alpha[i, j] = hidden @ p.fuse_w2.data[:, 0] + p.fuse_b2.data[0]
    attn = _softmax_rows(alpha)
    out = np.zeros((n, t, d))
    for i in range(n):
        agg = [sum(attn[i, j] * v[ch][j] for j in range(n)) for ch in range(c)]
        out[i] = np.stack(agg, axis=-1).reshape(t, lp * c) @ p.out_w.data + p.out_b.data
    return attn, out


def test_featurewise_matches_straight_line_oracle(rng):
    n, t, d, c = 2, 4, 3, 2
    p = attn2d.init_attn2d(rng, axis_len=t, pair_count=n, channels=c, fusion_hidden=8)
    z = rng.normal(size=(n, t, d))
    attn_o, out_o = _featurewise_oracle(z, p)
    attn = attn2d.featurewise_attention(Tensor(z), p).data
    out = attn2d.featurewise_2d(Tensor(z), p).data
    npt.assert_allclose(attn, attn_o, rtol=0, atol=1e-12)
    npt.assert_allclose(out, out_o, rtol=0, atol=1e-12)


def test_stockwise_matches_straight_line_oracle(rng):
    n, t, d, c = 3, 4, 4, 2
    p = attn2d.init_attn2d(rng, axis_len=d, pair_count=t, channels=c, fusion_hidden=8)
    z = rng.normal(size=(n, t, d))
    attn_o, out_o = _stockwise_oracle(z, p)
    attn = attn2d.stockwise_attention(Tensor(z), p).data
    out = attn2d.stockwise_2d(Tensor(z), p).data
    npt.assert_allclose(attn, attn_o, rtol=0, atol=1e-12)
    npt.assert_allclose(out, out_o, rtol=0, atol=1e-12)


def test_featurewise_single_feature(rng):
    n, t = 3, 4
    p = attn2d.init_attn2d(rng, axis_len=t, pair_count=n, channels=2, fusion_hidden=8)
    z = rng.normal(size=(n, t, 1))
    attn = attn2d.featurewise_attention(Tensor(z), p).data
    npt.assert_array_equal(attn, [[1.0]])
    _, out_o = _featurewise_oracle(z, p)
    npt.assert_allclose(attn2d.featurewise_2d(Tensor(z), p).data, out_o, rtol=0, atol=1e-12)


def test_stockwise_single_stock(rng):
    t, d = 4, 4
    p = attn2d.init_attn2d(rng, axis_len=d, pair_count=t, channels=2, fusion_hidden=8)
    z = rng.normal(size=(1, t, d))
    attn = attn2d.stockwise_attention(Tensor(z), p).data
    npt.assert_array_equal(attn, [[1.0]])


def test_featurewise_identical_features_identical_outputs(rng):
    n, t = 2, 4
    p = attn2d.init_attn2d(rng, axis_len=t, pair_count=n, channels=2, fusion_hidden=8)
    z = rng.normal(size=(n, t, 3))
    z[:, :, 2] = z[:, :, 0]
    attn = attn2d.featurewise_attention(Tensor(z), p).data
    npt.assert_allclose(attn[0], attn[2], rtol=0, atol=1e-12)
    out = attn2d.featurewise_2d(Tensor(z), p).data
    npt.assert_allclose(out[:, :, 0], out[:, :, 2], rtol=0, atol=1e-12)


def test_stockwise_identical_stocks_identical_outputs(rng):
    p = attn2d.init_attn2d(rng, axis_len=3, pair_count=4, channels=2, fusion_hidden=8)
    z = rng.normal(size=(3, 4, 3))
    z[1] = z[0]
    out = attn2d.stockwise_2d(Tensor(z), p).data
    npt.assert_allclose(out[0], out[1], rtol=0, atol=1e-12)


def test_attention_rows_sum_to_one(rng):
    n, t, d = 3, 5, 4
    pf = attn2d.init_attn2d(rng, axis_len=t, pair_count=n, channels=2, fusion_hidden=8)
    ps = attn2d.init_attn2d(rng, axis_len=d, pair_count=t, channels=2, fusion_hidden=8)
    z = Tensor(rng.normal(size=(n, t, d)))
    af = attn2d.featurewise_attention(z, pf).data
    a_s = attn2d.stockwise_attention(z, ps).data
    npt.assert_allclose(af.sum(axis=1), np.ones(d), rtol=0, atol=1e-9)
    npt.assert_allclose(a_s.sum(axis=1), np.ones(n), rtol=0, atol=1e-9)


def test_featurewise_permutation_equivariance(rng):
    n, t, d = 2, 4, 5
    p = attn2d.init_attn2d(rng, axis_len=t, pair_count=n, channels=2, fusion_hidden=8)
    z = rng.normal(size=(n, t, d))
    perm = np.array([3, 0, 4, 1, 2])
    a_base = attn2d.featurewise_attention(Tensor(z), p).data
    a_perm = attn2d.featurewise_attention(Tensor(z[:, :, perm]), p).data
    npt.assert_allclose(a_perm, a_base[np.ix_(perm, perm)], rtol=0, atol=1e-12)
    # outputs carry the same permutation
    out_base = attn2d.featurewise_2d(Tensor(z), p).data
    out_perm = attn2d.featurewise_2d(Tensor(z[:, :, perm]), p).data
    npt.assert_allclose(out_perm, out_base[:, :, perm], rtol=0, atol=1e-12)


def test_shape_mismatch_raises(rng):
    p = attn2d.init_attn2d(rng, axis_len=4, pair_count=2, channels=2, fusion_hidden=8)
    with pytest.raises(ValueError):
        attn2d.featurewise_2d(Tensor(np.zeros((2, 5, 3))), p)  # T=5 vs params T=4
    with pytest.raises(ValueError):
        attn2d.featurewise_2d(Tensor(np.zeros((3, 4, 3))), p)  # N=3 breaks fusion input


def test_output_shape(rng):
    n, t, d = 3, 6, 4
    pf = attn2d.init_attn2d(rng, axis_len=t, pair_count=n, channels=2, fusion_hidden=8)
    ps = attn2d.init_attn2d(rng, axis_len=d, pair_count=t, channels=2, fusion_hidden=8)
    z = Tensor(rng.normal(size=(n, t, d)))
    assert attn2d.featurewise_2d(z, pf).shape == (n, t, d)
    assert attn2d.stockwise_2d(z, ps).shape == (n, t, d)


def test_grad_check_both_variants(rng):
    n, t, d = 2, 4, 3
    pf = attn2d.init_attn2d(rng, axis_len=t, pair_count=n, channels=2, fusion_hidden=6)
    ps = attn2d.init_attn2d(rng, axis_len=d, pair_count=t, channels=2, fusion_hidden=6)
    z = Tensor(rng.normal(size=(n, t, d)))
    w = rng.normal(size=(n, t, d))
    check_rng = np.random.default_rng(5)
    for label, params, op in (
        ("featurewise", pf, attn2d.featurewise_2d),
        ("stockwise", ps, attn2d.stockwise_2d),
    ):
        build = lambda: tz.tsum(op(z, params) * Tensor(w))
        for name, param in named_tensors(params):
            err = tz.grad_check_param(build, param, sample=6, rng=check_rng)
            assert err < 1e-4, f"{label} {name}: grad error {err}"
        err = tz.grad_check(lambda t_: tz.tsum(op(t_, params) * Tensor(w)), z)
        assert err < 1e-4, f"{label} input: grad error {err}"
