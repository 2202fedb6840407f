import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snt import ops
from snt.tensor import ConfigurationError, Tensor, precision


def conv_direct(x, w, b, stride, padding, dilation):
    """Loop-nest cross-correlation used as an independent reference."""
    N, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((N, Co, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            for a in range(kh):
                for c in range(kw):
                    patch = xp[:, :, i * stride + a * dilation, j * stride + c * dilation]
                    out[:, :, i, j] += patch @ w[:, :, a, c].T
    return out + (0 if b is None else b[None, :, None, None])


def bilinear_zero(img, y, x):
    """Scalar bilinear sample of a (H, W) image with zeros outside."""
    H, W = img.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    val = 0.0
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            if 0 <= yy < H and 0 <= xx < W:
                val += (1 - abs(y - yy)) * (1 - abs(x - xx)) * img[yy, xx]
    return val


def dconv_direct(x, w, b, off, mod, padding=1):
    N, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    out = np.zeros((N, Co, H, W))
    for n in range(N):
        for i in range(H):
            for j in range(W):
                for k in range(kh * kw):
                    a, c = divmod(k, kw)
                    py = i - padding + a + off[n, 2 * k, i, j]
                    px = j - padding + c + off[n, 2 * k + 1, i, j]
                    s = np.array([bilinear_zero(x[n, ch], py, px) for ch in range(C)])
                    out[n, :, i, j] += mod[n, k, i, j] * (w[:, :, a, c] @ s)
    return out + b[None, :, None, None]


@settings(max_examples=40, deadline=None)
@given(stride=st.integers(1, 2), padding=st.integers(0, 3), dilation=st.integers(1, 3),
       k=st.sampled_from([1, 3]), h=st.integers(3, 7), seed=st.integers(0, 10_000))
def test_conv2d_matches_direct_loops(stride, padding, dilation, k, h, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, h, h + 1))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    if (h + 2 * padding - dilation * (k - 1) - 1) < 0:
        return
    with precision(np.float64):
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation).data
    np.testing.assert_allclose(got, conv_direct(x, w, b, stride, padding, dilation), atol=1e-10)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ConfigurationError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))


def test_conv2d_atrous_rate_larger_than_map_keeps_center_tap():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    with precision(np.float64):
        got = ops.conv2d(Tensor(x), Tensor(w), None, padding=12, dilation=12).data
    expected = np.einsum("oc,nchw->nohw", w[:, :, 1, 1], x)
    np.testing.assert_allclose(got, expected, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_deformable_conv_matches_direct_sampling(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 4, 5))
    w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    off = rng.uniform(-2.5, 2.5, size=(1, 18, 4, 5))
    mod = rng.uniform(0, 1, size=(1, 9, 4, 5))
    with precision(np.float64):
        got = ops.deformable_conv2d(Tensor(x), Tensor(w), Tensor(b), Tensor(off), Tensor(mod)).data
    np.testing.assert_allclose(got, dconv_direct(x, w, b, off, mod), atol=1e-10)


def test_deformable_conv_integer_offset_is_shift():
    # every tap displaced by (0, +1) equals conv of the image shifted left,
    # except column 0 where the shifted image reads padding instead of x[..., 0]
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 5, 6))
    w = rng.normal(size=(2, 2, 3, 3))
    off = np.zeros((1, 18, 5, 6))
    off[:, 1::2] = 1.0
    mod = np.ones((1, 9, 5, 6))
    with precision(np.float64):
        got = ops.deformable_conv2d(Tensor(x), Tensor(w), None, Tensor(off), Tensor(mod)).data
    shifted = np.zeros_like(x)
    shifted[..., :-1] = x[..., 1:]
    np.testing.assert_allclose(got[..., 1:], conv_direct(shifted, w, None, 1, 1, 1)[..., 1:], atol=1e-12)


def test_deformable_conv_far_offsets_read_zero():
    x = np.ones((1, 1, 3, 3))
    off = np.full((1, 18, 3, 3), 50.0)
    out = ops.deformable_conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), None, Tensor(off),
                                Tensor(np.ones((1, 9, 3, 3)))).data
    assert np.all(out == 0)


def test_batch_norm_train_normalizes_and_updates_running_stats(rng):
    x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
    rm, rv = np.zeros(3), np.ones(3)
    with precision(np.float64):
        out = ops.batch_norm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batch_norm_eval_uses_running_stats():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    rm, rv = np.array([1.0, 2.0]), np.array([4.0, 9.0])
    with precision(np.float64):
        out = ops.batch_norm2d(Tensor(x), Tensor([2.0, 1.0]), Tensor([0.5, 0.0]), rm, rv, False).data
    expected = (x - rm[:, None, None]) / np.sqrt(rv[:, None, None] + 1e-5) * np.array([2.0, 1.0])[:, None, None]
    expected[:, 0] += 0.5
    np.testing.assert_allclose(out, expected)


def test_dropout_is_inverted_and_identity_in_eval(rng):
    x = Tensor(np.ones((200, 50)))
    assert ops.dropout(x, 0.5, False, None) is x
    y = ops.dropout(x, 0.5, True, rng).data
    assert set(np.unique(y)) == {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_sums_to_one(seed):
    x = np.random.default_rng(seed).normal(scale=20, size=(2, 5, 3, 3))
    p = ops.softmax_channels(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-5)


def test_upsample_matches_scalar_reference(rng):
    x = rng.normal(size=(1, 1, 3, 4))
    with precision(np.float64):
        got = ops.upsample_bilinear(Tensor(x), 7, 9).data[0, 0]

    def src(o, n_in, n_out):
        return max((o + 0.5) * n_in / n_out - 0.5, 0.0)

    for i in range(7):
        for j in range(9):
            y, xx = min(src(i, 3, 7), 2), min(src(j, 4, 9), 3)
            y0, x0 = int(y), int(xx)
            y1, x1 = min(y0 + 1, 2), min(x0 + 1, 3)
            fy, fx = y - y0, xx - x0
            ref = ((1 - fy) * ((1 - fx) * x[0, 0, y0, x0] + fx * x[0, 0, y0, x1])
                   + fy * ((1 - fx) * x[0, 0, y1, x0] + fx * x[0, 0, y1, x1]))
            assert abs(got[i, j] - ref) < 1e-12


def test_upsample_preserves_constants():
    out = ops.upsample_bilinear(Tensor(np.full((1, 2, 4, 4), 3.0)), 16, 16).data
    np.testing.assert_allclose(out, 3.0)


def test_cross_entropy_uniform_logits_is_log_classes():
    t = np.zeros((2, 3, 3), dtype=int)
    with precision(np.float64):
        loss = ops.cross_entropy_spatial(Tensor(np.zeros((2, 6, 3, 3))), t).item()
    assert abs(loss - np.log(6)) < 1e-12


def test_nll_ignores_pixels_and_clamps():
    p = np.zeros((1, 2, 1, 3))
    p[0, 0] = [1.0, 0.0, 0.5]
    p[0, 1] = 1 - p[0, 0]
    t = np.array([[[0, 0, 255]]])
    with precision(np.float64):
        loss = ops.nll_probs(Tensor(p), t).item()
    assert abs(loss - (0 - np.log(1e-7)) / 2) < 1e-9


def test_nll_all_ignored_is_zero():
    loss = ops.nll_probs(Tensor(np.full((1, 2, 2, 2), 0.5)), np.full((1, 2, 2), 255))
    assert loss.item() == 0.0


def test_se_block_gate_in_unit_interval(rng):
    x = Tensor(np.abs(rng.normal(size=(2, 8, 3, 3))))
    ps = [Tensor(rng.normal(size=s)) for s in ((2, 8), (2,), (8, 2), (8,))]
    y = ops.se_block(x, *ps).data
    ratio = y / x.data
    assert np.all((ratio > 0) & (ratio < 1))
    # gate is constant over space
    np.testing.assert_allclose(ratio, ratio[:, :, :1, :1] * np.ones_like(ratio), rtol=1e-5)


def test_aspp_rate1_is_pointwise(rng):
    x = rng.normal(size=(1, 3, 5, 5))
    w1, b1 = rng.normal(size=(2, 3, 1, 1)), np.zeros(2)
    wp, bp = np.eye(2).reshape(2, 2, 1, 1), np.zeros(2)
    with precision(np.float64):
        out = ops.aspp(Tensor(x), [(Tensor(w1), Tensor(b1))], (Tensor(wp), Tensor(bp)), (1,)).data
    np.testing.assert_allclose(out, np.maximum(np.einsum("oc,nchw->nohw", w1[:, :, 0, 0], x), 0), atol=1e-12)
