"""Forward-op contracts: worked examples, algebraic identities, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwrseg import engine as E


def rnd(shape, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConvForward:
    def test_1x1_scalar(self):
        x = E.tensor([[[[2.0]]]])
        w = E.tensor([[[[3.0]]]])
        out = E.conv2d_forward(x, w, None, E.ConvSpec(1, 1, 1))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 6.0

    def test_3x3_ones_counts_valid_taps(self):
        x = np.ones((1, 1, 3, 3), np.float32)
        w = np.ones((1, 1, 3, 3), np.float32)
        out = E.conv2d_forward(x, w, None, E.ConvSpec(1, 1, 3, padding=1))
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], np.float32)
        np.testing.assert_array_equal(out[0, 0], expected)

    def test_dilated_delta_tap_pattern(self):
        x = np.zeros((1, 1, 5, 5), np.float32)
        x[0, 0, 2, 2] = 1.0
        w = np.ones((1, 1, 3, 3), np.float32)
        spec = E.ConvSpec(1, 1, 3, padding=2, dilation=2, groups=1)
        out = E.conv2d_forward(x, w, None, spec)
        expected = np.zeros((5, 5), np.float32)
        for i in (0, 2, 4):
            for j in (0, 2, 4):
                expected[i, j] = 1.0
        np.testing.assert_array_equal(out[0, 0], expected)

    def test_identity_weight_is_bitwise_identity(self):
        c = 5
        x = rnd((2, c, 6, 7), seed=3)
        w = np.eye(c, dtype=np.float32).reshape(c, c, 1, 1)
        out = E.conv2d_forward(x, w, None, E.ConvSpec(c, c, 1))
        np.testing.assert_array_equal(out, x)

    def test_depthwise_equals_per_channel_convs(self):
        x = rnd((1, 4, 6, 6), seed=1)
        w = rnd((4, 1, 3, 3), seed=2)
        dw = E.conv2d_forward(x, w, None, E.ConvSpec(4, 4, 3, padding=1, groups=4))
        for c in range(4):
            single = E.conv2d_forward(
                x[:, c:c + 1], w[c:c + 1], None, E.ConvSpec(1, 1, 3, padding=1))
            np.testing.assert_array_equal(dw[:, c:c + 1], single)

    def test_grouped_matches_blockwise_dense(self):
        x = rnd((2, 6, 5, 5), seed=4)
        w = rnd((4, 3, 3, 3), seed=5)
        out = E.conv2d_forward(x, w, None, E.ConvSpec(6, 4, 3, padding=1, groups=2))
        for g in range(2):
            ref = E.conv2d_forward(x[:, 3 * g:3 * g + 3], w[2 * g:2 * g + 2], None,
                                   E.ConvSpec(3, 2, 3, padding=1))
            np.testing.assert_array_equal(out[:, 2 * g:2 * g + 2], ref)

    def test_bias_and_stride_shapes(self):
        x = rnd((2, 3, 9, 11), seed=6)
        w = rnd((8, 3, 3, 3), seed=7)
        b = rnd((8,), seed=8)
        out = E.conv2d_forward(x, w, b, E.ConvSpec(3, 8, 3, stride=2, padding=1, has_bias=True))
        assert out.shape == (2, 8, 5, 6)
        zero_b = E.conv2d_forward(x, w, None, E.ConvSpec(3, 8, 3, stride=2, padding=1))
        np.testing.assert_allclose(out, zero_b + b.reshape(1, 8, 1, 1), rtol=0, atol=0)

    def test_brute_force_dot_product(self):
        # every output element is the exact window dot product
        x = rnd((1, 2, 5, 6), seed=9).astype(np.float64)
        w = rnd((3, 2, 3, 3), seed=10).astype(np.float64)
        spec = E.ConvSpec(2, 3, 3, stride=2, padding=1, dilation=2)
        oh, ow = spec.out_hw(5, 6)
        out = E.conv2d_forward(x, w, None, spec)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(2):
                        for ki in range(3):
                            for kj in range(3):
                                acc += xp[0, c, i * 2 + ki * 2, j * 2 + kj * 2] * w[o, c, ki, kj]
                    assert out[0, o, i, j] == pytest.approx(acc, rel=1e-12)

    def test_errors(self):
        x = rnd((1, 3, 4, 4))
        w = rnd((2, 3, 3, 3))
        with pytest.raises(E.ShapeError):
            E.conv2d_forward(x, w, None, E.ConvSpec(4, 2, 3))  # channel mismatch
        with pytest.raises(E.ShapeError):
            E.conv2d_forward(x, w, None, E.ConvSpec(3, 2, 5))  # output would be 0x0
        bad = x.copy()
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(E.NumericError):
            E.conv2d_forward(bad, w, None, E.ConvSpec(3, 2, 3, padding=1))
        with pytest.raises(E.ShapeError):
            E.ConvSpec(3, 2, 3, groups=2)  # 3 % 2 != 0

    def test_determinism_two_runs_bitwise(self):
        x = rnd((2, 16, 16, 16), seed=11)
        w = rnd((32, 16, 3, 3), seed=12)
        spec = E.ConvSpec(16, 32, 3, padding=1)
        a = E.conv2d_forward(x, w, None, spec)
        b = E.conv2d_forward(x, w, None, spec)
        np.testing.assert_array_equal(a, b)

    def test_determinism_across_worker_counts(self):
        # parallel runs partition by output element only: bitwise equal
        threadpoolctl = pytest.importorskip("threadpoolctl")
        x = rnd((4, 64, 32, 32), seed=13)
        w = rnd((128, 64, 3, 3), seed=14)
        spec = E.ConvSpec(64, 128, 3, padding=1)
        results = []
        for n in (1, 2, 4):
            with threadpoolctl.threadpool_limits(limits=n):
                results.append(E.conv2d_forward(x, w, None, spec))
        np.testing.assert_array_equal(results[0], results[1])
        np.testing.assert_array_equal(results[0], results[2])


class TestConvBackward:
    def test_scalar_product_rule(self):
        x = E.tensor([[[[2.0]]]])
        w = E.tensor([[[[3.0]]]])
        gx, gw, gb = E.conv2d_backward(x, w, E.ConvSpec(1, 1, 1), E.tensor([[[[1.0]]]]))
        assert gx[0, 0, 0, 0] == 3.0
        assert gw[0, 0, 0, 0] == 2.0
        assert gb is None

    def test_zero_grad_out(self):
        x = rnd((1, 2, 4, 4), seed=0)
        w = rnd((2, 1, 3, 3), seed=1)
        spec = E.ConvSpec(2, 2, 3, padding=2, dilation=2, groups=2, has_bias=True)
        go = np.zeros_like(E.conv2d_forward(x, w, np.zeros(2, np.float32), spec))
        gx, gw, gb = E.conv2d_backward(x, w, spec, go)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_grad_shapes_and_mismatch(self):
        x = rnd((1, 2, 4, 4))
        w = rnd((4, 2, 3, 3))
        spec = E.ConvSpec(2, 4, 3, padding=1)
        go = np.ones((1, 4, 4, 4), np.float32)
        gx, gw, _ = E.conv2d_backward(x, w, spec, go)
        assert gx.shape == x.shape and gw.shape == w.shape
        with pytest.raises(E.ShapeError):
            E.conv2d_backward(x, w, spec, np.ones((1, 4, 3, 3), np.float32))


# ---------------------------------------------------------------------------
# batchnorm
# ---------------------------------------------------------------------------

class TestBatchNorm:
    def make_x(self, vals):
        # one channel, values along the batch axis
        return np.array(vals, np.float32).reshape(-1, 1, 1, 1)

    def test_zero_mean_input_kept(self):
        st_ = E.BatchNormState.create(1)
        out = E.batchnorm_forward(self.make_x([-1.0, 1.0]), st_, "train")
        np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-4)

    def test_affine(self):
        st_ = E.BatchNormState.create(1)
        st_.gamma[:] = 2.0
        st_.beta[:] = 5.0
        out = E.batchnorm_forward(self.make_x([-1.0, 1.0]), st_, "train")
        np.testing.assert_allclose(out.ravel(), [3.0, 7.0], atol=1e-3)

    def test_eval_identity(self):
        st_ = E.BatchNormState.create(3, eps=1e-12)
        x = rnd((2, 3, 4, 4), seed=5)
        out = E.batchnorm_forward(x, st_, "eval")
        np.testing.assert_allclose(out, x, atol=1e-5)

    def test_running_stats_momentum_one(self):
        st_ = E.BatchNormState.create(2, momentum=1.0)
        x = rnd((3, 2, 4, 4), seed=6)
        E.batchnorm_forward(x, st_, "train")
        np.testing.assert_allclose(st_.running_mean, x.mean(axis=(0, 2, 3)), rtol=1e-6)
        np.testing.assert_allclose(st_.running_var, x.var(axis=(0, 2, 3)), rtol=1e-6)

    def test_running_stats_blend(self):
        st_ = E.BatchNormState.create(1, momentum=0.25)
        x = self.make_x([1.0, 3.0])  # batch mean 2, biased var 1
        E.batchnorm_forward(x, st_, "train")
        assert st_.running_mean[0] == pytest.approx(0.75 * 0.0 + 0.25 * 2.0)
        assert st_.running_var[0] == pytest.approx(0.75 * 1.0 + 0.25 * 1.0)

    def test_eval_does_not_touch_running_stats(self):
        st_ = E.BatchNormState.create(2)
        rm, rv = st_.running_mean.copy(), st_.running_var.copy()
        E.batchnorm_forward(rnd((2, 2, 3, 3)), st_, "eval")
        np.testing.assert_array_equal(st_.running_mean, rm)
        np.testing.assert_array_equal(st_.running_var, rv)

    def test_errors(self):
        st_ = E.BatchNormState.create(2)
        with pytest.raises(E.ShapeError):
            E.batchnorm_forward(rnd((1, 3, 2, 2)), st_, "train")
        with pytest.raises(E.ShapeError):
            E.batchnorm_forward(rnd((1, 2, 1, 1)), st_, "train")  # n*h*w == 1
        with pytest.raises(ValueError):
            E.batchnorm_forward(rnd((1, 2, 2, 2)), st_, "inference")

    def test_backward_zero_grad(self):
        st_ = E.BatchNormState.create(3)
        x = rnd((2, 3, 2, 2), seed=7)
        gx, gg, gb = E.batchnorm_backward(x, st_, np.zeros_like(x))
        assert not gx.any() and not gg.any() and not gb.any()

    def test_gamma_grad_per_channel_independence(self):
        st_ = E.BatchNormState.create(3)
        x = rnd((2, 3, 2, 2), seed=8)
        go = rnd((2, 3, 2, 2), seed=9)
        _, gg, _ = E.batchnorm_backward(x, st_, go)
        # permute the *other* channels; channel 0's gamma grad is unchanged
        perm = x.copy()
        perm[:, 1], perm[:, 2] = x[:, 2], x[:, 1]
        gop = go.copy()
        gop[:, 1], gop[:, 2] = go[:, 2], go[:, 1]
        _, gg_perm, _ = E.batchnorm_backward(perm, st_, gop)
        assert gg_perm[0] == pytest.approx(gg[0], rel=1e-6)


# ---------------------------------------------------------------------------
# relu / add / concat
# ---------------------------------------------------------------------------

class TestPointwise:
    def test_relu_example(self):
        x = np.array([-1.0, 0.0, 2.0], np.float32).reshape(1, 3, 1, 1)
        np.testing.assert_array_equal(E.relu_forward(x).ravel(), [0, 0, 2])
        g = E.relu_backward(x, np.ones_like(x))
        np.testing.assert_array_equal(g.ravel(), [0, 0, 1])

    @given(st.lists(st.floats(-10, 10, width=32), min_size=1, max_size=32))
    @settings(max_examples=50, deadline=None)
    def test_relu_idempotent(self, vals):
        x = np.array(vals, np.float32).reshape(1, 1, 1, -1)
        once = E.relu_forward(x)
        np.testing.assert_array_equal(E.relu_forward(once), once)

    def test_add(self):
        x = rnd((2, 3, 4, 4), seed=0)
        y = rnd((2, 3, 4, 4), seed=1)
        np.testing.assert_array_equal(E.add(x, np.zeros_like(x)), x)
        np.testing.assert_array_equal(E.add(x, y), E.add(y, x))
        with pytest.raises(E.ShapeError):
            E.add(x, rnd((2, 3, 4, 5)))

    def test_concat_and_split(self):
        a = rnd((1, 2, 1, 1), seed=2)
        b = rnd((1, 3, 1, 1), seed=3)
        cat = E.concat_channels([a, b])
        assert cat.shape == (1, 5, 1, 1)
        np.testing.assert_array_equal(E.concat_channels([a]), a)
        pa, pb = E.split_channels(cat, [2, 3])
        np.testing.assert_array_equal(pa, a)
        np.testing.assert_array_equal(pb, b)
        with pytest.raises(E.ShapeError):
            E.concat_channels([a, rnd((2, 3, 1, 1))])
        with pytest.raises(E.ShapeError):
            E.split_channels(cat, [2, 2])


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

class TestMaxPool:
    def test_2x2_window(self):
        x = E.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = E.maxpool_forward(x, 2, 2)
        assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 4.0

    def test_constant_input(self):
        x = np.full((1, 2, 6, 6), 3.5, np.float32)
        out = E.maxpool_forward(x, 3, 2, 1)
        assert (out == 3.5).all()

    def test_backward_routes_to_argmax(self):
        x = E.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        g = E.maxpool_backward(x, 2, 2, 0, E.tensor([[[[1.0]]]]))
        expected = np.zeros((2, 2), np.float32)
        expected[1, 1] = 1.0
        np.testing.assert_array_equal(g[0, 0], expected)

    def test_backward_first_argmax_on_ties(self):
        x = np.full((1, 1, 2, 2), 7.0, np.float32)
        g = E.maxpool_backward(x, 2, 2, 0, E.tensor([[[[1.0]]]]))
        expected = np.zeros((2, 2), np.float32)
        expected[0, 0] = 1.0  # row-major first position wins
        np.testing.assert_array_equal(g[0, 0], expected)

    def test_neg_inf_padding_semantics(self):
        # all-negative input: zero padding would (wrongly) win the max
        x = np.full((1, 1, 2, 2), -5.0, np.float32)
        out = E.maxpool_forward(x, 3, 2, 1)
        assert (out == -5.0).all()

    def test_overlapping_windows_accumulate(self):
        x = np.zeros((1, 1, 3, 3), np.float32)
        x[0, 0, 1, 1] = 9.0
        go = np.ones((1, 1, 2, 2), np.float32)
        g = E.maxpool_backward(x, 2, 1, 0, go)
        assert g[0, 0, 1, 1] == 4.0  # argmax of all four windows


# ---------------------------------------------------------------------------
# bilinear upsampling
# ---------------------------------------------------------------------------

def bilinear_reference(x2d, out_h, out_w):
    """Independent scalar evaluation of the half-pixel/clamped formula."""
    h, w = x2d.shape
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for ox in range(out_w):
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = x2d[y0, x0] * (1 - fx) + x2d[y0, x1] * fx
            bot = x2d[y1, x0] * (1 - fx) + x2d[y1, x1] * fx
            out[oy, ox] = top * (1 - fy) + bot * fy
    return out


class TestUpsample:
    def test_constant_any_scale(self):
        x = np.full((1, 2, 3, 5), 2.25, np.float32)
        for oh, ow in [(3, 5), (6, 10), (7, 13)]:
            out = E.upsample_bilinear(x, oh, ow)
            assert out.shape == (1, 2, oh, ow)
            np.testing.assert_array_equal(out, np.full((1, 2, oh, ow), 2.25, np.float32))

    def test_single_pixel_border_clamp(self):
        x = E.tensor([[[[5.0]]]])
        out = E.upsample_bilinear(x, 2, 2)
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 5.0, np.float32))

    def test_2x2_to_4x4_regression_vector(self):
        x2 = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = E.upsample_bilinear(x2.reshape(1, 1, 2, 2).astype(np.float32), 4, 4)
        # pinned from the scalar formula evaluation
        pinned = np.array([
            [1.0, 1.25, 1.75, 2.0],
            [1.5, 1.75, 2.25, 2.5],
            [2.5, 2.75, 3.25, 3.5],
            [3.0, 3.25, 3.75, 4.0],
        ])
        np.testing.assert_allclose(out[0, 0], pinned, atol=1e-6)
        np.testing.assert_allclose(out[0, 0], bilinear_reference(x2, 4, 4), atol=1e-6)

    def test_matches_reference_on_uneven_scale(self):
        x = rnd((1, 1, 3, 4), seed=13).astype(np.float64)
        out = E.upsample_bilinear(x, 7, 9)
        np.testing.assert_allclose(out[0, 0], bilinear_reference(x[0, 0], 7, 9), atol=1e-12)

    def test_backward_is_exact_transpose(self):
        # <up(x), g> == <x, up^T(g)> for random x, g
        x = rnd((1, 2, 3, 4), seed=14).astype(np.float64)
        g = rnd((1, 2, 6, 9), seed=15).astype(np.float64)
        up = E.upsample_bilinear(x, 6, 9)
        gx = E.upsample_bilinear_backward(x.shape, 6, 9, g)
        assert np.sum(up * g) == pytest.approx(np.sum(x * gx), rel=1e-12)

    def test_errors(self):
        x = rnd((1, 1, 4, 4))
        with pytest.raises(E.ShapeError):
            E.upsample_bilinear(x, 0, 4)
        with pytest.raises(E.ShapeError):
            E.upsample_bilinear(x, 2, 4)  # shrink not allowed


# ---------------------------------------------------------------------------
# .nt round trip
# ---------------------------------------------------------------------------

class TestNtFormat:
    def test_round_trip(self, tmp_path):
        x = rnd((2, 3, 4, 5), seed=16)
        p = tmp_path / "t.nt"
        E.write_nt(p, x)
        back = E.read_nt(p)
        np.testing.assert_array_equal(back, x)
        assert back.dtype == np.float32

    def test_header_bytes(self, tmp_path):
        x = np.array([1.0], np.float32).reshape(1)
        raw = E.nt_bytes(x)
        assert raw[:4] == b"NTSR"
        assert int.from_bytes(raw[4:8], "little") == 1   # version
        assert int.from_bytes(raw[8:12], "little") == 1  # ndim

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "bad.nt"
        E.write_nt(p, rnd((2, 2)))
        data = p.read_bytes()[:-3]
        p.write_bytes(data)
        with pytest.raises(E.FormatError):
            E.read_nt(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.nt"
        p.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(E.FormatError):
            E.read_nt(p)
