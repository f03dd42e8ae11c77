"""Kernel-level contracts: trivial identities, frozen values, scalar oracles."""

import numpy as np
import pytest

from flowdet import ops
from flowdet.ops import BnParams, ConvParams
from flowdet.selfcheck import warp_scalar_reference
from flowdet.tensor import Tensor


def t(data, **kw):
    return Tensor(np.asarray(data, dtype=np.float64), **kw)


def conv(x, w, bias=None, stride=1, padding=0, groups=1):
    params = ConvParams(
        weight=t(w), bias=t(bias) if bias is not None else None, stride=stride, padding=padding, groups=groups
    )
    return ops.conv2d(t(x), params)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
        out = conv(x, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_sum(self):
        out = conv(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_first_separable_block_shape(self):
        # 512x384 six-channel input through the first depthwise+pointwise pair
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 6, 384, 512)).astype(np.float32)
        dw = conv(x, rng.standard_normal((6, 1, 3, 3)), stride=2, padding=1, groups=6)
        out = conv(dw.data, rng.standard_normal((32, 6, 1, 1)))
        assert out.shape == (1, 32, 192, 256)

    def test_shape_mismatch_diagnostic(self):
        with pytest.raises(ValueError, match=r"\(1, 3, 4, 4\).*\(2, 4, 1, 1\)"):
            conv(np.zeros((1, 3, 4, 4)), np.zeros((2, 4, 1, 1)))

    def test_groups_depthwise(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 4, 5, 5))
        w = rng.standard_normal((4, 1, 3, 3))
        out = conv(x, w, stride=1, padding=1, groups=4)
        # per-channel conv equals a dense conv with block-diagonal weights
        dense = np.zeros((4, 4, 3, 3))
        for c in range(4):
            dense[c, c] = w[c, 0]
        ref = conv(x, dense, stride=1, padding=1)
        np.testing.assert_allclose(out.data, ref.data, atol=1e-12)

    def test_deterministic_reruns(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 8, 16, 16)).astype(np.float32)
        w = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
        a = conv(x, w, padding=1).data
        b = conv(x, w, padding=1).data
        assert np.array_equal(a, b)

    def test_finite_outputs(self):
        rng = np.random.default_rng(4)
        out = conv(rng.standard_normal((1, 3, 8, 8)), rng.standard_normal((5, 3, 3, 3)), padding=1)
        assert np.isfinite(out.data).all()


class TestDepthwiseSeparable:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 3, 6, 6))
        dw_w = np.zeros((3, 1, 3, 3))
        dw_w[:, 0, 1, 1] = 1.0  # one-hot center taps
        pw_w = np.eye(3).reshape(3, 3, 1, 1)
        out = ops.depthwise_separable(
            t(x),
            ConvParams(weight=t(dw_w), stride=1, padding=1, groups=3),
            ConvParams(weight=t(pw_w)),
        )
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_composition_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 8, 16, 16))
        dw = ConvParams(weight=t(rng.standard_normal((8, 1, 3, 3))), stride=1, padding=1, groups=8)
        pw = ConvParams(weight=t(rng.standard_normal((12, 8, 1, 1))), bias=t(rng.standard_normal(12)))
        fused = ops.depthwise_separable(t(x), dw, pw)
        staged = ops.conv2d(ops.conv2d(t(x), dw), pw)
        assert np.abs(fused.data - staged.data).max() < 1e-12

    def test_second_block_shape(self):
        rng = np.random.default_rng(6)
        x = t(rng.standard_normal((1, 32, 192, 256)).astype(np.float32))
        dw = ConvParams(weight=t(rng.standard_normal((32, 1, 3, 3))), stride=2, padding=1, groups=32)
        pw = ConvParams(weight=t(rng.standard_normal((64, 32, 1, 1))))
        assert ops.depthwise_separable(x, dw, pw).shape == (1, 64, 96, 128)

    def test_rejects_non_3x3_dw(self):
        with pytest.raises(ValueError, match="3x3"):
            ops.depthwise_separable(
                t(np.zeros((1, 2, 4, 4))),
                ConvParams(weight=t(np.zeros((2, 1, 1, 1))), groups=2),
                ConvParams(weight=t(np.zeros((2, 2, 1, 1)))),
            )


class TestBatchNorm:
    def test_identity_stats(self):
        x = np.random.default_rng(7).standard_normal((1, 3, 4, 4))
        bn = BnParams(gamma=t([1, 1, 1]), beta=t([0, 0, 0]), mean=np.zeros(3), var=np.ones(3), eps=0.0)
        np.testing.assert_array_equal(ops.batch_norm(t(x), bn).data, x)

    def test_hand_arithmetic(self):
        bn = BnParams(gamma=t([3.0]), beta=t([1.0]), mean=np.array([1.0]), var=np.array([4.0]), eps=0.0)
        out = ops.batch_norm(t(np.full((1, 1, 1, 1), 2.0)), bn)
        assert out.data[0, 0, 0, 0] == pytest.approx(2.5, abs=1e-15)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 5, 6, 6))
        gamma, beta = rng.standard_normal(5), rng.standard_normal(5)
        mean, var = rng.standard_normal(5), rng.uniform(0.5, 2.0, 5)
        bn = BnParams(gamma=t(gamma), beta=t(beta), mean=mean, var=var, eps=1e-5)
        out = ops.batch_norm(t(x), bn).data
        ref = np.empty_like(x)
        for n in range(2):
            for c in range(5):
                for y in range(6):
                    for xx in range(6):
                        ref[n, c, y, xx] = (x[n, c, y, xx] - mean[c]) / np.sqrt(var[c] + 1e-5) * gamma[c] + beta[c]
        assert np.abs(out - ref).max() < 1e-12

    def test_channel_mismatch(self):
        bn = BnParams(gamma=t([1.0]), beta=t([0.0]), mean=np.zeros(1), var=np.ones(1), eps=0.0)
        with pytest.raises(ValueError, match="channel mismatch"):
            ops.batch_norm(t(np.zeros((1, 2, 2, 2))), bn)


class TestLeakyRelu:
    def test_positive_passthrough(self):
        assert ops.leaky_relu(t([[[[5.0]]]]), 0.1).data[0, 0, 0, 0] == 5.0

    def test_negative_scaled(self):
        assert ops.leaky_relu(t([[[[-2.0]]]]), 0.1).data[0, 0, 0, 0] == pytest.approx(-0.2)

    def test_zero_slope_is_relu(self):
        x = np.random.default_rng(9).standard_normal((1, 2, 5, 5))
        np.testing.assert_array_equal(ops.leaky_relu(t(x), 0.0).data, np.maximum(x, 0))


class TestNearestUpsample:
    def test_single_pixel(self):
        out = ops.nearest_upsample_2x(t(np.full((1, 1, 1, 1), 7.0)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))

    def test_two_by_two(self):
        out = ops.nearest_upsample_2x(t([[[[1.0, 2.0], [3.0, 4.0]]]]))
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_round_trip_top_left(self):
        x = np.random.default_rng(10).standard_normal((2, 3, 4, 5))
        up = ops.nearest_upsample_2x(t(x)).data
        np.testing.assert_array_equal(up[:, :, ::2, ::2], x)


class TestBilinearWarp:
    def test_zero_flow_identity(self):
        rng = np.random.default_rng(11)
        feat = rng.standard_normal((2, 3, 6, 7))
        out = ops.bilinear_warp(t(feat), t(np.zeros((2, 2, 6, 7))))
        assert np.array_equal(out.data, feat)

    def test_integer_shift_with_zero_fill(self):
        w = 6
        ramp = np.tile(np.arange(w, dtype=np.float64), (1, 1, 4, 1))
        flow = np.zeros((1, 2, 4, w))
        flow[0, 0] = 1.0  # sample one column to the right
        out = ops.bilinear_warp(t(ramp), t(flow)).data
        np.testing.assert_array_equal(out[:, :, :, : w - 1], ramp[:, :, :, 1:])
        np.testing.assert_array_equal(out[:, :, :, w - 1], np.zeros((1, 1, 4)))

    def test_scalar_oracle(self):
        rng = np.random.default_rng(12)
        feat = rng.standard_normal((2, 4, 5, 6))
        flow = rng.uniform(-2.5, 2.5, (2, 2, 5, 6))
        got = ops.bilinear_warp(t(feat), t(flow)).data
        ref = warp_scalar_reference(feat, flow)
        assert np.abs(got - ref).max() < 1e-12

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ValueError, match="spatial mismatch"):
            ops.bilinear_warp(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 2, 5, 5))))


class TestConcat:
    def test_channel_stack(self):
        a, b = np.zeros((1, 2, 4, 4)), np.ones((1, 3, 4, 4))
        assert ops.concat_channels(t(a), t(b)).shape == (1, 5, 4, 4)

    def test_single_input(self):
        x = np.random.default_rng(13).standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(ops.concat_channels(t(x)).data, x)

    def test_first_channel_preserved(self):
        rng = np.random.default_rng(14)
        a, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 4, 4))
        out = ops.concat_channels(t(a), t(b))
        np.testing.assert_array_equal(out.data[:, 0], a[:, 0])

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError, match="spatial mismatch"):
            ops.concat_channels(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 5, 4))))


class TestTensorFileFormat:
    def test_round_trip(self, tmp_path):
        from flowdet.io import load_tensor, save_tensor

        x = np.random.default_rng(15).standard_normal((2, 3, 4, 5)).astype(np.float32)
        path = tmp_path / "x.tnsr"
        save_tensor(path, x)
        np.testing.assert_array_equal(load_tensor(path), x)
        raw = path.read_bytes()
        assert raw[:4] == b"TNSR"
        assert np.frombuffer(raw[4:20], dtype="<u4").tolist() == [2, 3, 4, 5]

    def test_bad_magic(self, tmp_path):
        from flowdet.io import load_tensor

        path = tmp_path / "bad.tnsr"
        path.write_bytes(b"JUNK" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_tensor(path)
