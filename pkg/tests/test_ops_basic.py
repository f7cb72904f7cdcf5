"""Forward-contract unit tests for every tensor primitive."""

import numpy as np
import pytest

from qpmseg import ops
from qpmseg.tensor import ShapeError, Tensor


def T(data, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype))


class TestConv2d:
    def test_all_ones_2x2_kernel_sums_window(self):
        x = T(np.ones((1, 1, 3, 3)))
        w = T(np.ones((1, 1, 2, 2)))
        b = T(np.zeros(1))
        out = ops.conv2d(x, w, b, stride=1, padding=0)
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_identity_1x1_kernel_is_bitwise_identity(self):
        rng = np.random.default_rng(3)
        x = T(rng.normal(size=(2, 1, 5, 7)))
        w = T(np.ones((1, 1, 1, 1)))
        b = T(np.zeros(1))
        out = ops.conv2d(x, w, b)
        assert np.array_equal(out.data, x.data)  # exact, not approx

    def test_output_extent_formula(self):
        x = T(np.zeros((1, 2, 11, 9)))
        w = T(np.zeros((4, 2, 3, 3)))
        out = ops.conv2d(x, w, None, stride=2, padding=1)
        assert out.shape == (1, 4, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ops.conv2d(T(np.zeros((1, 3, 4, 4))), T(np.zeros((2, 2, 3, 3))), None)

    def test_non_positive_extent_raises(self):
        with pytest.raises(ShapeError):
            ops.conv2d(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 3, 3))), None, stride=1, padding=0)

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = ops.conv2d(T(x), T(w), T(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        patch = xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                        expected[n, o, i, j] = (patch * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, expected, rtol=1e-12)


class TestConvTranspose2d:
    def test_single_pixel_broadcasts_through_kernel(self):
        x = T(np.full((1, 1, 1, 1), 2.5))
        w = T(np.ones((1, 1, 2, 2)))
        out = ops.conv_transpose2d(x, w, stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))

    def test_shape_doubles(self):
        x = T(np.zeros((1, 8, 16, 16)))
        w = T(np.zeros((8, 4, 2, 2)))
        assert ops.conv_transpose2d(x, w).shape == (1, 4, 32, 32)

    def test_is_adjoint_of_strided_conv(self):
        # <conv(y), x> == <y, conv_T(x)> with the same weight buffer
        rng = np.random.default_rng(5)
        y = rng.normal(size=(2, 3, 8, 8))
        x = rng.normal(size=(2, 5, 4, 4))
        w = rng.normal(size=(5, 3, 2, 2))  # conv: 3 -> 5 channels, transpose: 5 -> 3
        conv_y = ops.conv2d(T(y), T(w), None, stride=2, padding=0).data
        t_x = ops.conv_transpose2d(T(x), T(w), stride=2).data
        np.testing.assert_allclose((conv_y * x).sum(), (y * t_x).sum(), rtol=1e-12)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ops.conv_transpose2d(T(np.zeros((1, 3, 4, 4))), T(np.zeros((2, 2, 2, 2))))


class TestDownsample:
    def test_even_extent_halves(self):
        x = T(np.zeros((1, 2, 64, 64)))
        w = T(np.zeros((2, 2, 2, 2)))
        assert ops.downsample_stride2(x, w).shape == (1, 2, 32, 32)

    def test_odd_extent_floors(self):
        x = T(np.zeros((1, 1, 63, 63)))
        w = T(np.zeros((1, 1, 2, 2)))
        assert ops.downsample_stride2(x, w).shape == (1, 1, 31, 31)

    def test_tiny_extent_raises(self):
        with pytest.raises(ShapeError):
            ops.downsample_stride2(T(np.zeros((1, 1, 1, 4))), T(np.zeros((1, 1, 2, 2))))


class TestNorms:
    def test_instance_norm_constant_plane_is_zero(self):
        x = T(np.full((1, 2, 4, 4), 7.0))
        out = ops.instance_norm(x, T(np.ones(2)), T(np.zeros(2)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_instance_norm_two_point_standardization(self):
        x = T(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        out = ops.instance_norm(x, T(np.ones(1)), T(np.zeros(1)), eps=1e-15)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-6)

    def test_instance_norm_moments(self):
        rng = np.random.default_rng(7)
        x = T(rng.normal(2.0, 3.0, size=(2, 3, 8, 8)))
        out = ops.instance_norm(x, T(np.ones(3)), T(np.zeros(3))).data
        np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(2, 3)), 1.0, atol=1e-4)

    def test_layer_norm_constant_row_zero_and_two_point(self):
        x = T(np.array([[5.0, 5.0, 5.0], [0.0, 2.0, 1.0]]))
        out = ops.layer_norm(x, T(np.ones(3)), T(np.zeros(3)), eps=1e-15).data
        np.testing.assert_allclose(out[0], 0.0, atol=1e-6)
        row = ops.layer_norm(T(np.array([[0.0, 2.0]])), T(np.ones(2)), T(np.zeros(2)), eps=1e-15).data
        np.testing.assert_allclose(row, [[-1.0, 1.0]], atol=1e-6)

    def test_affine_applied_after(self):
        x = T(np.array([[0.0, 2.0]]))
        out = ops.layer_norm(x, T(np.array([2.0, 2.0])), T(np.array([1.0, 1.0])), eps=1e-15).data
        np.testing.assert_allclose(out, [[-1.0, 3.0]], atol=1e-6)


class TestActivations:
    def test_leaky_relu_values(self):
        x = T(np.array([5.0, -2.0, 0.0]))
        out = ops.leaky_relu(x, slope=0.01)
        np.testing.assert_allclose(out.data, [5.0, -0.02, 0.0])

    def test_sigmoid_values(self):
        x = T(np.array([0.0, 800.0, -800.0]))
        out = ops.sigmoid(x).data
        np.testing.assert_allclose(out, [0.5, 1.0, 0.0], atol=1e-12)
        assert np.all(np.isfinite(out))

    def test_softmax_uniform_and_log2(self):
        np.testing.assert_allclose(
            ops.softmax(T(np.zeros(3))).data, [1 / 3, 1 / 3, 1 / 3], atol=1e-12
        )
        np.testing.assert_allclose(
            ops.softmax(T(np.array([np.log(2.0), 0.0]))).data, [2 / 3, 1 / 3], atol=1e-12
        )

    def test_softmax_rows_sum_to_one_strictly_positive(self):
        rng = np.random.default_rng(9)
        x = T(rng.normal(scale=40.0, size=(6, 11)))
        y = ops.softmax(x, axis=-1).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(y > 0.0)

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(3, 5))
        np.testing.assert_allclose(
            ops.log_softmax(T(x)).data, np.log(ops.softmax(T(x)).data), atol=1e-12
        )


class TestAlgebraAndStructure:
    def test_add_mul_identity_and_zero(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(ops.add(T(x), T(np.zeros_like(x))).data, x)
        np.testing.assert_array_equal(ops.mul(T(x), T(np.ones_like(x))).data, x)
        np.testing.assert_array_equal(ops.scale(T(x), 1.0).data, x)

    def test_shape_mismatch_is_hard_error(self):
        with pytest.raises(ShapeError):
            ops.add(T(np.zeros((2, 3))), T(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            ops.mul(T(np.zeros(3)), T(np.zeros(4)))

    def test_mixed_dtype_is_hard_error(self):
        with pytest.raises(ShapeError):
            ops.add(T(np.zeros(3), np.float32), T(np.zeros(3), np.float64))

    def test_matmul_identity(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 4))
        np.testing.assert_allclose(ops.matmul(T(a), T(np.eye(4))).data, a, rtol=1e-12)

    def test_matmul_batched_shape_and_mismatch(self):
        a = T(np.zeros((2, 3, 4)))
        b = T(np.zeros((2, 4, 5)))
        assert ops.matmul(a, b).shape == (2, 3, 5)
        with pytest.raises(ShapeError):
            ops.matmul(a, T(np.zeros((3, 4, 5))))

    def test_concat_and_narrow_roundtrip(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
        cat = ops.concat([T(a), T(b)], axis=1)
        assert cat.shape == (2, 5)
        np.testing.assert_array_equal(ops.narrow(cat, 1, 0, 3).data, a)
        np.testing.assert_array_equal(ops.narrow(cat, 1, 3, 2).data, b)

    def test_sum_all_and_mean_all(self):
        x = T(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert ops.sum_all(x).item() == 15.0
        assert ops.mean_all(x).item() == 2.5
        assert ops.sum_all(x).shape == ()
