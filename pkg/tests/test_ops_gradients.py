"""Finite-difference oracle checks for every differentiable primitive.

Each check builds a small random f64 graph, runs reverse mode, and compares
against central differences at rel. err <= 1e-6 (primitives). A corrupted
gradient serves as the negative control for the harness itself.
"""

import numpy as np
import pytest

from qpmseg import ops
from qpmseg.gradcheck import grad_check
from qpmseg.tensor import Tensor, record_op

TOL = 1e-6


def rand(*shape, seed=0, loc=0.0, scale=1.0):
    return np.random.default_rng(seed).normal(loc, scale, size=shape)


def check(fn, arrays, tol=TOL, names=None):
    report = grad_check(fn, [Tensor(a) for a in arrays], tol=tol, names=names)
    assert report.passed, str(report)
    return report


class TestElementwiseGradients:
    def test_add(self):
        check(lambda a, b: ops.sum_all(ops.mul(ops.add(a, b), ops.add(a, b))),
              [rand(3, 4, seed=1), rand(3, 4, seed=2)])

    def test_mul(self):
        check(lambda a, b: ops.sum_all(ops.mul(a, b)), [rand(5, seed=3), rand(5, seed=4)])

    def test_div(self):
        b = rand(4, seed=6) + 3.0  # keep denominators away from zero
        check(lambda a, bb: ops.sum_all(ops.div(a, bb)), [rand(4, seed=5), b])

    def test_scale_shift_sub(self):
        check(lambda a, b: ops.sum_all(ops.sub(ops.scale(a, -1.7), ops.shift(b, 0.3))),
              [rand(2, 3, seed=7), rand(2, 3, seed=8)])

    def test_leaky_relu_negative_side_slope(self):
        # inputs kept away from the kink at 0
        x = rand(4, 4, seed=9)
        x = np.where(np.abs(x) < 0.2, x + 0.5, x)
        report = check(lambda t: ops.sum_all(ops.leaky_relu(t, slope=0.01)), [x])
        assert report.max_rel_err <= TOL

    def test_sigmoid(self):
        check(lambda t: ops.sum_all(ops.mul(ops.sigmoid(t), ops.sigmoid(t))), [rand(3, 3, seed=10)])


class TestSoftmaxGradients:
    def test_softmax(self):
        w = rand(4, 6, seed=12)

        def fn(x):
            return ops.sum_all(ops.mul(ops.softmax(x, axis=-1), Tensor(w)))

        check(fn, [rand(4, 6, seed=11)])

    def test_log_softmax(self):
        w = rand(3, 5, seed=14)

        def fn(x):
            return ops.sum_all(ops.mul(ops.log_softmax(x, axis=-1), Tensor(w)))

        check(fn, [rand(3, 5, seed=13)])


class TestMatmulStructureGradients:
    def test_matmul(self):
        check(lambda a, b: ops.sum_all(ops.matmul(a, b)),
              [rand(3, 4, seed=15), rand(4, 2, seed=16)])

    def test_matmul_batched(self):
        w = rand(2, 3, 3, seed=19)

        def fn(a, b):
            return ops.sum_all(ops.mul(ops.matmul(a, b), Tensor(w)))

        check(fn, [rand(2, 3, 4, seed=17), rand(2, 4, 3, seed=18)])

    def test_concat_narrow_reshape_transpose(self):
        def fn(a, b):
            cat = ops.concat([a, b], axis=1)           # (2, 5)
            t = ops.transpose(cat, (1, 0))             # (5, 2)
            r = ops.reshape(t, (10,))
            return ops.sum_all(ops.mul(ops.narrow(r, 0, 2, 6), ops.narrow(r, 0, 3, 6)))

        check(fn, [rand(2, 3, seed=20), rand(2, 2, seed=21)])


class TestConvGradients:
    def test_conv2d_spec_instance(self):
        # N=1, Cin=2, Cout=3, H=W=5, k=3 as in the contract
        x = rand(1, 2, 5, 5, seed=22)
        w = rand(3, 2, 3, 3, seed=23)
        b = rand(3, seed=24)
        check(lambda xx, ww, bb: ops.sum_all(
            ops.mul(ops.conv2d(xx, ww, bb, stride=1, padding=1),
                    ops.conv2d(xx, ww, bb, stride=1, padding=1))),
              [x, w, b], names=["x", "w", "b"])

    def test_conv2d_strided(self):
        x = rand(2, 2, 6, 6, seed=25)
        w = rand(2, 2, 3, 3, seed=26)
        b = rand(2, seed=27)
        check(lambda xx, ww, bb: ops.sum_all(ops.conv2d(xx, ww, bb, stride=2, padding=1)),
              [x, w, b])

    def test_conv2d_1x1(self):
        x = rand(1, 3, 4, 4, seed=28)
        w = rand(5, 3, 1, 1, seed=29)
        b = rand(5, seed=30)
        weight = rand(1, 5, 4, 4, seed=31)

        def fn(xx, ww, bb):
            return ops.sum_all(ops.mul(ops.conv2d(xx, ww, bb), Tensor(weight)))

        check(fn, [x, w, b])

    def test_conv_transpose2d(self):
        x = rand(1, 3, 3, 3, seed=32)
        w = rand(3, 2, 2, 2, seed=33)
        mixer = rand(1, 2, 6, 6, seed=34)

        def fn(xx, ww):
            return ops.sum_all(ops.mul(ops.conv_transpose2d(xx, ww), Tensor(mixer)))

        check(fn, [x, w])

    def test_downsample_stride2(self):
        x = rand(1, 2, 8, 8, seed=35)
        w = rand(3, 2, 2, 2, seed=36)
        b = rand(3, seed=37)
        check(lambda xx, ww, bb: ops.sum_all(ops.downsample_stride2(xx, ww, bb)), [x, w, b])


class TestNormGradients:
    def test_instance_norm_spec_instance(self):
        x = rand(1, 2, 4, 4, seed=38, loc=1.5, scale=2.0)
        g = rand(2, seed=39) + 1.5
        b = rand(2, seed=40)
        mixer = rand(1, 2, 4, 4, seed=41)

        def fn(xx, gg, bb):
            return ops.sum_all(ops.mul(ops.instance_norm(xx, gg, bb), Tensor(mixer)))

        check(fn, [x, g, b], names=["x", "gamma", "beta"])

    def test_layer_norm(self):
        x = rand(6, 8, seed=42, scale=3.0)
        g = rand(8, seed=43) + 1.5
        b = rand(8, seed=44)
        mixer = rand(6, 8, seed=45)

        def fn(xx, gg, bb):
            return ops.sum_all(ops.mul(ops.layer_norm(xx, gg, bb), Tensor(mixer)))

        check(fn, [x, g, b])


class TestHarness:
    def test_linear_graph_error_near_machine_eps(self):
        report = grad_check(lambda x: ops.sum_all(ops.scale(x, 3.0)), [Tensor(rand(5, seed=46))], tol=TOL)
        assert report.passed
        assert report.max_rel_err < 1e-9

    def test_corrupted_gradient_is_detected(self):
        def bad_square(x):
            # deliberately wrong pull: claims d(x^2)/dx = 3x instead of 2x
            return record_op(x.data * x.data, [(x, lambda g: g * 3.0 * x.data)], name="bad_square")

        report = grad_check(lambda x: ops.sum_all(bad_square(x)),
                            [Tensor(rand(4, seed=47) + 2.0)], tol=TOL)
        assert not report.passed
