"""Standard gradient-verification battery: every primitive plus composite blocks.

All checks run in f64 against central finite differences. Primitives are held
to a tighter tolerance than composite graphs, whose longer chains accumulate
more roundoff.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .gradcheck import grad_check
from .losses import deep_sup_loss
from .model import ModelConfig, build_model
from .tensor import Tensor

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4

_VERIFY_CFG = ModelConfig(n_stages=3, widths=(4, 6, 8), blocks_per_stage=1,
                          fusion_stage=1, mha_heads=2, seed=1234)


def _r(*shape, seed=0, loc=0.0, scale=1.0):
    return np.random.default_rng(seed).normal(loc, scale, size=shape)


def _primitive_cases():
    mixer66 = Tensor(_r(6, 6, seed=90))
    cases = [
        ("add", lambda a, b: ops.sum_all(ops.mul(ops.add(a, b), ops.add(a, b))),
         [_r(3, 4, seed=1), _r(3, 4, seed=2)]),
        ("mul", lambda a, b: ops.sum_all(ops.mul(a, b)), [_r(5, seed=3), _r(5, seed=4)]),
        ("div", lambda a, b: ops.sum_all(ops.div(a, b)), [_r(4, seed=5), _r(4, seed=6) + 3.0]),
        ("scale_shift", lambda a: ops.sum_all(ops.shift(ops.scale(a, -1.7), 0.4)),
         [_r(3, 3, seed=7)]),
        ("leaky_relu", lambda a: ops.sum_all(ops.leaky_relu(a, 0.01)),
         [np.where(np.abs(_r(4, 4, seed=8)) < 0.2, 0.7, _r(4, 4, seed=8))]),
        ("sigmoid", lambda a: ops.sum_all(ops.mul(ops.sigmoid(a), ops.sigmoid(a))),
         [_r(3, 3, seed=9)]),
        ("softmax", lambda a: ops.sum_all(ops.mul(ops.softmax(a, axis=-1), mixer66)),
         [_r(6, 6, seed=10)]),
        ("log_softmax", lambda a: ops.sum_all(ops.mul(ops.log_softmax(a, axis=-1), mixer66)),
         [_r(6, 6, seed=11)]),
        ("matmul", lambda a, b: ops.sum_all(ops.matmul(a, b)),
         [_r(3, 4, seed=12), _r(4, 2, seed=13)]),
        ("matmul_batched", lambda a, b: ops.sum_all(ops.mul(ops.matmul(a, b), Tensor(_r(2, 3, 3, seed=16)))),
         [_r(2, 3, 4, seed=14), _r(2, 4, 3, seed=15)]),
        ("concat_narrow", lambda a, b: ops.sum_all(
            ops.mul(ops.narrow(ops.concat([a, b], axis=1), 1, 1, 3),
                    ops.narrow(ops.concat([a, b], axis=1), 1, 2, 3))),
         [_r(2, 3, seed=17), _r(2, 2, seed=18)]),
        ("reshape_transpose", lambda a: ops.sum_all(
            ops.mul(ops.reshape(ops.transpose(a, (1, 0)), (12,)), Tensor(_r(12, seed=19)))),
         [_r(3, 4, seed=20)]),
        ("conv2d_3x3", lambda x, w, b: ops.sum_all(
            ops.mul(ops.conv2d(x, w, b, 1, 1), ops.conv2d(x, w, b, 1, 1))),
         [_r(1, 2, 5, 5, seed=21), _r(3, 2, 3, 3, seed=22), _r(3, seed=23)]),
        ("conv2d_1x1", lambda x, w, b: ops.sum_all(ops.mul(ops.conv2d(x, w, b), Tensor(_r(1, 4, 4, 4, seed=27)))),
         [_r(1, 3, 4, 4, seed=24), _r(4, 3, 1, 1, seed=25), _r(4, seed=26)]),
        ("conv2d_stride2", lambda x, w, b: ops.sum_all(ops.conv2d(x, w, b, 2, 1)),
         [_r(2, 2, 6, 6, seed=28), _r(2, 2, 3, 3, seed=29), _r(2, seed=30)]),
        ("downsample_stride2", lambda x, w, b: ops.sum_all(ops.downsample_stride2(x, w, b)),
         [_r(1, 2, 8, 8, seed=31), _r(3, 2, 2, 2, seed=32), _r(3, seed=33)]),
        ("conv_transpose2d", lambda x, w: ops.sum_all(
            ops.mul(ops.conv_transpose2d(x, w), Tensor(_r(1, 2, 6, 6, seed=36)))),
         [_r(1, 3, 3, 3, seed=34), _r(3, 2, 2, 2, seed=35)]),
        ("instance_norm", lambda x, g, b: ops.sum_all(
            ops.mul(ops.instance_norm(x, g, b), Tensor(_r(1, 2, 4, 4, seed=40)))),
         [_r(1, 2, 4, 4, seed=37, loc=1.0, scale=2.0), _r(2, seed=38) + 1.5, _r(2, seed=39)]),
        ("layer_norm", lambda x, g, b: ops.sum_all(
            ops.mul(ops.layer_norm(x, g, b), Tensor(_r(5, 6, seed=44)))),
         [_r(5, 6, seed=41, scale=2.0), _r(6, seed=42) + 1.5, _r(6, seed=43)]),
    ]
    return cases


def _composite_cases():
    fuse_model = build_model(_VERIFY_CFG, dtype="f64")
    c = _VERIFY_CFG.widths[_VERIFY_CFG.fusion_stage]
    # the residual-branch weights are zero-initialized; give them generic
    # values so the check exercises the whole block
    fuse_model.params["fuse.o.w"].data = _r(c, c, 1, 1, seed=56) * 0.3
    fuse_model.params["fuse.mlp2.w"].data = _r(c, 4 * c, 1, 1, seed=57) * 0.3
    fuse_mixer = Tensor(_r(1, c, 4, 4, seed=52))

    def fusion_block(a, p):
        return ops.sum_all(ops.mul(fuse_model.fuse(a, p), fuse_mixer))

    stage_model = build_model(_VERIFY_CFG, dtype="f64")

    def encoder_stage(x):
        f = stage_model._stage("enc_a", 1, x)
        return ops.sum_all(ops.mul(f, f))

    loss_model = build_model(_VERIFY_CFG, dtype="f64")
    mask = (np.random.default_rng(60).random((1, 16, 16)) > 0.5).astype(np.uint8)

    def net_loss(a, p):
        return deep_sup_loss(loss_model.forward(a, p), mask).total

    return [
        ("mha_fusion_block", fusion_block,
         [_r(1, c, 4, 4, seed=50), _r(1, c, 4, 4, seed=51)]),
        ("encoder_stage", encoder_stage, [_r(1, 4, 8, 8, seed=53)]),
        ("dice_ce_through_net", net_loss,
         [_r(1, 4, 16, 16, seed=54), _r(1, 1, 16, 16, seed=55)]),
    ]


def run_battery(primitive_tol=PRIMITIVE_TOL, composite_tol=COMPOSITE_TOL, log=None):
    """Run every check; returns (all_passed, [(name, kind, max_rel_err, tol, ok)])."""
    results = []
    for name, fn, arrays in _primitive_cases():
        rep = grad_check(fn, [Tensor(a) for a in arrays], tol=primitive_tol)
        results.append((name, "primitive", rep.max_rel_err, primitive_tol, rep.passed))
    for name, fn, arrays in _composite_cases():
        rep = grad_check(fn, [Tensor(a) for a in arrays], tol=composite_tol)
        results.append((name, "composite", rep.max_rel_err, composite_tol, rep.passed))
    ok = all(r[4] for r in results)
    if log is not None:
        for name, kind, err, tol, passed in results:
            log(f"{'PASS' if passed else 'FAIL'}  {name:<22s} ({kind})  "
                f"max rel err {err:.3e}  tol {tol:.1e}")
    return ok, results
