"""Optimizer, schedule, and training-loop contracts (desk-scale)."""

import numpy as np
import pytest

from qpmseg.model import ModelConfig, build_model
from qpmseg.synth import synth_generate
from qpmseg.tensor import Tensor
from qpmseg.train import (
    SgdNesterov,
    TrainConfig,
    TrainError,
    poly_lr,
    train,
    write_history_csv,
)

TINY_MODEL = ModelConfig(n_stages=3, widths=(4, 6, 8), blocks_per_stage=1, fusion_stage=1,
                         mha_heads=2, seed=3)


def tiny_dataset(n=4, size=32, seed=5, phase_snr=4.0):
    return synth_generate(seed, n, size, size, "med", phase_snr=phase_snr)


class TestPolyLr:
    def test_epoch_zero_gives_lr0(self):
        cfg = TrainConfig(epochs=10, lr0=0.02)
        assert poly_lr(0, cfg) == 0.02

    def test_final_epoch_gives_zero(self):
        cfg = TrainConfig(epochs=10, lr0=0.02)
        assert poly_lr(10, cfg) == 0.0

    def test_midpoint_matches_formula(self):
        cfg = TrainConfig(epochs=50, lr0=0.01)
        np.testing.assert_allclose(poly_lr(25, cfg), 0.01 * (1 - 25 / 50) ** 0.9, rtol=1e-15)


class TestSgdNesterov:
    def _params(self, value):
        return {"p": Tensor(np.array([value]), requires_grad=True)}

    def test_zero_gradient_leaves_parameters_unchanged(self):
        params = self._params(1.5)
        opt = SgdNesterov(params, momentum=0.99)
        params["p"].grad = np.zeros(1)
        opt.step(0.1)
        np.testing.assert_array_equal(params["p"].data, [1.5])
        params["p"].grad = None
        opt.step(0.1)
        np.testing.assert_array_equal(params["p"].data, [1.5])

    def test_momentum_zero_is_vanilla_sgd(self):
        params = self._params(2.0)
        opt = SgdNesterov(params, momentum=0.0)
        params["p"].grad = np.array([0.5])
        opt.step(0.1)
        np.testing.assert_allclose(params["p"].data, [2.0 - 0.1 * 0.5])

    def test_two_steps_match_hand_recursion_on_quadratic(self):
        # f(p) = p^2/2, g = p, lr = 0.1, mu = 0.9, p0 = 1:
        #   v1 = 1,     p1 = 1 - 0.1(1 + 0.9*1)        = 0.81
        #   v2 = 1.71,  p2 = 0.81 - 0.1(0.81 + 0.9*1.71) = 0.5751
        params = self._params(1.0)
        opt = SgdNesterov(params, momentum=0.9)
        for expected in (0.81, 0.5751):
            params["p"].grad = params["p"].data.copy()
            opt.step(0.1)
            np.testing.assert_allclose(params["p"].data, [expected], rtol=1e-12)


class TestTrainLoop:
    def test_zero_lr_leaves_parameters_bitwise_unchanged(self):
        model = build_model(TINY_MODEL, dtype="f32")
        before = {k: t.data.copy() for k, t in model.params.items()}
        cfg = TrainConfig(epochs=1, batch_size=2, patch_size=32, lr0=0.0, seed=1)
        train(model, tiny_dataset(), cfg)
        for k, t in model.params.items():
            assert np.array_equal(t.data, before[k]), k

    def test_loss_decreases_with_smoothing_window_3(self):
        model = build_model(TINY_MODEL, dtype="f32")
        cfg = TrainConfig(epochs=10, batch_size=2, patch_size=32, lr0=0.05,
                          augment=False, seed=2)
        _, history = train(model, tiny_dataset(), cfg)
        losses = np.array([row["loss_total"] for row in history])
        smoothed = np.convolve(losses, np.ones(3) / 3, mode="valid")
        assert smoothed[-1] < smoothed[0]
        assert np.all(np.diff(smoothed) < 0.05)  # monotone up to small jitter

    def test_deterministic_history_f64(self):
        histories, params = [], []
        for _ in range(2):
            model = build_model(TINY_MODEL, dtype="f64")
            cfg = TrainConfig(epochs=2, batch_size=2, patch_size=32, lr0=0.01,
                              seed=7, dtype="f64")
            _, history = train(model, tiny_dataset(), cfg)
            histories.append(history)
            params.append({k: t.data.copy() for k, t in model.params.items()})
        assert histories[0] == histories[1]  # bitwise float equality
        for k in params[0]:
            assert np.array_equal(params[0][k], params[1][k]), k

    def test_nan_loss_aborts_with_diagnostic(self):
        model = build_model(TINY_MODEL, dtype="f32")
        model.params["enc_a.s0.b0.conv.w"].data[:] = np.nan
        cfg = TrainConfig(epochs=1, batch_size=2, patch_size=32, lr0=0.01, seed=3)
        with pytest.raises((TrainError, FloatingPointError)):
            train(model, tiny_dataset(), cfg)

    def test_dtype_mismatch_rejected(self):
        model = build_model(TINY_MODEL, dtype="f32")
        with pytest.raises(TrainError):
            train(model, tiny_dataset(), TrainConfig(dtype="f64"))

    def test_outputs_written(self, tmp_path):
        model = build_model(TINY_MODEL, dtype="f32")
        cfg = TrainConfig(epochs=2, batch_size=2, patch_size=32, lr0=0.02, seed=4)
        train(model, tiny_dataset(), cfg, out_dir=tmp_path / "run")
        assert (tmp_path / "run" / "history.csv").is_file()
        assert (tmp_path / "run" / "norm_stats.txt").is_file()
        assert (tmp_path / "run" / "checkpoint_final" / "manifest.txt").is_file()
        assert (tmp_path / "run" / "checkpoint_best" / "manifest.txt").is_file()
        header = (tmp_path / "run" / "history.csv").read_text().splitlines()[0]
        assert header == "epoch,lr,loss_total,loss_dice,loss_ce,train_dice"


class TestTrainConfig:
    def test_kv_roundtrip(self):
        cfg = TrainConfig(epochs=7, batch_size=3, patch_size=32, lr0=0.125,
                          momentum=0.5, poly_exponent=0.8, augment=False, seed=9, dtype="f64")
        assert TrainConfig.from_kv(cfg.to_kv()) == cfg

    def test_unknown_key_rejected(self):
        from qpmseg.model import ConfigError
        with pytest.raises(ConfigError):
            TrainConfig.from_kv({"learning_rate": "0.1"})

    def test_history_csv_roundtrip(self, tmp_path):
        rows = [
            {"epoch": 0, "lr": 0.01, "loss_total": 1.5, "loss_dice": 1.0,
             "loss_ce": 0.5, "train_dice": 0.25},
        ]
        path = write_history_csv(tmp_path / "history.csv", rows)
        lines = path.read_text().splitlines()
        vals = lines[1].split(",")
        assert int(vals[0]) == 0 and float(vals[2]) == 1.5
