"""nnU-Net-style training loop: SGD + Nesterov momentum under a poly LR schedule."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    augment as augment_sample,
    fit_norm_stats,
    normalize_angles,
    normalize_phase,
    random_patch,
    select_angles,
)
from .evaluate import dice as dice_metric, predict_mask
from .losses import deep_sup_loss
from .model import ConfigError, save_checkpoint
from .tensor import Tape, Tensor, backward


class TrainError(RuntimeError):
    """Runtime failure during optimization (non-finite loss, bad inputs)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    patch_size: int = 64
    lr0: float = 0.01
    momentum: float = 0.99       # Nesterov
    poly_exponent: float = 0.9
    augment: bool = True
    seed: int = 0
    dtype: str = "f32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError("dtype must be f32 or f64")

    def to_kv(self):
        return OrderedDict(
            epochs=str(self.epochs),
            batch_size=str(self.batch_size),
            patch_size=str(self.patch_size),
            lr0=repr(float(self.lr0)),
            momentum=repr(float(self.momentum)),
            poly_exponent=repr(float(self.poly_exponent)),
            augment="true" if self.augment else "false",
            seed=str(self.seed),
            dtype=self.dtype,
        )

    @classmethod
    def from_kv(cls, kv):
        known = set(cls().to_kv())
        unknown = set(kv) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        base = {}
        for key in ("epochs", "batch_size", "patch_size", "seed"):
            if key in kv:
                base[key] = int(kv[key])
        for key in ("lr0", "momentum", "poly_exponent"):
            if key in kv:
                base[key] = float(kv[key])
        if "augment" in kv:
            base["augment"] = kv["augment"].lower() in ("1", "true")
        if "dtype" in kv:
            base["dtype"] = kv["dtype"]
        return cls(**base)


def poly_lr(epoch, cfg):
    """lr0 * (1 - epoch/epochs) ** exponent; reaches 0 at epoch == epochs."""
    frac = 1.0 - epoch / cfg.epochs
    return cfg.lr0 * frac**cfg.poly_exponent


class SgdNesterov:
    """v <- mu*v + g ; p <- p - lr*(g + mu*v). mu = 0 is plain SGD."""

    def __init__(self, params, momentum=0.99):
        self.params = params
        self.momentum = float(momentum)
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr):
        mu = self.momentum
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            v = self.velocity[name]
            v *= mu
            v += g
            p.data = p.data - lr * (g + mu * v)


def sgd_nesterov_step(params, lr, momentum, velocity=None):
    """One functional update step; returns the velocity state for chaining."""
    if velocity is None:
        velocity = {k: np.zeros_like(t.data) for k, t in params.items()}
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        v = velocity[name]
        v *= momentum
        v += g
        p.data = p.data - lr * (g + momentum * v)
    return velocity


def _batch_arrays(samples, stats, model, cfg, rng_stream):
    """Augment, crop, normalize, and stack one batch in the model dtype."""
    np_dtype = np.float32 if model.dtype == "f32" else np.float64
    angle_list, phase_list, mask_list = [], [], []
    for j, s in enumerate(samples):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, *rng_stream, j]))
        if cfg.augment:
            s = augment_sample(s, rng)
        s = random_patch(s, min(cfg.patch_size, s.height, s.width), rng)
        a = select_angles(normalize_angles(s.angles, stats), model.cfg.angle_channel_mask)
        p = normalize_phase(s.phase, stats)
        angle_list.append(a.data.astype(np_dtype))
        phase_list.append(p.data.astype(np_dtype))
        mask_list.append(s.mask.data)
    return (
        Tensor(np.stack(angle_list)),
        Tensor(np.stack(phase_list)),
        np.stack(mask_list),
    )


def train_dice(model, samples, stats):
    """Mean full-resolution Dice of argmax predictions over the given samples."""
    scores = [dice_metric(predict_mask(model, s, stats), s.mask) for s in samples]
    return float(np.mean(scores))


HISTORY_COLUMNS = ("epoch", "lr", "loss_total", "loss_dice", "loss_ce", "train_dice")


def write_history_csv(path, rows):
    lines = [",".join(HISTORY_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in HISTORY_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")
    return path


def train(model, train_samples, cfg, out_dir=None, stats=None, log=None):
    """Optimize the model on the training split; returns (norm stats, history rows).

    Normalization statistics are fit on the provided training samples only
    (pass precomputed `stats` to reuse them). With `out_dir` set, writes
    history.csv, norm_stats.txt and best/final checkpoints.
    """
    if not train_samples:
        raise TrainError("empty training set")
    if cfg.dtype != model.dtype:
        raise TrainError(f"train dtype {cfg.dtype} != model dtype {model.dtype}")
    if stats is None:
        stats = fit_norm_stats(train_samples)
    opt = SgdNesterov(model.parameters(), momentum=cfg.momentum)
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA11CE]))
    n = len(train_samples)
    history = []
    best_dice = -1.0

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stats.save(out_dir / "norm_stats.txt")

    step = 0
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg)
        perm = order_rng.permutation(n)
        ep_total, ep_dice, ep_ce, n_batches = 0.0, 0.0, 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch = [train_samples[i] for i in perm[start : start + cfg.batch_size]]
            angles, phase, masks = _batch_arrays(batch, stats, model, cfg, (epoch, step))
            with Tape() as tape:
                outputs = model.forward(angles, phase)
                loss = deep_sup_loss(outputs, masks)
            total = float(loss.total.data)
            if not np.isfinite(total):
                raise TrainError(
                    f"non-finite loss {total} at epoch {epoch}, step {step} "
                    f"(dice {loss.dice}, ce {loss.ce}); aborting")
            backward(loss.total)
            opt.step(lr)
            model.zero_grads()
            tape.reset()
            ep_total += total
            ep_dice += loss.dice
            ep_ce += loss.ce
            n_batches += 1
            step += 1
        td = train_dice(model, train_samples, stats)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": ep_total / n_batches,
            "loss_dice": ep_dice / n_batches,
            "loss_ce": ep_ce / n_batches,
            "train_dice": td,
        }
        history.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  lr {lr:.5f}  loss {row['loss_total']:.4f}  "
                f"train dice {td:.4f}")
        if out_dir is not None and td > best_dice:
            ckpt = save_checkpoint(model, out_dir / "checkpoint_best")
            stats.save(ckpt / "norm_stats.txt")  # checkpoints are self-contained
        best_dice = max(best_dice, td)

    if out_dir is not None:
        ckpt = save_checkpoint(model, out_dir / "checkpoint_final")
        stats.save(ckpt / "norm_stats.txt")
        write_history_csv(out_dir / "history.csv", history)
    return stats, history
