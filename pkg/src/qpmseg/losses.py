"""Dice + cross-entropy segmentation losses with deep supervision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

DICE_EPS = 1e-5


def _target_tensor(target, logits):
    """Binary target as a constant (N, 1, H, W) tensor in the logits dtype."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.ndim != 3:
        raise ShapeError(f"target must be (N, H, W), got {t.shape}")
    n, _, h, w = logits.shape
    if t.shape != (n, h, w):
        raise ShapeError(f"target {t.shape} does not match logits {logits.shape}")
    vals = np.unique(t)
    if not np.isin(vals, (0, 1)).all():
        raise ShapeError(f"target must be binary, found values {vals[:5]}")
    return Tensor(t.reshape(n, 1, h, w).astype(logits.data.dtype))


def dice_loss(logits, target, eps=DICE_EPS):
    """Soft Dice on the foreground probability: 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps)."""
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"logits must be (N, 2, H, W), got {logits.shape}")
    t = _target_tensor(target, logits)
    p = ops.narrow(ops.softmax(logits, axis=1), 1, 1, 1)
    inter = ops.sum_all(ops.mul(p, t))
    denom = ops.shift(ops.sum_all(p), float(t.data.sum()) + eps)
    ratio = ops.div(ops.shift(ops.scale(inter, 2.0), eps), denom)
    return ops.shift(ops.scale(ratio, -1.0), 1.0)


def ce_loss(logits, target):
    """Pixel-mean two-class cross entropy."""
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"logits must be (N, 2, H, W), got {logits.shape}")
    t = _target_tensor(target, logits)
    one_minus_t = Tensor(1.0 - t.data)
    lsm = ops.log_softmax(logits, axis=1)
    fg = ops.narrow(lsm, 1, 1, 1)
    bg = ops.narrow(lsm, 1, 0, 1)
    picked = ops.add(ops.mul(fg, t), ops.mul(bg, one_minus_t))
    return ops.scale(ops.mean_all(picked), -1.0)


def downsample_target(target, factor):
    """Nearest-neighbor mask downsampling (top-left anchor); preserves binarity."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if factor == 1:
        return t
    return np.ascontiguousarray(t[:, ::factor, ::factor])


def deep_sup_weights(stages):
    """Loss weights proportional to 2^-s over the supervised stages, summing to 1."""
    raw = {s: 2.0 ** (-s) for s in stages}
    total = sum(raw.values())
    return {s: w / total for s, w in raw.items()}


@dataclass
class LossBreakdown:
    total: object  # scalar Tensor
    dice: float
    ce: float


def deep_sup_loss(outputs, target, eps=DICE_EPS):
    """Weighted sum over supervised scales of (dice + ce) against nearest-downsampled masks."""
    stages = outputs.stages()
    weights = deep_sup_weights(stages)
    total = None
    dice_part = 0.0
    ce_part = 0.0
    for s in stages:
        logits = outputs.logits[s]
        t_s = downsample_target(target, 2**s)
        d = dice_loss(logits, t_s, eps=eps)
        c = ce_loss(logits, t_s)
        term = ops.scale(ops.add(d, c), weights[s])
        total = term if total is None else ops.add(total, term)
        dice_part += weights[s] * float(d.data)
        ce_part += weights[s] * float(c.data)
    return LossBreakdown(total=total, dice=dice_part, ce=ce_part)
