"""Finite-difference verification of analytic gradients.

Central differences in f64 with a relative step; the numeric side never
touches the tape, so it stays independent of the reverse-mode path it checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: float = 0.0
    per_input: list = field(default_factory=list)  # (name, max rel err)

    @property
    def passed(self):
        return bool(self.max_rel_err <= self.tol)

    def __str__(self):
        lines = [f"grad check: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}) -> "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.per_input:
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def _rel_err(a, n):
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(fn, inputs, tol=1e-6, rel_step=1e-5, names=None):
    """Compare reverse-mode gradients of scalar fn(*inputs) to central differences.

    fn maps Tensors to a scalar Tensor. Every input is promoted to an f64
    leaf; the report carries the max relative error over all elements of all
    inputs, with rel err |a-n| / max(1, |a|, |n|).
    """
    leaves = [Tensor(np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64),
                     requires_grad=True) for t in inputs]
    if names is None:
        names = [f"input{i}" for i in range(len(leaves))]

    with Tape() as tape:
        loss = fn(*leaves)
    backward(loss)
    del tape

    analytic = []
    for leaf in leaves:
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        analytic.append(np.array(g, dtype=np.float64))

    def eval_loss():
        out = fn(*[Tensor(leaf.data) for leaf in leaves])
        if out.data.shape != ():
            raise ValueError("grad_check needs a scalar-valued fn")
        return float(out.data)

    report = GradCheckReport(tol=float(tol))
    for leaf, ana, name in zip(leaves, analytic, names):
        flat = leaf.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            f_plus = eval_loss()
            flat[i] = orig - h
            f_minus = eval_loss()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
        err = float(_rel_err(ana.reshape(-1), numeric).max()) if flat.size else 0.0
        report.per_input.append((name, err))
        report.max_rel_err = max(report.max_rel_err, err)
    return report
