"""Tour of the reverse-mode tensor engine.

Builds a few graphs by hand, runs backward, and cross-checks every primitive
against central finite differences.
"""

import numpy as np

from qpmseg import Tape, Tensor, backward, grad_check
from qpmseg import ops
from qpmseg.verify import run_battery

# --- a scalar chain: loss = sum((x*w)^2)/2 ----------------------------------

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="x")
w = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="w")

with Tape() as tape:
    prod = ops.mul(x, w)
    loss = ops.scale(ops.sum_all(ops.mul(prod, prod)), 0.5)
backward(loss)

print("loss:", loss.item())
print("dloss/dx == w^2 x ?", np.allclose(x.grad, w.data**2 * x.data))

# grads accumulate until cleared, and a tape refuses to run twice
try:
    backward(loss)
except RuntimeError as exc:
    print("second backward correctly refused:", exc)

# --- a conv block, checked against finite differences ------------------------

xin = rng.normal(size=(1, 2, 6, 6))
kernel = rng.normal(size=(4, 2, 3, 3))
bias = rng.normal(size=4)
gamma, beta = rng.normal(size=4) + 1.5, rng.normal(size=4)


def conv_block(x, w, b, g, be):
    h = ops.conv2d(x, w, b, stride=1, padding=1)
    h = ops.instance_norm(h, g, be)
    return ops.sum_all(ops.leaky_relu(h, 0.01))


report = grad_check(conv_block, [Tensor(a) for a in (xin, kernel, bias, gamma, beta)],
                    tol=1e-6, names=["x", "w", "b", "gamma", "beta"])
print("\nconv -> instance norm -> leaky relu")
print(report)

# --- the full battery the CLI `gradcheck` command runs -----------------------

print("\nfull battery (primitives at 1e-6, composite blocks at 1e-4):")
ok, _ = run_battery(log=print)
print("battery:", "PASS" if ok else "FAIL")
