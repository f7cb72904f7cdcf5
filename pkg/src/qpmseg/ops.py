"""Differentiable primitives: convolutions, norms, activations, attention parts.

Every op validates shapes and dtypes up front (hard errors, no silent
broadcasting) and registers pull closures on the active tape. All forward
math runs on raw numpy arrays; outputs keep the input float dtype.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import FLOAT_DTYPES, ShapeError, record_op


def _require_float(*ts):
    dt = ts[0].data.dtype
    for t in ts:
        if t.data.dtype not in FLOAT_DTYPES:
            raise ShapeError(f"op requires float tensor, got {t.dtype}")
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes {ts[0].dtype} vs {t.dtype}")
    return dt


def _require_same_shape(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar algebra


def add(a, b):
    _require_float(a, b)
    _require_same_shape(a, b)
    return record_op(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)], name="add")


def mul(a, b):
    _require_float(a, b)
    _require_same_shape(a, b)
    return record_op(
        a.data * b.data,
        [(a, lambda g: g * b.data), (b, lambda g: g * a.data)],
        name="mul",
    )


def div(a, b):
    _require_float(a, b)
    _require_same_shape(a, b)
    inv = 1.0 / b.data
    return record_op(
        a.data * inv,
        [(a, lambda g: g * inv), (b, lambda g: -g * a.data * inv * inv)],
        name="div",
    )


def scale(x, c):
    """x * c for a python scalar c."""
    _require_float(x)
    c = float(c)
    return record_op(x.data * c, [(x, lambda g: g * c)], name="scale")


def shift(x, c):
    """x + c for a python scalar c."""
    _require_float(x)
    out = x.data + x.data.dtype.type(c)
    return record_op(out, [(x, lambda g: g)], name="shift")


def sub(a, b):
    _require_float(a, b)
    _require_same_shape(a, b)
    return record_op(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)], name="sub")


# ---------------------------------------------------------------------------
# structural ops


def reshape(x, shape):
    _require_float(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.data.shape
    return record_op(x.data.reshape(shape), [(x, lambda g: g.reshape(old))], name="reshape")


def transpose(x, axes):
    _require_float(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"bad permutation {axes} for ndim {x.ndim}")
    inv = tuple(int(i) for i in np.argsort(axes))
    return record_op(x.data.transpose(axes), [(x, lambda g: g.transpose(inv))], name="transpose")


def concat(xs, axis):
    if not xs:
        raise ShapeError("concat of zero tensors")
    _require_float(*xs)
    axis = int(axis)
    ref = list(xs[0].data.shape)
    for t in xs[1:]:
        s = list(t.data.shape)
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat shape mismatch {xs[0].shape} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in xs])

    def make_pull(i):
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return pull

    return record_op(out, [(t, make_pull(i)) for i, t in enumerate(xs)], name="concat")


def narrow(x, axis, start, length):
    """Contiguous slice along one axis (adjoint of concat)."""
    _require_float(x)
    axis, start, length = int(axis), int(start), int(length)
    if start < 0 or length < 1 or start + length > x.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range on axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    xshape = x.data.shape

    def pull(g):
        full = np.zeros(xshape, dtype=g.dtype)
        full[sl] = g
        return full

    return record_op(x.data[sl].copy(), [(x, pull)], name="narrow")


def sum_all(x):
    """Reduce every element to a scalar (shape ())."""
    _require_float(x)
    shape = x.data.shape
    return record_op(
        x.data.sum(dtype=x.data.dtype),
        [(x, lambda g: np.full(shape, g, dtype=g.dtype))],
        name="sum_all",
    )


def mean_all(x):
    return scale(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# activations


def leaky_relu(x, slope=0.01):
    _require_float(x)
    slope = float(slope)
    mask = x.data >= 0
    out = np.where(mask, x.data, x.data * slope)
    return record_op(out, [(x, lambda g: np.where(mask, g, g * slope))], name="leaky_relu")


def sigmoid(x):
    _require_float(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return record_op(out, [(x, lambda g: g * out * (1.0 - out))], name="sigmoid")


def softmax(x, axis=-1):
    _require_float(x)
    d = x.data
    y = np.exp(d - d.max(axis=axis, keepdims=True))
    y /= y.sum(axis=axis, keepdims=True)

    def pull(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return record_op(y, [(x, pull)], name="softmax")


def log_softmax(x, axis=-1):
    _require_float(x)
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def pull(g):
        return g - np.exp(y) * g.sum(axis=axis, keepdims=True)

    return record_op(y, [(x, pull)], name="log_softmax")


# ---------------------------------------------------------------------------
# matmul (2-d or batched with exactly matching batch dims)


def matmul(a, b):
    _require_float(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul needs equal ndim >= 2, got {a.shape} @ {b.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return record_op(
        out,
        [
            (a, lambda g: g @ bd.swapaxes(-1, -2)),
            (b, lambda g: ad.swapaxes(-1, -2) @ g),
        ],
        name="matmul",
    )


# ---------------------------------------------------------------------------
# convolutions


def _conv_out_extent(extent, k, stride, padding):
    return (extent + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-d cross-correlation over NCHW input with OIHW weights.

    Output extent: floor((H + 2p - kH) / stride) + 1. The bias add is the
    single sanctioned broadcast in the engine.
    """
    if b is None:
        _require_float(x, w)
    else:
        _require_float(x, w, b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d x and w, got {x.shape}, {w.shape}")
    stride, padding = int(stride), int(padding)
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d non-positive output extent {ho}x{wo} for input {h}x{wd}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: (n, cin, ho, wo, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    xpad_shape = xp.shape

    def pull_x(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        dwin = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
        dxp = np.zeros(xpad_shape, dtype=g.dtype)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u : u + (ho - 1) * stride + 1 : stride, v : v + (wo - 1) * stride + 1 : stride] += (
                    dwin[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                )
        if padding:
            return dxp[:, :, padding : padding + h, padding : padding + wd]
        return dxp

    def pull_w(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        return (gmat.T @ cols).reshape(cout, cin, kh, kw)

    pulls = [(x, pull_x), (w, pull_w)]
    if b is not None:
        pulls.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return record_op(np.ascontiguousarray(out), pulls, name="conv2d")


def downsample_stride2(x, w, b=None):
    """Strided 2x2 conv used for encoder downsampling.

    Kernel 2, stride 2, no padding is the one configuration that maps any
    extent to exactly floor(extent / 2).
    """
    if x.ndim != 4:
        raise ShapeError(f"downsample expects 4-d input, got {x.shape}")
    if w.data.shape[2:] != (2, 2):
        raise ShapeError(f"downsample kernel must be 2x2, got {w.shape}")
    if x.data.shape[2] < 2 or x.data.shape[3] < 2:
        raise ShapeError(f"cannot downsample spatial extent {x.data.shape[2:]} below 2")
    return conv2d(x, w, b, stride=2, padding=0)


def conv_transpose2d(x, w, stride=2):
    """Transposed conv, the adjoint of a stride-2 2x2 conv: exact 2x upsampling.

    Weights are (Cin, Cout, 2, 2); only the stride-2 / kernel-2 configuration
    the decoder uses is supported, where output windows never overlap.
    """
    _require_float(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d x and w, got {x.shape}, {w.shape}")
    if int(stride) != 2 or w.data.shape[2:] != (2, 2):
        raise ShapeError("conv_transpose2d supports only stride 2 with a 2x2 kernel")
    n, cin, h, wd = x.data.shape
    cin_w, cout, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {cin}, weight expects {cin_w}")

    xd, wdat = x.data, w.data
    out = np.empty((n, cout, 2 * h, 2 * wd), dtype=xd.dtype)
    for u in range(2):
        for v in range(2):
            out[:, :, u::2, v::2] = np.einsum("nchw,co->nohw", xd, wdat[:, :, u, v], optimize=True)

    def pull_x(g):
        gx = np.zeros_like(xd)
        for u in range(2):
            for v in range(2):
                gx += np.einsum("nohw,co->nchw", g[:, :, u::2, v::2], wdat[:, :, u, v], optimize=True)
        return gx

    def pull_w(g):
        gw = np.empty_like(wdat)
        for u in range(2):
            for v in range(2):
                gw[:, :, u, v] = np.einsum("nchw,nohw->co", xd, g[:, :, u::2, v::2], optimize=True)
        return gw

    return record_op(out, [(x, pull_x), (w, pull_w)], name="conv_transpose2d")


# ---------------------------------------------------------------------------
# normalizations


def instance_norm(x, gamma, beta, eps=1e-5):
    """Standardize each (n, c) plane over its spatial extent, then affine."""
    _require_float(x, gamma, beta)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects NCHW, got {x.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"instance_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    eps = float(eps)
    d = x.data
    mu = d.mean(axis=(2, 3), keepdims=True)
    var = d.var(axis=(2, 3), keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu) * istd
    gb = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gb + beta.data.reshape(1, c, 1, 1)

    def pull_x(g):
        dxhat = g * gb
        m1 = dxhat.mean(axis=(2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        return istd * (dxhat - m1 - xhat * m2)

    return record_op(
        out,
        [
            (x, pull_x),
            (gamma, lambda g: (g * xhat).sum(axis=(0, 2, 3))),
            (beta, lambda g: g.sum(axis=(0, 2, 3))),
        ],
        name="instance_norm",
    )


def layer_norm(x, gamma, beta, eps=1e-5):
    """Standardize over the last axis (channels of one token), then affine."""
    _require_float(x, gamma, beta)
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    eps = float(eps)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    var = d.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu) * istd
    out = xhat * gamma.data + beta.data
    red = tuple(range(d.ndim - 1))

    def pull_x(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return istd * (dxhat - m1 - xhat * m2)

    return record_op(
        out,
        [
            (x, pull_x),
            (gamma, lambda g: (g * xhat).sum(axis=red)),
            (beta, lambda g: g.sum(axis=red)),
        ],
        name="layer_norm",
    )
