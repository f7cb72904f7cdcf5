"""Reverse-mode differentiable tensors over numpy buffers.

The engine is deliberately small: a Tensor wraps a contiguous numpy array,
and a Tape records every differentiable op executed while it is active.
Backward walks the tape in reverse execution order (a valid reverse
topological order, since ops are recorded as they run) and accumulates
gradients into every participating tensor.

Supported dtypes are f32 (training), f64 (verification) and u8 (masks,
excluded from arithmetic). There is no broadcasting anywhere except the
bias add inside conv2d; shape or dtype mismatches raise immediately.
"""

from __future__ import annotations

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64, "u8": np.uint8}
_NP_TO_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64", np.dtype(np.uint8): "u8"}
FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Shape or dtype mismatch between operands."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, non-scalar loss, mixed tapes."""


def _as_np_dtype(dtype):
    if dtype is None:
        return None
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ShapeError(f"unknown dtype {dtype!r}, expected one of {sorted(DTYPES)}")
        return DTYPES[dtype]
    return np.dtype(dtype)


class Tensor:
    """N-dimensional numeric array, optionally recorded on a Tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, dtype=None, requires_grad=False, name=None):
        arr = np.asarray(data)
        want = _as_np_dtype(dtype)
        if want is not None and arr.dtype != want:
            arr = arr.astype(want)
        if np.dtype(arr.dtype) not in _NP_TO_NAME:
            # bare python lists of floats land here; default to f64
            if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.bool_):
                arr = arr.astype(np.float64)
            else:
                raise ShapeError(f"unsupported dtype {arr.dtype}")
        if requires_grad and arr.dtype not in FLOAT_DTYPES:
            raise ShapeError("only float tensors can require gradients")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return _NP_TO_NAME[self.data.dtype]

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def astype(self, dtype):
        """Detached copy in another dtype (never tracked)."""
        return Tensor(self.data.astype(_as_np_dtype(dtype)))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def check_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what} (shape {self.shape})")
        return self

    def __repr__(self):
        head = f"Tensor(shape={list(self.shape)}, dtype={self.dtype}"
        if self.requires_grad:
            head += ", requires_grad=True"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"


_ACTIVE_TAPES: list["Tape"] = []


def active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tape:
    """Execution-ordered record of differentiable ops for one forward pass.

    Every op executed while the tape is active appends one record:
    (output tensor, [(input tensor, pull fn), ...]) where each pull fn maps
    the output gradient to that input's gradient contribution. Execution
    order is a topological order of the graph, so a single reverse sweep
    visits every node exactly once.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, pulls):
        for inp, _ in pulls:
            if inp.tape is not None and inp.tape is not self:
                raise TapeError("input tensor belongs to a different tape")
        out.tape = self
        self._records.append((out, pulls))

    def backward(self, loss):
        if self._consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.data.shape != ():
            raise TapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self._consumed = True
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for out, pulls in reversed(self._records):
            g = out.grad
            if g is None:
                continue  # not on any path from the loss
            for inp, pull in pulls:
                contrib = pull(g)
                if contrib.shape != inp.data.shape:
                    raise ShapeError(
                        f"backward of {out.name or 'op'} produced gradient of shape "
                        f"{contrib.shape} for input of shape {inp.data.shape}"
                    )
                if inp.grad is None:
                    # contrib may be g itself or a view of it; it becomes an
                    # accumulation target, so it must own its buffer
                    if contrib is g or contrib.base is not None:
                        contrib = contrib.copy()
                    inp.grad = contrib
                else:
                    inp.grad += contrib
        return None

    def reset(self):
        self._records.clear()
        self._consumed = False


def backward(loss):
    """Run reverse-mode accumulation for a scalar loss recorded on a tape."""
    if loss.tape is None:
        raise TapeError("loss is not on any tape (was it computed inside `with Tape():`?)")
    loss.tape.backward(loss)


def record_op(data, pulls, name=None):
    """Wrap op output `data`; register pulls for tracked inputs on the active tape.

    pulls: list of (input Tensor, fn(grad_out_ndarray) -> grad_in_ndarray)
    covering every differentiable input. Pull fns for untracked inputs are
    dropped here so closures never outlive their usefulness.
    """
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t, _ in pulls):
        return Tensor(data)
    out = Tensor(data, requires_grad=True, name=name)
    tape.record(out, [(t, fn) for t, fn in pulls if t.requires_grad])
    return out
