"""QTS binary tensor files.

Layout: magic "QTS1", one dtype byte (0=f32, 1=f64, 2=u8), one ndim byte,
ndim little-endian u32 extents, then the row-major little-endian payload.
Used for weights, samples and checkpoints; round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"QTS1"
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_KIND_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


class QtsError(ValueError):
    """Malformed or mismatching QTS file."""


def write_qts(path, array):
    array = np.asarray(array)  # tobytes(order="C") below handles layout; keeps 0-d shape
    code = _KIND_TO_CODE.get(np.dtype(array.dtype))
    if code is None:
        raise QtsError(f"dtype {array.dtype} not representable in QTS (f32/f64/u8 only)")
    if array.ndim > 255:
        raise QtsError("too many dimensions")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", code, array.ndim))
        for extent in array.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(array.astype(_CODE_TO_DTYPE[code], copy=False).tobytes(order="C"))
    return path


def read_qts(path, expect_dtype=None):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing QTS file {path}")
    raw = path.read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise QtsError(f"{path}: bad magic, not a QTS file")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _CODE_TO_DTYPE:
        raise QtsError(f"{path}: unknown dtype byte {code}")
    dtype = _CODE_TO_DTYPE[code]
    header_end = 6 + 4 * ndim
    if len(raw) < header_end:
        raise QtsError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 6) if ndim else ()
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = raw[header_end:]
    if len(payload) != count * dtype.itemsize:
        raise QtsError(f"{path}: payload size {len(payload)} != {count} x {dtype.itemsize}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if expect_dtype is not None and arr.dtype != np.dtype(expect_dtype):
        raise QtsError(f"{path}: dtype {arr.dtype} where {np.dtype(expect_dtype)} expected")
    return arr
