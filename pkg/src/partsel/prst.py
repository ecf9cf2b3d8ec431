"""PRST binary tensor files.

Layout: magic b"PRST", format version (u32 LE), dtype code (1 byte: 0=f32,
1=f64), rank (u32 LE), one u32 LE extent per axis, then the raw little-endian
element data. Round-trips are bit-exact, which the checkpoint determinism
contract depends on.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PRST"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_MAX_RANK = 32


class PrstFormatError(IOError):
    """The file is not a well-formed PRST tensor."""


def write_prst(path, array):
    arr = np.asarray(array)
    if arr.ndim:  # ascontiguousarray would silently promote rank 0 to rank 1
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES_BY_KIND:
        raise PrstFormatError(f"{path}: unsupported dtype {arr.dtype}; PRST stores f32/f64 only")
    code = _CODES_BY_KIND[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<B", code))
        fh.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_prst(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise PrstFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    off = 4
    try:
        (version,) = struct.unpack_from("<I", blob, off)
        off += 4
        (code,) = struct.unpack_from("<B", blob, off)
        off += 1
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        if version != VERSION:
            raise PrstFormatError(f"{path}: unsupported format version {version}")
        if code not in _DTYPE_CODES:
            raise PrstFormatError(f"{path}: unknown dtype code {code}")
        if rank > _MAX_RANK:
            raise PrstFormatError(f"{path}: implausible rank {rank}")
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
    except struct.error as exc:
        raise PrstFormatError(f"{path}: truncated header ({exc})") from exc
    dtype = _DTYPE_CODES[code]
    count = 1
    for extent in shape:
        count *= extent
    expected = count * dtype.itemsize
    payload = blob[off:]
    if len(payload) != expected:
        raise PrstFormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    # frombuffer views are read-only; copy so callers own a mutable array
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return data.astype(data.dtype.newbyteorder("="), copy=True)
