"""Parameter checkpoint files.

Layout: magic "PDRK", format version u32, parameter count u64, then per
parameter: name length u32, UTF-8 name, shape rank u32, shape dims u64 each,
row-major little-endian f64 data.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from ..errors import DataError
from .tensor import Tensor

MAGIC = b"PDRK"
VERSION = 1


def save_params(path, params: dict) -> None:
    """Write a named parameter store; values may be Tensors or ndarrays."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(params)))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8", copy=False).tobytes())


def load_params(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint back into an ordered name -> float64 array map."""
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"truncated checkpoint while reading {what}", offset=off)
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise DataError("not a PDRK checkpoint (bad magic)", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}", offset=4)
    (count,) = struct.unpack("<Q", take(8, "count"))
    out = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = tuple(
            struct.unpack("<Q", take(8, f"dim of {name}"))[0] for _ in range(rank)
        )
        n_items = 1
        for dim in shape:
            n_items *= dim
        data = np.frombuffer(take(8 * n_items, f"data of {name}"), dtype="<f8")
        out[name] = data.reshape(shape).astype(np.float64)
    return out
