"""Binary checkpoint container.

Little-endian layout::

    b"MCDS1"
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
                u8 ndim, ndim x u32 dims, raw data
    u64 config hash

Model tensors come first, then optimizer tensors under names starting with
``opt.`` (moments as ``opt.m.<param>`` / ``opt.v.<param>``, plus the scalars
``opt.step`` and ``opt.epoch``). All tensors share the one count.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"MCDS1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def encode(tensors: "OrderedDict[str, np.ndarray]", config_hash: int) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    parts.append(struct.pack("<Q", config_hash & 0xFFFFFFFFFFFFFFFF))
    return b"".join(parts)


def decode(buf: bytes) -> tuple:
    """Return (OrderedDict name -> array, config hash)."""
    if buf[:5] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    (chash,) = struct.unpack("<Q", take(8))
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return tensors, chash


def save_checkpoint(path, model_state, opt_state=None, config_hash: int = 0) -> None:
    tensors = OrderedDict(model_state)
    for name, arr in (opt_state or {}).items():
        tensors["opt." + name] = arr
    Path(path).write_bytes(encode(tensors, config_hash))


def load_checkpoint(path) -> tuple:
    """Return (model_state, opt_state, config_hash); opt names lose their prefix."""
    tensors, chash = decode(Path(path).read_bytes())
    model, opt = OrderedDict(), OrderedDict()
    for name, arr in tensors.items():
        if name.startswith("opt."):
            opt[name[4:]] = arr
        else:
            model[name] = arr
    return model, opt, chash
