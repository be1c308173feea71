"""Binary checkpoint format.

Layout (little-endian)::

    b"F2FW" | version:u32 | count:u32 | count x record
    record = name_len:u32 | name:utf-8 | rank:u32 | extents:u32*rank | payload:f32*prod(extents)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"F2FW"
VERSION = 1


def save_checkpoint(path, params: dict[str, "np.ndarray | object"]):
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an F2FW checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
        pos += nbytes
    return out


def load_into(model, path, dtype=None):
    """Copy checkpoint values into ``model.named_parameters()``; names and shapes must match."""
    state = load_checkpoint(path)
    params = model.named_parameters()
    if set(state) != set(params):
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        raise CheckpointError(f"{path}: incompatible checkpoint (missing {missing[:4]}, unexpected {extra[:4]})")
    for name, p in params.items():
        if state[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {state[name].shape}, model expects {p.shape}")
        p.data = state[name].astype(dtype or p.dtype)
    return model
