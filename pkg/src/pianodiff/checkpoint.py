"""Binary tensor checkpoints.

Layout (little-endian)::

    magic  b"D3RMCKPT"
    u32    format version (1)
    u32    tensor count
    per tensor:
        u16 name length, name (utf-8)
        u8  dtype code (0 = f32, 1 = f64)
        u8  rank, then rank x u64 dims
        raw data, C order

The run configuration lives next to the checkpoint as ``key = value`` text.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"D3RMCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {torch.float32: 0, torch.float64: 1}
_TORCH = {0: torch.float32, 1: torch.float64}


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, torch.Tensor]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        code = _CODES[t.dtype]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, t.dim()) + struct.pack(f"<{t.dim()}Q", *t.shape))
        parts.append(t.numpy().astype(_DTYPES[code], copy=False).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, out = 16, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(buf):
                raise CheckpointError(f"{path}: truncated at tensor {name!r}")
            arr = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape)
            out[name] = torch.from_numpy(arr.copy()).to(_TORCH[code])
            pos += size
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return out
