"""
Flat binary checkpoints of named float64 tensors.

Layout (little-endian):

    magic    8 bytes  b"DUDNNCK1"
    count    u32
    repeated count times:
        name_len u16, name (utf-8)
        ndim     u8, dims u32 * ndim
        data     float64 * prod(dims), C order
"""
import logging
import struct
from pathlib import Path

import numpy as np

from app.services.duplex import DuDnnSpec, learnable_params

logger = logging.getLogger(__name__)

MAGIC = b"DUDNNCK1"


class CheckpointError(Exception):
    """Malformed or incompatible checkpoint."""


def encode_checkpoint(params: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def decode_checkpoint(data: bytes) -> dict:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError("checkpoint is truncated")
        values = struct.unpack_from(fmt, data, pos)
        pos += size
        return values

    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (name_len,) = take("<H")
        raw = bytes(take(f"<{name_len}s")[0])
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor name is not valid UTF-8: {raw!r}") from e
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        values = take(f"<{int(np.prod(shape, dtype=np.int64))}d")
        params[name] = np.array(values, dtype=np.float64).reshape(shape)
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after the last tensor")
    return params


def save_checkpoint(path, params: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params))
    logger.info("Wrote checkpoint with %d tensors to %s", len(params), path)
    return path


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())


def apply_checkpoint(spec: DuDnnSpec, params: dict) -> None:
    """Copy checkpoint tensors into the spec's learnable arrays."""
    targets = learnable_params(spec)
    missing = sorted(set(targets) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint lacks {missing}")
    for name, target in targets.items():
        if params[name].shape != target.shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {params[name].shape} does not match {target.shape}"
            )
        target[...] = params[name]
