"""
Binary checkpoint files for NetworkParams.

Layout (little-endian)::

    "AUIF"  u32 version  u32 N  u32 C  u32 ablation-mask  u32 tensor-count
    per tensor: u16 name-length, UTF-8 name, u8 rank, u64 dims..., float32 payload
    u32 CRC-32 of every preceding byte

Every learnable and every batch-norm running statistic is stored, so a
save/load round trip of float32 parameters is bit-exact.
"""
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .errors import CheckpointFormatError, InvalidInputError
from .network import Ablation, NetworkConfig, NetworkParams, init_network

logger = logging.getLogger(__name__)

MAGIC = b"AUIF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_CRC = struct.Struct("<I")

PathLike = Union[str, os.PathLike]


def encode_checkpoint(params: NetworkParams) -> bytes:
    tensors = params.named_tensors()
    cfg = params.config
    chunks = [_HEADER.pack(MAGIC, VERSION, cfg.layers, cfg.channels, int(cfg.ablation), len(tensors))]
    for name, value in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(params: NetworkParams, path: PathLike) -> Path:
    """Write ``params`` to ``path`` atomically (temp file then rename)."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(params)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    logger.info(f"💾 Saved checkpoint {path} ({len(data)} bytes, {len(params.named_tensors())} tensors)")
    return path


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.end = end
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > self.end:
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def decode_checkpoint(data: bytes) -> NetworkParams:
    """Parse checkpoint bytes; any defect raises CheckpointFormatError naming the byte offset."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic, not an AUIF checkpoint", 0)
    if len(data) < _HEADER.size + _CRC.size:
        raise CheckpointFormatError("truncated checkpoint header", len(data))
    _, version, layers, channels, mask, count = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)

    body_end = len(data) - _CRC.size
    (stored_crc,) = _CRC.unpack_from(data, body_end)
    actual_crc = zlib.crc32(data[:body_end]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointFormatError(
            f"CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})", body_end)

    try:
        config = NetworkConfig(layers=layers, channels=channels, ablation=Ablation.from_mask(mask))
    except InvalidInputError as exc:
        raise CheckpointFormatError(f"invalid config block: {exc}", 8) from exc

    reader = _Reader(data, body_end)
    reader.offset = _HEADER.size
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack("<H", "tensor name length")
        try:
            name = reader.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("tensor name is not valid UTF-8", start + 2) from exc
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor {name!r}", start)
        (rank,) = reader.unpack("<B", f"rank of {name}")
        dims = reader.unpack(f"<{rank}Q", f"dims of {name}") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = reader.take(4 * n, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if reader.offset != body_end:
        raise CheckpointFormatError(f"{body_end - reader.offset} unexpected trailing bytes", reader.offset)

    template = init_network(layers, channels, seed=0, ablation=config.ablation).named_tensors()
    for name, value in tensors.items():
        if name in template and template[name].shape != value.shape:
            raise CheckpointFormatError(
                f"tensor {name!r} has shape {value.shape}, expected {template[name].shape}", _HEADER.size)
    try:
        return NetworkParams.from_named_tensors(config, tensors)
    except InvalidInputError as exc:
        raise CheckpointFormatError(str(exc), _HEADER.size) from exc


def load_checkpoint(path: PathLike) -> NetworkParams:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read {path}: {exc.strerror or exc}", 0) from exc
    params = decode_checkpoint(data)
    logger.info(f"📦 Loaded checkpoint {path}: N={params.config.layers} C={params.config.channels} "
                f"ablation={params.config.ablation.names or ['none']}")
    return params


def checkpoint_io(params: NetworkParams, path: PathLike, direction: str) -> NetworkParams:
    """Save or load, mirroring the single save|load entry point."""
    if direction == "save":
        save_checkpoint(params, path)
        return params
    if direction == "load":
        return load_checkpoint(path)
    raise InvalidInputError(f"direction must be 'save' or 'load', got {direction!r}")
