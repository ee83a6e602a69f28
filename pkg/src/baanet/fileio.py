"""Binary tensor files, checkpoints, and the flat-key config text format.

Raw tensor record: magic ``BAAT``, u16 format version, u8 rank, one
little-endian u32 per dimension, then 32-bit little-endian floats in row-major
order. Checkpoint: magic ``BAAC``, u16 version, u64 step counter, u32 tensor
count, per tensor a u16 name length + UTF-8 name + raw tensor record, then a
u32 length + UTF-8 config text blob. Everything is trivially parseable
without this library.

Values are stored as float32; loading upcasts to float64, so a load/save
round trip reproduces the file bytes exactly.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "FORMAT_VERSION",
    "RAW_MAGIC",
    "CKPT_MAGIC",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
    "Checkpoint",
    "checkpoint_to_bytes",
    "checkpoint_from_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "parse_config_text",
    "config_to_text",
]

RAW_MAGIC = b"BAAT"
CKPT_MAGIC = b"BAAC"
FORMAT_VERSION = 1
MAX_RANK = 4


class FormatError(ValueError):
    """Malformed or incompatible on-disk data."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise FormatError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
    head = RAW_MAGIC + struct.pack("<HB", FORMAT_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + arr.astype("<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record starting at ``offset``; returns (float64 array, next offset)."""
    if buf[offset : offset + 4] != RAW_MAGIC:
        raise FormatError(f"bad tensor magic {buf[offset:offset + 4]!r}, expected {RAW_MAGIC!r}")
    offset += 4
    version, rank = struct.unpack_from("<HB", buf, offset)
    offset += 3
    if version != FORMAT_VERSION:
        raise FormatError(f"tensor format version {version} != supported version {FORMAT_VERSION}")
    if rank < 1 or rank > MAX_RANK:
        raise FormatError(f"tensor rank must be 1..{MAX_RANK}, got {rank}")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims))
    end = offset + 4 * count
    if end > len(buf):
        raise FormatError(f"tensor data truncated: need {end} bytes, have {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims), end


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr


@dataclasses.dataclass
class Checkpoint:
    """Named parameter tensors plus the run configuration they were trained under."""

    version: int
    step: int
    tensors: dict[str, np.ndarray]
    config_text: str


def checkpoint_to_bytes(tensors: dict[str, np.ndarray], config_text: str, step: int) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<HQI", FORMAT_VERSION, step, len(tensors))]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(tensor_to_bytes(arr))
    blob = config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    version, step, count = struct.unpack_from("<HQI", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint format version {version} != supported version {FORMAT_VERSION}")
    offset = 4 + 14
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        tensors[name], offset = tensor_from_bytes(buf, offset)
    (cfg_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    config_text = buf[offset : offset + cfg_len].decode("utf-8")
    return Checkpoint(version=version, step=step, tensors=tensors, config_text=config_text)


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_text: str, step: int) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(tensors, config_text, step))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_to_text(flat: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flat.items())
