"""Binary tensor and bit-packed mask file formats.

Both formats share one header:

    bytes 0..7   magic (``TCRVTEN\\0`` for tensors, ``TCRVMSK\\0`` for masks)
    byte  8      format version (1)
    byte  9      rank
    then rank    little-endian uint64 axis lengths

A tensor body is row-major little-endian float32.  A mask body packs each
row (the last axis) into big-endian bits padded up to a byte boundary.
Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError, ShapeError

__all__ = ["write_tensor", "read_tensor", "write_mask", "read_mask"]

TENSOR_MAGIC = b"TCRVTEN\x00"
MASK_MAGIC = b"TCRVMSK\x00"
VERSION = 1
_MAX_RANK = 8


def _write_header(fh, magic: bytes, shape: tuple[int, ...]) -> None:
    if len(shape) > _MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds the format limit {_MAX_RANK}")
    fh.write(magic)
    fh.write(struct.pack("<BB", VERSION, len(shape)))
    fh.write(struct.pack(f"<{len(shape)}Q", *shape))


def _read_header(fh, magic: bytes, path) -> tuple[int, ...]:
    head = fh.read(8)
    if head != magic:
        raise ParseError(f"bad magic {head!r}, expected {magic!r}", path, 0)
    meta = fh.read(2)
    if len(meta) != 2:
        raise ParseError("truncated header", path, 8)
    version, rank = struct.unpack("<BB", meta)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", path, 8)
    if rank > _MAX_RANK:
        raise ParseError(f"rank {rank} exceeds the format limit {_MAX_RANK}", path, 9)
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise ParseError("truncated axis lengths", path, 10)
    return struct.unpack(f"<{rank}Q", raw)


def write_tensor(path, arr: np.ndarray) -> None:
    """Write a float32 tensor; other real dtypes are cast to float32."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        _write_header(fh, TENSOR_MAGIC, arr.shape)
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        shape = _read_header(fh, TENSOR_MAGIC, path)
        offset = fh.tell()
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        raw = fh.read()
    if len(raw) != expected:
        raise ParseError(f"payload is {len(raw)} bytes, expected {expected}", path, offset)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def write_mask(path, bits: np.ndarray) -> None:
    """Write a boolean array with each last-axis row bit-packed."""
    bits = np.ascontiguousarray(bits, dtype=bool)
    if bits.ndim < 1:
        raise ShapeError("mask must have at least one axis")
    with open(path, "wb") as fh:
        _write_header(fh, MASK_MAGIC, bits.shape)
        fh.write(np.packbits(bits, axis=-1).tobytes())


def read_mask(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        shape = _read_header(fh, MASK_MAGIC, path)
        offset = fh.tell()
        row = shape[-1]
        packed_row = (row + 7) // 8
        expected = int(np.prod(shape[:-1], dtype=np.int64)) * packed_row
        raw = fh.read()
    if len(raw) != expected:
        raise ParseError(f"payload is {len(raw)} bytes, expected {expected}", path, offset)
    packed = np.frombuffer(raw, dtype=np.uint8).reshape(*shape[:-1], packed_row)
    return np.unpackbits(packed, axis=-1, count=row).astype(bool)
