"""Binary tensor (CUTN) and checkpoint (CUCK) formats.

CUTN::

    b"CUTN" | version u32 | dtype u8 | ndim u8 | ndim x extent u32 | payload

CUCK::

    b"CUCK" | version u32 | count u32 | count x (name_len u16 | utf-8 name | CUTN)

All integers and payloads are little-endian; payloads are row-major.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"CUTN"
CHECKPOINT_MAGIC = b"CUCK"
VERSION = 1

_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


class FormatError(ValueError):
    pass


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    try:
        code = _CODES[array.dtype.newbyteorder("=")]
    except KeyError:
        raise FormatError(f"dtype {array.dtype} not representable in CUTN") from None
    if array.ndim > 255:
        raise FormatError("too many dimensions")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<IBB", VERSION, code, array.ndim))
    stream.write(struct.pack(f"<{array.ndim}I", *array.shape))
    stream.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def read_tensor(stream: BinaryIO) -> np.ndarray:
    if _read_exact(stream, 4) != TENSOR_MAGIC:
        raise FormatError("bad CUTN magic")
    version, code, ndim = struct.unpack("<IBB", _read_exact(stream, 6))
    if version != VERSION:
        raise FormatError(f"unsupported CUTN version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown CUTN dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim))
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(stream, count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(shape)


def encode_tensor(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def decode_tensor(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    out = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after CUTN tensor")
    return out


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def encode_checkpoint(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, array in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, array)
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != CHECKPOINT_MAGIC:
        raise FormatError("bad CUCK magic")
    version, count = struct.unpack("<II", _read_exact(buf, 8))
    if version != VERSION:
        raise FormatError(f"unsupported CUCK version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(buf, 2))
        name = _read_exact(buf, n).decode("utf-8")
        if name in entries:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        entries[name] = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint")
    return entries


def save_checkpoint(path, entries: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(entries))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
