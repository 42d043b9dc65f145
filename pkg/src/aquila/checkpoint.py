"""Binary tensor checkpoints.

Layout (all integers little-endian)::

    b"AQSF"                     magic
    u32 version                 currently 1
    u32 count
    count x {
        u16 name_len, name (UTF-8)
        u8  ndim, u64 dims[ndim]
        u8  dtype               0 = float32, 1 = float64
        raw row-major data
    }
    u32 crc32 of every preceding byte

Writes go to a temporary file in the target directory and are renamed
into place.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, FormatError, TruncatedFileError

MAGIC = b"AQSF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"{name}: name or rank too large")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError("checkpoint ends early")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC[: len(buf[:4])]:
        raise BadMagicError("not an AQSF checkpoint")
    if len(buf) < 16:
        raise TruncatedFileError("checkpoint shorter than its header")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out = {}
    try:
        for _ in range(count):
            (n,) = r.unpack("<H")
            name = r.take(n).decode("utf-8")
            (ndim,) = r.unpack("<B")
            dims = r.unpack(f"<{ndim}Q")
            (code,) = r.unpack("<B")
            if code not in _DTYPES:
                raise FormatError(f"{name}: unknown dtype code {code}")
            dt = _DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(r.take(size * dt.itemsize), dtype=dt).reshape(dims)
            out[name] = data.astype(dt.newbyteorder("="))
    except TruncatedFileError:
        if zlib.crc32(body) != crc:
            raise TruncatedFileError("checkpoint is truncated") from None
        raise
    if r.pos != len(body):
        if zlib.crc32(body) != crc:
            raise ChecksumError("CRC mismatch")
        raise FormatError("trailing bytes after the last tensor")
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC mismatch")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(tensors)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
