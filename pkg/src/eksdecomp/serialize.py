"""Binary tensor container shared by checkpoints and dataset files.

Layout of one tensor blob (little-endian)::

    b"EKST" | version u16 | dtype tag u8 | rank u16 | dims u64 * rank | payload

The payload is the row-major array in the tagged dtype.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"EKST"
VERSION = 1

DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8")}
_TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


class FormatError(ValueError):
    """A file is malformed: bad magic, unsupported version, or truncated."""


class Reader:
    """Cursor over a byte buffer that reports the offset of any short read."""

    def __init__(self, buf: bytes, origin: int = 0):
        self.buf = buf
        self.pos = 0
        self.origin = origin

    @property
    def offset(self) -> int:
        return self.origin + self.pos

    def take(self, n: int, what: str = "data") -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated at byte {self.offset}: needed {n} bytes of {what}, "
                f"{len(self.buf) - self.pos} available"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return vals if len(vals) > 1 else vals[0]

    def at_end(self) -> bool:
        return self.pos == len(self.buf)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in _TAG_OF:
        if np.issubdtype(arr.dtype, np.integer):
            dt = np.dtype("<i8")
        else:
            raise TypeError(f"unsupported dtype {arr.dtype}")
    head = MAGIC + struct.pack("<HBH", VERSION, _TAG_OF[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def read_tensor(r: Reader) -> np.ndarray:
    start = r.offset
    magic = r.take(4, "tensor magic")
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at byte {start}")
    version = r.unpack("H", "tensor version")
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version} at byte {start}")
    tag = r.unpack("B", "dtype tag")
    if tag not in DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag} at byte {start}")
    rank = r.unpack("H", "rank")
    dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, "dims")) if rank else ()
    dt = DTYPE_TAGS[tag]
    count = int(np.prod(dims)) if rank else 1
    payload = r.take(count * dt.itemsize, "tensor payload")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    r = Reader(buf)
    arr = read_tensor(r)
    if not r.at_end():
        raise FormatError(f"trailing bytes after tensor at byte {r.offset}")
    return arr


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())


def write_named(f: BinaryIO | io.BytesIO, name: str, arr: np.ndarray) -> None:
    key = name.encode()
    f.write(struct.pack("<H", len(key)) + key + tensor_to_bytes(arr))


def read_named(r: Reader) -> tuple[str, np.ndarray]:
    n = r.unpack("H", "section name length")
    name = r.take(n, "section name").decode()
    return name, read_tensor(r)
