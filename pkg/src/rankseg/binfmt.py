"""Framing shared by the checkpoint and dataset files.

Layout: 8-byte magic, little-endian u32 version, body, little-endian u32
CRC-32 of every preceding byte.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

from rankseg.errors import CorruptionError, IncompatibleVersionError


def frame(magic: bytes, version: int, body: bytes) -> bytes:
    payload = magic + struct.pack("<I", version) + body
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def unframe(raw: bytes, magic: bytes, version: int) -> bytes:
    """Check magic, version and CRC; return the body."""
    if len(raw) < len(magic) or raw[: len(magic)] != magic:
        raise CorruptionError(f"bad magic, expected {magic!r}", offset=0)
    head = len(magic) + 4
    if len(raw) < head + 4:
        raise CorruptionError("file truncated inside header", offset=len(raw))
    (found,) = struct.unpack_from("<I", raw, len(magic))
    if found != version:
        raise IncompatibleVersionError(f"format version {found} is not supported (expected {version})")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptionError("CRC-32 mismatch (truncated or modified file)", offset=len(raw) - 4)
    return raw[head:-4]


class Reader:
    """Sequential reader over a body; reports absolute offsets on failure."""

    def __init__(self, body: bytes, base_offset: int):
        self.body = body
        self.pos = 0
        self.base = base_offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise CorruptionError(f"need {n} bytes, only {len(self.body) - self.pos} left", offset=self.base + self.pos)
        chunk = self.body[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def offset(self) -> int:
        return self.base + self.pos

    def done(self) -> None:
        if self.pos != len(self.body):
            raise CorruptionError(f"{len(self.body) - self.pos} trailing bytes", offset=self.offset)


def read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
