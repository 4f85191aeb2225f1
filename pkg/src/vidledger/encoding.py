"""Canonical byte encoding shared by everything that is hashed or signed.

Every field is written as a 4-byte big-endian length followed by its
bytes. Integers are fixed-width big-endian (u64 unless noted) and are
length-prefixed like any other field, so a record can be decoded without
knowing its schema in advance.
"""
from __future__ import annotations

import hashlib
import struct

_LEN = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class DecodeError(ValueError):
    """Raised when a byte string is not a valid canonical encoding."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def field(data: bytes) -> bytes:
    return _LEN.pack(len(data)) + data


def u64(value: int) -> bytes:
    return field(_U64.pack(value))


def encode(*fields: bytes) -> bytes:
    """Concatenate already-encoded fields (see :func:`field`, :func:`u64`)."""
    return b"".join(fields)


class Reader:
    """Sequential decoder over a canonical encoding."""

    def __init__(self, data: bytes, base_offset: int = 0):
        self.data = data
        self.pos = 0
        self.base = base_offset

    @property
    def offset(self) -> int:
        return self.base + self.pos

    def field(self, size: int | None = None) -> bytes:
        if self.pos + 4 > len(self.data):
            raise DecodeError("truncated length prefix", self.offset)
        (n,) = _LEN.unpack_from(self.data, self.pos)
        start = self.pos + 4
        if start + n > len(self.data):
            raise DecodeError(f"field of {n} bytes overruns buffer", self.offset)
        if size is not None and n != size:
            raise DecodeError(f"expected {size}-byte field, got {n}", self.offset)
        self.pos = start + n
        return self.data[start:start + n]

    def u64(self) -> int:
        return _U64.unpack(self.field(8))[0]

    def at_end(self) -> bool:
        return self.pos == len(self.data)

    def expect_end(self) -> None:
        if not self.at_end():
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes", self.offset)
