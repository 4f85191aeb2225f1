"""Length-prefixed frames: 4-byte big-endian length, 1-byte opcode, body.

The length counts the opcode byte plus the body.
"""
from __future__ import annotations

import asyncio
import socket
import struct

_LEN = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024


class FrameError(ConnectionError):
    pass


def pack_frame(opcode: int, body: bytes = b"") -> bytes:
    return _LEN.pack(len(body) + 1) + bytes((opcode,)) + body


def _check_length(n: int) -> None:
    if n == 0:
        raise FrameError("zero-length frame has no opcode")
    if n > MAX_FRAME:
        raise FrameError(f"frame of {n} bytes exceeds limit {MAX_FRAME}")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise FrameError("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    (n,) = _LEN.unpack(_recv_exact(sock, 4))
    _check_length(n)
    data = _recv_exact(sock, n)
    return data[0], data[1:]


def send_frame(sock: socket.socket, opcode: int, body: bytes = b"") -> None:
    sock.sendall(pack_frame(opcode, body))


async def read_frame(reader: asyncio.StreamReader) -> tuple[int, bytes]:
    try:
        (n,) = _LEN.unpack(await reader.readexactly(4))
        _check_length(n)
        data = await reader.readexactly(n)
    except asyncio.IncompleteReadError as exc:
        raise FrameError("connection closed") from exc
    return data[0], data[1:]


async def write_frame(writer: asyncio.StreamWriter, opcode: int, body: bytes = b"") -> None:
    writer.write(pack_frame(opcode, body))
    await writer.drain()


def parse_address(addr: str) -> tuple[str, int]:
    """Split ``host:port`` (IPv6 hosts in brackets)."""
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host.strip("[]") or "127.0.0.1", int(port)
