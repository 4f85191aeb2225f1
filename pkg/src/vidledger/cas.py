"""Content-addressed chunk store.

An object's address is the SHA-256 of its bytes, rendered as 64 lowercase
hex characters. Objects live under ``<root>/objects/<first two hex>/<hex>``
and every read re-hashes the bytes before returning them.
"""
from __future__ import annotations

import asyncio
import errno
import logging
import os
import socket
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

from . import framing
from .encoding import sha256

log = logging.getLogger(__name__)

OP_PUT = 0x01
OP_GET = 0x02
OP_ADDRESS = 0x81
OP_CONTENT = 0x82
OP_NOT_FOUND = 0x83
OP_INTEGRITY_FAIL = 0x84
OP_ERROR = 0x8F  # body: 1-byte transient flag + utf-8 message


class StoreError(Exception):
    pass


class TransientStoreError(StoreError):
    """Retrying later may succeed (store unreachable, resource exhaustion)."""


class PermanentStoreError(StoreError):
    pass


class ObjectNotFound(StoreError, KeyError):
    pass


class IntegrityError(StoreError):
    """Stored bytes no longer hash to their address."""


_TRANSIENT_ERRNOS = {errno.EAGAIN, errno.EINTR, errno.ENOSPC, errno.EMFILE,
                     errno.ENFILE, errno.EBUSY, errno.ETIMEDOUT}


def _classify(exc: OSError) -> StoreError:
    cls = TransientStoreError if exc.errno in _TRANSIENT_ERRNOS else PermanentStoreError
    return cls(str(exc))


@dataclass(frozen=True, order=True)
class ContentAddress:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != 32:
            raise ValueError("content address digest must be 32 bytes")

    @classmethod
    def of(cls, content: bytes) -> "ContentAddress":
        return cls(sha256(content))

    @classmethod
    def from_hex(cls, text: str) -> "ContentAddress":
        if len(text) != 64 or text != text.lower():
            raise ValueError(f"address must be 64 lowercase hex chars: {text!r}")
        return cls(bytes.fromhex(text))

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex


def verify_address(address: ContentAddress, content: bytes) -> bool:
    return sha256(content) == address.digest


class LocalStore:
    """Filesystem-backed store. Safe for concurrent puts and gets."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.objects = self.root / "objects"
        self.tmp = self.root / "tmp"
        self.objects.mkdir(parents=True, exist_ok=True)
        self.tmp.mkdir(parents=True, exist_ok=True)

    def path_for(self, address: ContentAddress) -> Path:
        h = address.hex
        return self.objects / h[:2] / h

    def put(self, content: bytes) -> ContentAddress:
        if not content:
            raise ValueError("cannot store empty content")
        address = ContentAddress.of(content)
        path = self.path_for(address)
        if path.exists():
            return address
        try:
            path.parent.mkdir(exist_ok=True)
            fd, tmp_name = tempfile.mkstemp(dir=self.tmp)
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(content)
                # Identical concurrent puts converge: rename is atomic.
                os.replace(tmp_name, path)
            except BaseException:
                try:
                    os.unlink(tmp_name)
                except FileNotFoundError:
                    pass
                raise
        except OSError as exc:
            raise _classify(exc) from exc
        return address

    def get(self, address: ContentAddress) -> bytes:
        try:
            data = self.path_for(address).read_bytes()
        except FileNotFoundError:
            raise ObjectNotFound(address.hex) from None
        except OSError as exc:
            raise _classify(exc) from exc
        if not verify_address(address, data):
            raise IntegrityError(f"object {address.hex} fails its content hash")
        return data

    def __contains__(self, address: ContentAddress) -> bool:
        return self.path_for(address).exists()

    def addresses(self) -> list[ContentAddress]:
        return sorted(ContentAddress.from_hex(p.name)
                      for p in self.objects.glob("??/*") if len(p.name) == 64)


class StoreServer:
    """Serves a :class:`LocalStore` over the framed PUT/GET protocol."""

    def __init__(self, store: LocalStore):
        self.store = store
        self._server: asyncio.AbstractServer | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port)
        return self._server.sockets[0].getsockname()[:2]

    async def serve_forever(self) -> None:
        assert self._server is not None
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _handle(self, reader, writer) -> None:
        try:
            while True:
                try:
                    op, body = await framing.read_frame(reader)
                except framing.FrameError:
                    break
                op, reply = await asyncio.to_thread(self._dispatch, op, body)
                await framing.write_frame(writer, op, reply)
        except ConnectionError:
            pass
        finally:
            writer.close()

    def _dispatch(self, op: int, body: bytes) -> tuple[int, bytes]:
        try:
            if op == OP_PUT:
                return OP_ADDRESS, self.store.put(body).digest
            if op == OP_GET:
                return OP_CONTENT, self.store.get(ContentAddress(body))
            return OP_ERROR, b"\x00" + f"unknown opcode {op:#x}".encode()
        except ObjectNotFound:
            return OP_NOT_FOUND, b""
        except IntegrityError:
            return OP_INTEGRITY_FAIL, b""
        except TransientStoreError as exc:
            return OP_ERROR, b"\x01" + str(exc).encode()
        except (StoreError, ValueError) as exc:
            return OP_ERROR, b"\x00" + str(exc).encode()


class StoreClient:
    """Blocking client for a remote store. Thread-safe; one connection."""

    def __init__(self, address: str, timeout: float = 10.0):
        self.address = address
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _request(self, op: int, body: bytes) -> tuple[int, bytes]:
        with self._lock:
            for attempt in (0, 1):
                try:
                    if self._sock is None:
                        self._sock = socket.create_connection(
                            framing.parse_address(self.address), timeout=self.timeout)
                    framing.send_frame(self._sock, op, body)
                    return framing.recv_frame(self._sock)
                except OSError as exc:
                    self._drop()
                    # One reconnect covers a server-side idle close.
                    if attempt:
                        raise TransientStoreError(f"store {self.address}: {exc}") from exc
            raise AssertionError("unreachable")

    def _drop(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def close(self) -> None:
        with self._lock:
            self._drop()

    @staticmethod
    def _raise_error(body: bytes) -> None:
        transient, msg = body[:1] == b"\x01", body[1:].decode(errors="replace")
        raise (TransientStoreError if transient else PermanentStoreError)(msg)

    def put(self, content: bytes) -> ContentAddress:
        if not content:
            raise ValueError("cannot store empty content")
        op, body = self._request(OP_PUT, content)
        if op == OP_ADDRESS:
            return ContentAddress(body)
        self._raise_error(body)

    def get(self, address: ContentAddress) -> bytes:
        op, body = self._request(OP_GET, address.digest)
        if op == OP_CONTENT:
            if not verify_address(address, body):
                raise IntegrityError(f"object {address.hex} corrupted in transit")
            return body
        if op == OP_NOT_FOUND:
            raise ObjectNotFound(address.hex)
        if op == OP_INTEGRITY_FAIL:
            raise IntegrityError(f"object {address.hex} fails its content hash")
        self._raise_error(body)


def open_store(spec: str):
    """A ``host:port`` string gives a client, anything else a local directory."""
    try:
        framing.parse_address(spec)
    except ValueError:
        return LocalStore(spec)
    if os.path.isdir(spec):
        return LocalStore(spec)
    return StoreClient(spec)
