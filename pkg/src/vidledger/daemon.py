"""TCP front-ends: the gateway daemon and a camera client.

Every connection speaks the length-prefixed frames of
:mod:`vidledger.framing`. The first frame decides the connection type:

* camera: ``HELLO(camera key)`` answered by ``ACK`` or ``NACK(retry ms)``,
  then ``CHUNK(frame)`` answered by ``RECEIPT``, ``BUFFERED`` or ``REJECT``;
* peer: a one-way stream of ``PEER(message)`` frames;
* auditor: ``EXPORT`` answered by ``LEDGER(bytes)``.
"""
from __future__ import annotations

import asyncio
import configparser
import logging
import socket
import struct
from dataclasses import dataclass
from pathlib import Path

from . import framing
from .cas import StoreClient, open_store
from .chunks import ChunkError, ChunkingConfig
from .encoding import Reader, field, u64
from .gateway import BootstrapState, Gateway, NotBootstrapped
from .identity import DeviceIdentity, load_seed
from .ledger import LedgerError, open_ledger
from .quorum import ConsensusConfig

log = logging.getLogger(__name__)

OP_HELLO = 0x10
OP_CHUNK = 0x11
OP_PEER = 0x20
OP_EXPORT = 0x30
OP_ACK = 0x90
OP_NACK = 0x91
OP_RECEIPT = 0x92
OP_REJECT = 0x93
OP_BUFFERED = 0x94
OP_LEDGER = 0xB0

TICK_S = 0.1
ANTI_ENTROPY_S = 1.0


@dataclass
class GatewayConfig:
    identity: DeviceIdentity
    peers: list[tuple[bytes, str]]
    store_address: str
    chunking: ChunkingConfig
    consensus: ConsensusConfig
    listen_address: str
    ledger_path: Path | None = None
    metrics_path: Path | None = None

    def __post_init__(self):
        keys = [k for k, _ in self.peers]
        if self.identity.public_key not in self.consensus:
            raise ValueError("own key is not in the peer table")
        if tuple(keys) != self.consensus.peers:
            raise ValueError("peer table and consensus membership disagree")

    def peer_address(self, key: bytes) -> str:
        return dict(self.peers)[key]


def load_config(path, listen: str | None = None) -> GatewayConfig:
    """Read an INI gateway config. Relative paths resolve against its folder.

    ::

        [gateway]
        identity = gw0.key        ; raw 32-byte Ed25519 seed
        listen = 127.0.0.1:7101
        store = 127.0.0.1:7000    ; or a local store directory
        interval_ms = 10000
        ledger = gw0.ledger       ; optional append-only ledger file
        metrics = gw0.csv         ; optional per-transaction timing log

        [consensus]
        f = 1
        timeout_ms = 2000

        [peers]                   ; every member, including this gateway
        <64-hex public key> = host:port
    """
    path = Path(path)
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(path)
    base = path.parent
    g = cp["gateway"]

    def resolve(v):
        return Path(v) if Path(v).is_absolute() else base / v

    peers = [(bytes.fromhex(k), v) for k, v in cp["peers"].items()]
    consensus = ConsensusConfig(tuple(k for k, _ in peers), cp.getint("consensus", "f"),
                                cp.getint("consensus", "timeout_ms", fallback=2000))
    return GatewayConfig(
        identity=load_seed(resolve(g["identity"])),
        peers=peers,
        store_address=g["store"],
        chunking=ChunkingConfig(g.getint("interval_ms", fallback=10_000)),
        consensus=consensus,
        listen_address=listen or g["listen"],
        ledger_path=resolve(g["ledger"]) if "ledger" in g else None,
        metrics_path=resolve(g["metrics"]) if "metrics" in g else None,
    )


class GatewayDaemon:
    def __init__(self, config: GatewayConfig, store=None):
        self.config = config
        self.store = store if store is not None else open_store(config.store_address)
        self._loop: asyncio.AbstractEventLoop | None = None
        self._queues: dict[bytes, asyncio.Queue] = {}
        self._tasks: list[asyncio.Task] = []
        self._server: asyncio.AbstractServer | None = None
        self._metrics_fh = open(config.metrics_path, "a", newline="") if config.metrics_path else None
        ledger, self._ledger_log = (open_ledger(config.ledger_path, config.consensus)
                                    if config.ledger_path else (None, None))
        self.gateway = Gateway(config.identity, config.consensus, self.store, self._send,
                               ledger=ledger, chunking=config.chunking,
                               metrics_csv=self._metrics_fh)

    # outbound peer traffic: best effort, one queue and connection per peer

    def _send(self, peer: bytes, data: bytes) -> None:
        q = self._queues.get(peer)
        if q is not None and self._loop is not None:
            self._loop.call_soon_threadsafe(q.put_nowait, data)

    async def _peer_writer(self, peer: bytes, q: asyncio.Queue) -> None:
        host, port = framing.parse_address(self.config.peer_address(peer))
        writer = None
        while True:
            data = await q.get()
            try:
                if writer is None:
                    _, writer = await asyncio.wait_for(asyncio.open_connection(host, port), 2)
                await framing.write_frame(writer, OP_PEER, data)
            except (OSError, asyncio.TimeoutError) as exc:
                log.debug("dropping message to %s: %s", peer.hex()[:16], exc)
                if writer is not None:
                    writer.close()
                writer = None

    async def _periodic(self) -> None:
        n = 0
        while True:
            await asyncio.sleep(TICK_S)
            n += 1
            self.gateway.tick()
            if n % int(ANTI_ENTROPY_S / TICK_S) == 0:
                self.gateway.anti_entropy()

    async def start(self) -> tuple[str, int]:
        self._loop = asyncio.get_running_loop()
        for key, _ in self.config.peers:
            if key != self.config.identity.public_key:
                q = asyncio.Queue()
                self._queues[key] = q
                self._tasks.append(asyncio.create_task(self._peer_writer(key, q)))
        self._tasks.append(asyncio.create_task(self._periodic()))
        host, port = framing.parse_address(self.config.listen_address)
        self._server = await asyncio.start_server(self._handle, host, port)
        return self._server.sockets[0].getsockname()[:2]

    async def serve_forever(self) -> None:
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        for t in self._tasks:
            t.cancel()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self._ledger_log is not None:
            self._ledger_log.close()
        if self._metrics_fh is not None:
            self._metrics_fh.close()
        if isinstance(self.store, StoreClient):
            self.store.close()

    # inbound

    async def _handle(self, reader, writer) -> None:
        try:
            op, body = await framing.read_frame(reader)
            if op == OP_PEER:
                while True:
                    self.gateway.on_peer_message(body)
                    op, body = await framing.read_frame(reader)
                    if op != OP_PEER:
                        break
            elif op == OP_HELLO:
                await self._camera_session(body, reader, writer)
            elif op == OP_EXPORT:
                data = await asyncio.to_thread(self.gateway.ledger.to_bytes)
                await framing.write_frame(writer, OP_LEDGER, data)
        except (framing.FrameError, ConnectionError):
            pass
        finally:
            writer.close()

    async def _camera_session(self, camera: bytes, reader, writer) -> None:
        if len(camera) != 32:
            await framing.write_frame(writer, OP_REJECT, b"camera key must be 32 bytes")
            return
        loop = asyncio.get_running_loop()
        ready = loop.create_future()

        def on_ready(ok: bool) -> None:
            loop.call_soon_threadsafe(lambda: ready.done() or ready.set_result(ok))

        state = self.gateway.handle_camera_hello(camera, on_ready)
        ok = state is BootstrapState.ACK
        if not ok:
            try:
                ok = await asyncio.wait_for(ready, self.config.consensus.timeout_ms / 1000 + 1)
            except asyncio.TimeoutError:
                ok = False
        if not ok:
            await framing.write_frame(writer, OP_NACK,
                                      struct.pack(">I", self.config.consensus.timeout_ms))
            return
        await framing.write_frame(writer, OP_ACK)
        while True:
            op, frame = await framing.read_frame(reader)
            if op != OP_CHUNK:
                return
            try:
                tx = await asyncio.to_thread(self.gateway.process_chunk, camera, frame)
            except (ChunkError, NotBootstrapped, LedgerError) as exc:
                await framing.write_frame(writer, OP_REJECT, str(exc).encode())
                continue
            if tx is None:
                await framing.write_frame(writer, OP_BUFFERED)
            else:
                await framing.write_frame(writer, OP_RECEIPT,
                                          u64(tx.sequence_number) + field(tx.transaction_hash))


class HelloRejected(ConnectionError):
    def __init__(self, retry_after_ms: int):
        super().__init__(f"gateway refused hello; retry after {retry_after_ms} ms")
        self.retry_after_ms = retry_after_ms


class CameraClient:
    """Blocking camera-side connection: hello, then one frame per chunk."""

    def __init__(self, address: str, camera_public_key: bytes, timeout: float = 30.0):
        self.sock = socket.create_connection(framing.parse_address(address), timeout=timeout)
        framing.send_frame(self.sock, OP_HELLO, camera_public_key)
        op, body = framing.recv_frame(self.sock)
        if op == OP_NACK:
            self.sock.close()
            raise HelloRejected(struct.unpack(">I", body)[0])
        if op != OP_ACK:
            self.sock.close()
            raise ConnectionError(f"unexpected reply {op:#x} to hello")

    def send_chunk(self, frame: bytes) -> tuple[str, int | None, bytes]:
        """Returns (status, sequence, transaction hash) with status one of
        ``receipt``, ``buffered`` or ``rejected``."""
        framing.send_frame(self.sock, OP_CHUNK, frame)
        op, body = framing.recv_frame(self.sock)
        if op == OP_RECEIPT:
            r = Reader(body)
            return "receipt", r.u64(), r.field(32)
        if op == OP_BUFFERED:
            return "buffered", None, b""
        return "rejected", None, body

    def close(self) -> None:
        self.sock.close()


def fetch_ledger(address: str, timeout: float = 30.0) -> bytes:
    """Pull a ledger snapshot from a running gateway."""
    with socket.create_connection(framing.parse_address(address), timeout=timeout) as sock:
        framing.send_frame(sock, OP_EXPORT)
        op, body = framing.recv_frame(sock)
    if op != OP_LEDGER:
        raise ConnectionError(f"unexpected reply {op:#x} to export")
    return body
