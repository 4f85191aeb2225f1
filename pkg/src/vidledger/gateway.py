"""Gateway node: camera bootstrap, per-chunk transaction creation and
replica synchronization with peer gateways.

The node is transport-agnostic. Outbound peer traffic goes through a
``send(peer_public_key, data)`` callable; inbound traffic is fed to
:meth:`Gateway.on_peer_message` as raw bytes. :mod:`vidledger.sim` wires
nodes together in-process and :mod:`vidledger.daemon` over TCP.
"""
from __future__ import annotations

import collections
import csv
import enum
import logging
import threading
import time
from dataclasses import dataclass, field as dc_field
from typing import Callable, Iterable

from . import identity
from .cas import StoreError, TransientStoreError
from .chunks import ChunkingConfig, extract_metadata, hash_metadata, parse_chunk
from .consensus import ConsensusInstance, ConsensusMessage, Decision
from .encoding import DecodeError, Reader, field, u64
from .ledger import (
    BlockHeader, CertificateEntry, DuplicateDevice, InvalidBlock, Ledger, NotManagingGateway,
    Transaction, TransactionPayload, decode_certificate, encode_certificate,
)
from .quorum import ConsensusConfig, Phase

log = logging.getLogger(__name__)


class PeerKind(enum.IntEnum):
    HELLO_ANNOUNCE = 1
    CONSENSUS = 2
    TX_UPDATE = 3
    SYNC_REQUEST = 4
    SYNC_RESPONSE = 5


@dataclass(frozen=True)
class PeerMessage:
    kind: PeerKind
    body: bytes
    sender: bytes
    signature: bytes

    @staticmethod
    def signed_bytes(kind: PeerKind, body: bytes) -> bytes:
        return field(bytes((int(kind),))) + field(body)

    @classmethod
    def create(cls, kind: PeerKind, body: bytes, signer: identity.DeviceIdentity) -> "PeerMessage":
        return cls(kind, body, signer.public_key, identity.sign(signer, cls.signed_bytes(kind, body)))

    def signature_valid(self) -> bool:
        return identity.verify(self.sender, self.signed_bytes(self.kind, self.body), self.signature)

    def encode(self) -> bytes:
        return self.signed_bytes(self.kind, self.body) + field(self.sender) + field(self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "PeerMessage":
        r = Reader(data)
        raw = r.field(1)[0]
        try:
            kind = PeerKind(raw)
        except ValueError:
            raise DecodeError(f"unknown peer message kind {raw}") from None
        msg = cls(kind, r.field(), r.field(32), r.field(64))
        r.expect_end()
        return msg


def tx_update_body(device: bytes, tx: Transaction) -> bytes:
    return field(device) + field(tx.to_bytes())


def sync_request_body(device: bytes, from_sequence: int) -> bytes:
    return field(device) + u64(from_sequence)


def sync_response_body(device: bytes, header: BlockHeader | None,
                       certificate: Iterable[CertificateEntry], txs: Iterable[Transaction]) -> bytes:
    return (field(device) + field(header.encode() if header else b"")
            + field(encode_certificate(certificate))
            + field(b"".join(field(t.to_bytes()) for t in txs)))


class NotBootstrapped(Exception):
    """A camera sent chunks before its block was admitted."""


class BootstrapState(enum.Enum):
    ACK = "ack"
    PENDING = "pending"


@dataclass
class TimingRecord:
    camera_id: str
    sequence: int
    extract_ms: float
    store_ms: float
    sign_ms: float
    append_ms: float
    total_ms: float

    CSV_FIELDS = ("camera_id", "sequence", "extract_ms", "store_ms", "sign_ms",
                  "append_ms", "total_ms")

    def row(self) -> list:
        return [self.camera_id, self.sequence] + [f"{getattr(self, k):.4f}"
                                                   for k in self.CSV_FIELDS[2:]]


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    backoff_s: float = 0.05


@dataclass
class _Pending:
    frame: bytes
    metadata_hash: bytes
    received: float
    extract_s: float


@dataclass
class _Session:
    lock: threading.Lock = dc_field(default_factory=threading.Lock)
    backlog: collections.deque = dc_field(default_factory=collections.deque)
    last_position: int | None = None


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


class Gateway:
    """One transportation-layer node.

    ``store`` needs ``put(bytes) -> ContentAddress``. ``clock`` returns
    unix milliseconds and drives both block timestamps and consensus
    timeouts; tests substitute a virtual clock.
    """

    def __init__(self, me: identity.DeviceIdentity, config: ConsensusConfig, store,
                 send: Callable[[bytes, bytes], None], *, ledger: Ledger | None = None,
                 clock: Callable[[], int] = wall_clock_ms, retry: RetryPolicy = RetryPolicy(),
                 chunking: ChunkingConfig = ChunkingConfig(), metrics_csv=None):
        if me.public_key not in config:
            raise ValueError("gateway key is not in the consensus membership")
        self.me = me
        self.config = config
        self.store = store
        self.send = send
        self.clock = clock
        self.retry = retry
        self.chunking = chunking
        self.ledger = ledger if ledger is not None else Ledger(config)
        self.instances: dict[bytes, ConsensusInstance] = {}
        self.counters: collections.Counter = collections.Counter()
        self.metrics: list[TimingRecord] = []
        self.announced: dict[bytes, bytes] = {}
        self._metrics_writer = None
        if metrics_csv is not None:
            self._metrics_writer = csv.writer(metrics_csv)
            self._metrics_writer.writerow(TimingRecord.CSV_FIELDS)
        self._mutex = threading.RLock()
        self._metrics_lock = threading.Lock()
        self._lock: tuple[bytes, bytes] | None = None  # (tail, header_hash) we prepared on
        self._queued: collections.deque[bytes] = collections.deque()
        self._not_before: dict[bytes, int] = {}  # camera -> earliest re-proposal time
        self._waiters: dict[bytes, list[Callable[[bool], None]]] = collections.defaultdict(list)
        self._pending_blocks: dict[bytes, tuple[BlockHeader, list[CertificateEntry]]] = {}
        self._tx_buffer: dict[bytes, dict[int, Transaction]] = collections.defaultdict(dict)
        self._sessions: dict[bytes, _Session] = collections.defaultdict(_Session)

    @property
    def public_key(self) -> bytes:
        return self.me.public_key

    # -- outbound -----------------------------------------------------------

    def _peer_msg(self, kind: PeerKind, body: bytes) -> bytes:
        return PeerMessage.create(kind, body, self.me).encode()

    def _send(self, peer: bytes, kind: PeerKind, body: bytes) -> None:
        self.send(peer, self._peer_msg(kind, body))

    def _broadcast(self, kind: PeerKind, body: bytes) -> None:
        data = self._peer_msg(kind, body)
        for peer in self.config.peers:
            if peer != self.public_key:
                self.send(peer, data)

    def _broadcast_consensus(self, msgs: Iterable[ConsensusMessage]) -> None:
        for m in msgs:
            self._broadcast(PeerKind.CONSENSUS, m.encode())

    # -- bootstrap ----------------------------------------------------------

    def handle_camera_hello(self, camera_public_key: bytes,
                            on_ready: Callable[[bool], None] | None = None) -> BootstrapState:
        """Admit a camera. Returns ACK if its block already exists; otherwise
        consensus is started (or queued) and ``on_ready(ok)`` fires later."""
        with self._mutex:
            if camera_public_key in self.ledger:
                return BootstrapState.ACK
            if on_ready is not None:
                self._waiters[camera_public_key].append(on_ready)
            inst = self.instances.get(camera_public_key)
            if inst is not None and inst.proposed:
                return BootstrapState.PENDING
            if camera_public_key not in self._queued:
                self._queued.append(camera_public_key)
            self._start_queued()
            return BootstrapState.PENDING

    def is_ready(self, camera_public_key: bytes) -> bool:
        return camera_public_key in self.ledger

    def _tail_locked(self) -> bool:
        return self._lock is not None and self._lock[0] == self.ledger.tail_hash

    def _start_queued(self) -> None:
        now = self.clock()
        deferred = []
        while self._queued and not self._tail_locked():
            camera = self._queued.popleft()
            if camera in self.ledger:
                self._notify(camera, True)
                continue
            existing = self.instances.get(camera)
            if existing is not None and existing.proposal is not None:
                # Someone else's proposal for this camera is in flight here.
                continue
            if self._not_before.get(camera, now) > now:
                deferred.append(camera)
                continue
            self._not_before.pop(camera, None)
            header = self.ledger.build_block_header(camera, self.clock(), self.public_key)
            inst = ConsensusInstance(self.config, self.me, camera, self._accept_proposal,
                                     started_at=self.clock())
            self.instances[camera] = inst
            self._lock = (header.previous_header_hash, header.header_hash)
            self._broadcast(PeerKind.HELLO_ANNOUNCE, field(camera))
            self._broadcast_consensus(inst.propose(header))
        self._queued.extend(deferred)

    def _accept_proposal(self, header: BlockHeader) -> bool:
        if header.device_public_key in self.ledger:
            return False
        tail = self.ledger.tail_hash
        if header.previous_header_hash != tail:
            return False
        if self._tail_locked() and self._lock[1] != header.header_hash:
            return False
        self._lock = (tail, header.header_hash)
        return True

    def _notify(self, camera: bytes, ok: bool) -> None:
        for cb in self._waiters.pop(camera, []):
            try:
                cb(ok)
            except Exception:  # a waiter must not break the node
                log.exception("bootstrap waiter failed")

    def _on_decision(self, decision: Decision) -> None:
        header = decision.header
        try:
            self.ledger.insert_block(header, decision.certificate)
        except DuplicateDevice:
            return
        except InvalidBlock:
            if header.previous_header_hash != self.ledger.tail_hash:
                self._pending_blocks[header.previous_header_hash] = (header, decision.certificate)
            else:
                log.warning("decided block rejected by ledger: %s", header.header_hash.hex())
            return
        self._after_insert(header.device_public_key)

    def _after_insert(self, device: bytes) -> None:
        self._notify(device, True)
        # Chain advanced: decided headers waiting on this tail can link now.
        nxt = self._pending_blocks.pop(self.ledger.tail_hash, None)
        if nxt is not None:
            self._on_decision(Decision(*nxt))
        self._drain_tx_buffer(device)
        self._start_queued()

    def tick(self) -> None:
        """Expire stalled consensus instances. Call periodically."""
        now = self.clock()
        with self._mutex:
            for device, inst in list(self.instances.items()):
                if inst.decided is not None or device in self.ledger:
                    continue
                if now - inst.started_at < self.config.timeout_ms:
                    continue
                self.counters["consensus_timeouts"] += 1
                self._broadcast_consensus(inst.sent_messages())
                if inst.sent_commit:
                    # Others may decide on our commit; keep the tail lock.
                    inst.started_at = now
                    continue
                del self.instances[device]
                if self._lock is not None and inst.proposal is not None \
                        and self._lock[1] == inst.proposal.header_hash:
                    self._lock = None
                if inst.proposed:
                    # Competing proposers time out together. Staggering the
                    # retry by membership rank lets the lowest rank win the
                    # next round instead of everyone colliding again.
                    rank = self.config.peers.index(self.public_key)
                    self._not_before[device] = now + rank * self.config.timeout_ms
                self._notify(device, False)
            self._start_queued()

    # -- per-chunk protocol -------------------------------------------------

    def process_chunk(self, camera_public_key: bytes, frame: bytes) -> Transaction | None:
        """Run the four ingestion steps for one container frame.

        Returns the appended transaction, or None if the store was
        unreachable and the chunk is buffered for :meth:`retry_pending`.
        Parse errors propagate and leave no trace in the ledger.
        """
        received = time.perf_counter()
        block = self.ledger.find_block(camera_public_key)
        if block is None:
            raise NotBootstrapped(camera_public_key.hex())
        if block.header.managing_gateway != self.public_key:
            raise NotManagingGateway(f"{camera_public_key.hex()} is managed elsewhere")
        chunk = parse_chunk(frame)
        metadata_hash = hash_metadata(extract_metadata(chunk))
        item = _Pending(frame, metadata_hash, received, time.perf_counter() - received)
        session = self._sessions[camera_public_key]
        with session.lock:
            if (session.last_position is not None
                    and chunk.position_ms - session.last_position != self.chunking.interval_ms):
                self.counters["irregular_interval"] += 1
            session.last_position = chunk.position_ms
            session.backlog.append(item)
            done = self._drain_session(camera_public_key, session)
        for tx, it in done:
            if it is item:
                return tx
        return None

    def retry_pending(self, camera_public_key: bytes | None = None) -> list[Transaction]:
        cams = [camera_public_key] if camera_public_key else list(self._sessions)
        out = []
        for cam in cams:
            session = self._sessions[cam]
            with session.lock:
                out.extend(tx for tx, _ in self._drain_session(cam, session))
        return out

    def backlog(self, camera_public_key: bytes) -> int:
        return len(self._sessions[camera_public_key].backlog)

    def _store_with_retry(self, frame: bytes):
        last: StoreError | None = None
        for attempt in range(self.retry.attempts):
            try:
                return self.store.put(frame)
            except TransientStoreError as exc:
                last = exc
                if attempt + 1 < self.retry.attempts:
                    time.sleep(self.retry.backoff_s * (2 ** attempt))
        raise last

    def _drain_session(self, camera: bytes, session: _Session) -> list[tuple[Transaction, _Pending]]:
        done = []
        while session.backlog:
            item = session.backlog[0]
            t0 = time.perf_counter()
            try:
                address = self._store_with_retry(item.frame)
            except StoreError as exc:
                self.counters["store_failures"] += 1
                log.warning("store unavailable for %s: %s; %d chunk(s) buffered",
                            camera.hex()[:16], exc, len(session.backlog))
                break
            t1 = time.perf_counter()
            block = self.ledger.find_block(camera)
            with block.lock:
                last = block.transactions[-1].payload.timestamp if block.transactions else 0
                payload = TransactionPayload(address, item.metadata_hash, max(self.clock(), last))
                tx = self.ledger.prepare_transaction(camera, payload, self.me)
                t2 = time.perf_counter()
                self.ledger.commit_transaction(camera, tx)
                self._broadcast(PeerKind.TX_UPDATE, tx_update_body(camera, tx))
            t3 = time.perf_counter()
            session.backlog.popleft()
            self._record(TimingRecord(camera.hex(), tx.sequence_number, item.extract_s * 1e3,
                                      (t1 - t0) * 1e3, (t2 - t1) * 1e3, (t3 - t2) * 1e3,
                                      (t3 - item.received) * 1e3))
            done.append((tx, item))
        return done

    def _record(self, rec: TimingRecord) -> None:
        with self._metrics_lock:
            self.metrics.append(rec)
            if self._metrics_writer is not None:
                self._metrics_writer.writerow(rec.row())

    # -- peer protocol --------------------------------------------------------

    def on_peer_message(self, data: bytes) -> None:
        try:
            msg = PeerMessage.decode(data)
        except DecodeError:
            self.counters["malformed"] += 1
            return
        if msg.sender not in self.config or msg.sender == self.public_key \
                or not msg.signature_valid():
            self.counters["forged"] += 1
            return
        try:
            with self._mutex:
                handler = {
                    PeerKind.HELLO_ANNOUNCE: self._on_hello_announce,
                    PeerKind.CONSENSUS: self._on_consensus,
                    PeerKind.TX_UPDATE: self._on_tx_update,
                    PeerKind.SYNC_REQUEST: self._on_sync_request,
                    PeerKind.SYNC_RESPONSE: self._on_sync_response,
                }[msg.kind]
                handler(msg)
        except DecodeError:
            self.counters["malformed"] += 1

    def _on_hello_announce(self, msg: PeerMessage) -> None:
        r = Reader(msg.body)
        self.announced[r.field(32)] = msg.sender

    def _on_consensus(self, msg: PeerMessage) -> None:
        cm = ConsensusMessage.decode(msg.body)
        if cm.sender != msg.sender:
            self.counters["forged"] += 1
            return
        block = self.ledger.find_block(cm.device_public_key)
        if block is not None:
            if cm.phase is Phase.COMMIT and cm.header_hash == block.header_hash:
                self.ledger.merge_certificate(block.device_public_key,
                                              [CertificateEntry(cm.sender, cm.signature)])
            return
        inst = self.instances.get(cm.device_public_key)
        if inst is None:
            inst = ConsensusInstance(self.config, self.me, cm.device_public_key,
                                     self._accept_proposal, started_at=self.clock())
            self.instances[cm.device_public_key] = inst
        out, decision = inst.step(cm)
        self.counters["consensus_rejected"] = sum(i.rejected for i in self.instances.values())
        self._broadcast_consensus(out)
        if decision is not None:
            self._on_decision(decision)

    def _on_tx_update(self, msg: PeerMessage) -> None:
        r = Reader(msg.body)
        device = r.field(32)
        tx = Transaction.from_bytes(r.field())
        r.expect_end()
        self._offer_transaction(device, tx, msg.sender)

    def _offer_transaction(self, device: bytes, tx: Transaction, source: bytes) -> None:
        block = self.ledger.find_block(device)
        if block is None:
            first = not self._tx_buffer[device]
            self._tx_buffer[device][tx.sequence_number] = tx
            if first:
                self._send(source, PeerKind.SYNC_REQUEST, sync_request_body(device, 0))
            return
        if block.header.managing_gateway == self.public_key:
            return  # we are the writer for this block
        status = self.ledger.accept_replica_transaction(device, tx)
        if status == "applied":
            self.counters["tx_applied"] += 1
            self._drain_tx_buffer(device)
        elif status == "gap":
            self._tx_buffer[device][tx.sequence_number] = tx
            self.counters["gaps"] += 1
            self._send(block.header.managing_gateway, PeerKind.SYNC_REQUEST,
                       sync_request_body(device, block.next_sequence()))
        elif status in ("invalid", "conflict"):
            self.counters["tx_rejected"] += 1
            log.warning("rejected %s transaction seq %d for %s from %s", status,
                        tx.sequence_number, device.hex()[:16], source.hex()[:16])

    def _drain_tx_buffer(self, device: bytes) -> None:
        buf = self._tx_buffer.get(device)
        block = self.ledger.find_block(device)
        if not buf or block is None:
            return
        for seq in sorted(buf):
            if seq < block.next_sequence():
                del buf[seq]
            elif seq == block.next_sequence():
                tx = buf.pop(seq)
                if self.ledger.accept_replica_transaction(device, tx) != "applied":
                    self.counters["tx_rejected"] += 1
            else:
                break

    def _on_sync_request(self, msg: PeerMessage) -> None:
        r = Reader(msg.body)
        device, from_seq = r.field(32), r.u64()
        r.expect_end()
        block = self.ledger.find_block(device)
        if block is None:
            return
        with block.lock:
            body = sync_response_body(device, block.header, block.certificate,
                                      block.transactions[from_seq:])
        self._send(msg.sender, PeerKind.SYNC_RESPONSE, body)

    def _on_sync_response(self, msg: PeerMessage) -> None:
        r = Reader(msg.body)
        device, hdr, cert_raw, txs_raw = r.field(32), r.field(), r.field(), r.field()
        r.expect_end()
        cert = decode_certificate(cert_raw)
        if hdr:
            header = BlockHeader.decode(hdr)
            if header.device_public_key != device:
                self.counters["forged"] += 1
                return
            if device in self.ledger:
                self.ledger.merge_certificate(device, cert)
            elif len(self.ledger.valid_certificate(header.header_hash, cert)) >= self.config.quorum:
                self._on_decision(Decision(header, cert))
        tr = Reader(txs_raw)
        while not tr.at_end():
            tx = Transaction.from_bytes(tr.field())
            if device in self.ledger:
                self._offer_transaction(device, tx, msg.sender)
            else:
                self._tx_buffer[device][tx.sequence_number] = tx

    def anti_entropy(self) -> None:
        """Ask each block's managing gateway for anything we may have missed."""
        with self._mutex:
            for block in list(self.ledger.blocks):
                mgr = block.header.managing_gateway
                if mgr != self.public_key:
                    self._send(mgr, PeerKind.SYNC_REQUEST,
                               sync_request_body(block.device_public_key, block.next_sequence()))
            for device in list(self._tx_buffer):
                if device not in self.ledger and self._tx_buffer[device]:
                    src = self.announced.get(device)
                    if src is not None:
                        self._send(src, PeerKind.SYNC_REQUEST, sync_request_body(device, 0))
