"""Per-device ledger: one block per camera, transactions appended over time.

Hashed material uses the canonical encoding from :mod:`vidledger.encoding`:

* header hash = SHA-256(device_public_key, previous_header_hash,
  created_at, managing_gateway); the certificate is not hashed.
* payload = (storage_address, metadata_hash, timestamp)
* transaction hash = SHA-256(previous_transaction_hash, sequence_number,
  payload); the managing gateway signs the transaction hash.
* certificate entry = (gateway key, signature over the COMMIT vote for the
  header hash).

Transaction 0 links to the header hash.
"""
from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field as dc_field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable

from . import identity
from .cas import ContentAddress
from .encoding import DecodeError, Reader, encode, field, sha256, u64
from .framing import pack_frame
from .quorum import ConsensusConfig, Phase, vote_message

ZERO_HASH = bytes(32)
FILE_MAGIC = b"VLDG"
FORMAT_VERSION = 1
JSON_FORMAT = "vidledger/1"

REC_META = 0x01
REC_BLOCK = 0x02
REC_TX = 0x03
REC_CERT = 0x04


class LedgerError(Exception):
    pass


class DuplicateDevice(LedgerError):
    pass


class UnknownDevice(LedgerError, KeyError):
    pass


class NotManagingGateway(LedgerError):
    pass


class StaleTimestamp(LedgerError):
    pass


class InvalidBlock(LedgerError):
    pass


class LedgerFormatError(LedgerError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# -- data types ---------------------------------------------------------------

@dataclass(frozen=True)
class BlockHeader:
    device_public_key: bytes
    previous_header_hash: bytes
    created_at: int
    managing_gateway: bytes

    def encode(self) -> bytes:
        return encode(field(self.device_public_key), field(self.previous_header_hash),
                      u64(self.created_at), field(self.managing_gateway))

    @classmethod
    def decode(cls, data: bytes, base_offset: int = 0) -> "BlockHeader":
        r = Reader(data, base_offset)
        hdr = cls(r.field(32), r.field(32), r.u64(), r.field(32))
        r.expect_end()
        return hdr

    @cached_property
    def header_hash(self) -> bytes:
        return sha256(self.encode())


@dataclass(frozen=True, order=True)
class CertificateEntry:
    signer: bytes
    signature: bytes

    def valid_for(self, header_hash: bytes) -> bool:
        return identity.verify(self.signer, vote_message(Phase.COMMIT, header_hash),
                               self.signature)


def encode_certificate(entries: Iterable[CertificateEntry]) -> bytes:
    return b"".join(field(e.signer) + field(e.signature) for e in entries)


def decode_certificate(data: bytes, base_offset: int = 0) -> list[CertificateEntry]:
    r = Reader(data, base_offset)
    out = []
    while not r.at_end():
        out.append(CertificateEntry(r.field(), r.field()))
    return out


@dataclass(frozen=True)
class TransactionPayload:
    storage_address: ContentAddress
    metadata_hash: bytes
    timestamp: int

    def encode(self) -> bytes:
        return encode(field(self.storage_address.digest), field(self.metadata_hash),
                      u64(self.timestamp))

    @classmethod
    def decode(cls, data: bytes, base_offset: int = 0) -> "TransactionPayload":
        r = Reader(data, base_offset)
        p = cls(ContentAddress(r.field(32)), r.field(32), r.u64())
        r.expect_end()
        return p


def transaction_hash(previous: bytes, sequence_number: int, payload: TransactionPayload) -> bytes:
    return sha256(encode(field(previous), u64(sequence_number), field(payload.encode())))


@dataclass(frozen=True)
class Transaction:
    previous_transaction_hash: bytes
    sequence_number: int
    payload: TransactionPayload
    gateway_signature: bytes
    transaction_hash: bytes

    def compute_hash(self) -> bytes:
        return transaction_hash(self.previous_transaction_hash, self.sequence_number, self.payload)

    def to_bytes(self) -> bytes:
        return encode(field(self.previous_transaction_hash), u64(self.sequence_number),
                      field(self.payload.encode()), field(self.gateway_signature),
                      field(self.transaction_hash))

    @classmethod
    def from_bytes(cls, data: bytes, base_offset: int = 0) -> "Transaction":
        r = Reader(data, base_offset)
        prev = r.field(32)
        seq = r.u64()
        payload_off = r.offset + 4
        payload = TransactionPayload.decode(r.field(), payload_off)
        tx = cls(prev, seq, payload, r.field(64), r.field(32))
        r.expect_end()
        return tx


@dataclass(frozen=True)
class MalformedTransaction:
    """Placeholder for a stored transaction record that does not decode."""

    raw: bytes
    error: str

    def to_bytes(self) -> bytes:
        return self.raw


@dataclass
class Block:
    header: BlockHeader
    certificate: list[CertificateEntry] = dc_field(default_factory=list)
    transactions: list = dc_field(default_factory=list)
    lock: threading.RLock = dc_field(default_factory=threading.RLock, repr=False, compare=False)

    @property
    def device_public_key(self) -> bytes:
        return self.header.device_public_key

    @property
    def header_hash(self) -> bytes:
        return self.header.header_hash

    @property
    def last_hash(self) -> bytes:
        return self.transactions[-1].transaction_hash if self.transactions else self.header_hash

    def next_sequence(self) -> int:
        return len(self.transactions)


# -- ledger -------------------------------------------------------------------

ReplicaStatus = str  # "applied" | "duplicate" | "gap" | "conflict" | "invalid"


class Ledger:
    """Ordered device blocks plus a device-key index.

    Appends to one block are serialized through that block's lock; the
    block list itself is guarded by a ledger-wide lock.
    """

    def __init__(self, config: ConsensusConfig):
        self.config = config
        self.blocks: list[Block] = []
        self._index: dict[bytes, Block] = {}
        self._lock = threading.RLock()
        self.listeners: list[Callable[[int, bytes], None]] = []

    # queries

    def find_block(self, device_public_key: bytes) -> Block | None:
        return self._index.get(device_public_key)

    def __contains__(self, device_public_key: bytes) -> bool:
        return device_public_key in self._index

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tail_hash(self) -> bytes:
        with self._lock:
            return self.blocks[-1].header_hash if self.blocks else ZERO_HASH

    def _require(self, device_public_key: bytes) -> Block:
        block = self._index.get(device_public_key)
        if block is None:
            raise UnknownDevice(device_public_key.hex())
        return block

    def transactions_from(self, device_public_key: bytes, from_sequence: int) -> list[Transaction]:
        block = self._require(device_public_key)
        with block.lock:
            return list(block.transactions[from_sequence:])

    # block admission

    def build_block_header(self, device_public_key: bytes, created_at: int,
                           managing_gateway: bytes,
                           previous_header_hash: bytes | None = None) -> BlockHeader:
        if len(device_public_key) != 32:
            raise ValueError("device key must be 32 bytes")
        with self._lock:
            if device_public_key in self._index:
                raise DuplicateDevice(device_public_key.hex())
            prev = self.tail_hash if previous_header_hash is None else previous_header_hash
            return BlockHeader(device_public_key, prev, created_at, managing_gateway)

    def valid_certificate(self, header_hash: bytes,
                          entries: Iterable[CertificateEntry]) -> list[CertificateEntry]:
        """The distinct, member-signed, valid entries, sorted by signer."""
        seen: dict[bytes, CertificateEntry] = {}
        for e in entries:
            if e.signer in self.config and e.signer not in seen and e.valid_for(header_hash):
                seen[e.signer] = e
        return sorted(seen.values())

    def insert_block(self, header: BlockHeader, certificate: Iterable[CertificateEntry]) -> Block:
        cert = self.valid_certificate(header.header_hash, certificate)
        if len(cert) < self.config.quorum:
            raise InvalidBlock(f"certificate has {len(cert)} valid signatures, "
                               f"quorum is {self.config.quorum}")
        if header.managing_gateway not in self.config:
            raise InvalidBlock("managing gateway is not a member")
        with self._lock:
            if header.device_public_key in self._index:
                raise DuplicateDevice(header.device_public_key.hex())
            if header.previous_header_hash != self.tail_hash:
                raise InvalidBlock("header does not extend the current tail")
            block = Block(header, cert)
            self.blocks.append(block)
            self._index[header.device_public_key] = block
            self._emit(REC_BLOCK, _block_record(block))
        return block

    def merge_certificate(self, device_public_key: bytes,
                          entries: Iterable[CertificateEntry]) -> int:
        """Add further valid COMMIT signatures to a block; returns how many."""
        block = self._require(device_public_key)
        with block.lock:
            have = {e.signer for e in block.certificate}
            new = [e for e in self.valid_certificate(block.header_hash, entries)
                   if e.signer not in have]
            if new:
                block.certificate = sorted(block.certificate + new)
                self._emit(REC_CERT, field(device_public_key) + field(encode_certificate(new)))
            return len(new)

    # transactions

    def prepare_transaction(self, device_public_key: bytes, payload: TransactionPayload,
                            gateway: identity.DeviceIdentity) -> Transaction:
        """Build and sign the next transaction without appending it."""
        block = self._require(device_public_key)
        if gateway.public_key != block.header.managing_gateway:
            raise NotManagingGateway(f"{gateway.device_id} does not manage "
                                     f"{device_public_key.hex()}")
        with block.lock:
            if block.transactions:
                last = block.transactions[-1]
                if payload.timestamp < last.payload.timestamp:
                    raise StaleTimestamp(f"timestamp {payload.timestamp} precedes "
                                         f"{last.payload.timestamp}")
            seq = block.next_sequence()
            h = transaction_hash(block.last_hash, seq, payload)
            return Transaction(block.last_hash, seq, payload, identity.sign(gateway, h), h)

    def commit_transaction(self, device_public_key: bytes, tx: Transaction) -> None:
        block = self._require(device_public_key)
        with block.lock:
            if (tx.sequence_number != block.next_sequence()
                    or tx.previous_transaction_hash != block.last_hash):
                raise LedgerError("transaction is not the next in its block")
            block.transactions.append(tx)
            self._emit(REC_TX, field(device_public_key) + field(tx.to_bytes()))

    def append_transaction(self, device_public_key: bytes, payload: TransactionPayload,
                           gateway: identity.DeviceIdentity) -> Transaction:
        block = self._require(device_public_key)
        with block.lock:
            tx = self.prepare_transaction(device_public_key, payload, gateway)
            self.commit_transaction(device_public_key, tx)
        return tx

    def accept_replica_transaction(self, device_public_key: bytes,
                                   tx: Transaction) -> ReplicaStatus:
        """Apply a transaction received from the managing gateway.

        The transaction must be the next one in the block, correctly
        linked, hashed and signed. Returns one of ``applied``, ``duplicate``,
        ``gap``, ``conflict`` or ``invalid``.
        """
        block = self._require(device_public_key)
        with block.lock:
            nxt = block.next_sequence()
            if tx.sequence_number < nxt:
                return "duplicate" if block.transactions[tx.sequence_number] == tx else "conflict"
            if tx.sequence_number > nxt:
                return "gap"
            if (tx.compute_hash() != tx.transaction_hash
                    or tx.previous_transaction_hash != block.last_hash
                    or not identity.verify(block.header.managing_gateway,
                                           tx.transaction_hash, tx.gateway_signature)):
                return "invalid"
            if block.transactions and tx.payload.timestamp < block.transactions[-1].payload.timestamp:
                return "invalid"
            block.transactions.append(tx)
            self._emit(REC_TX, field(device_public_key) + field(tx.to_bytes()))
            return "applied"

    # persistence

    def _emit(self, kind: int, body: bytes) -> None:
        for listener in self.listeners:
            listener(kind, body)

    def to_bytes(self) -> bytes:
        """Canonical serialization: blocks in chain order, each followed by its
        transactions. Replicas holding the same state serialize identically."""
        with self._lock:
            out = [FILE_MAGIC, pack_frame(REC_META, _meta_record(self.config))]
            for block in self.blocks:
                with block.lock:
                    out.append(pack_frame(REC_BLOCK, _block_record(block)))
                    for tx in block.transactions:
                        out.append(pack_frame(REC_TX, field(block.device_public_key)
                                              + field(tx.to_bytes())))
            return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ledger":
        """Load a ledger file without enforcing any invariant.

        Records may appear in any order as long as a transaction follows
        its block. A transaction record whose body does not decode is kept
        as a :class:`MalformedTransaction` so validation can point at it.
        """
        if data[:4] != FILE_MAGIC:
            raise LedgerFormatError("not a ledger file (bad magic)", 0)
        pos = 4
        ledger: Ledger | None = None
        while pos < len(data):
            if pos + 5 > len(data):
                raise LedgerFormatError("truncated record header", pos)
            n = int.from_bytes(data[pos:pos + 4], "big")
            if n == 0 or pos + 4 + n > len(data):
                raise LedgerFormatError(f"record length {n} overruns file", pos)
            kind, body, body_off = data[pos + 4], data[pos + 5:pos + 4 + n], pos + 5
            try:
                if kind == REC_META:
                    if ledger is not None:
                        raise LedgerFormatError("duplicate meta record", pos)
                    ledger = cls(_decode_meta(body, body_off))
                elif ledger is None:
                    raise LedgerFormatError("record before meta record", pos)
                elif kind == REC_BLOCK:
                    r = Reader(body, body_off)
                    hdr_off = r.offset + 4
                    header = BlockHeader.decode(r.field(), hdr_off)
                    cert_off = r.offset + 4
                    cert = decode_certificate(r.field(), cert_off)
                    r.expect_end()
                    ledger._load_block(Block(header, cert), pos)
                elif kind in (REC_TX, REC_CERT):
                    r = Reader(body, body_off)
                    device = r.field(32)
                    inner_off = r.offset + 4
                    inner = r.field()
                    r.expect_end()
                    block = ledger.find_block(device)
                    if block is None:
                        raise LedgerFormatError(f"record for unknown device {device.hex()}", pos)
                    if kind == REC_CERT:
                        block.certificate = sorted(block.certificate
                                                   + decode_certificate(inner, inner_off))
                    else:
                        try:
                            tx = Transaction.from_bytes(inner, inner_off)
                        except DecodeError as exc:
                            tx = MalformedTransaction(inner, str(exc))
                        block.transactions.append(tx)
                else:
                    raise LedgerFormatError(f"unknown record kind {kind:#x}", pos)
            except DecodeError as exc:
                raise LedgerFormatError(f"corrupt record: {exc}", exc.offset) from exc
            pos += 4 + n
        if ledger is None:
            raise LedgerFormatError("missing meta record", pos)
        return ledger

    def _load_block(self, block: Block, offset: int) -> None:
        if block.device_public_key in self._index:
            raise LedgerFormatError("second block for the same device", offset)
        self.blocks.append(block)
        self._index[block.device_public_key] = block

    def to_json(self) -> dict:
        with self._lock:
            return {
                "format": JSON_FORMAT,
                "f": self.config.f,
                "peers": [p.hex() for p in self.config.peers],
                "blocks": [_block_json(b) for b in self.blocks],
            }

    @classmethod
    def from_json(cls, doc: dict) -> "Ledger":
        try:
            if doc.get("format") != JSON_FORMAT:
                raise LedgerFormatError(f"unsupported format {doc.get('format')!r}", 0)
            ledger = cls(ConsensusConfig(tuple(bytes.fromhex(p) for p in doc["peers"]),
                                         int(doc["f"])))
            for i, b in enumerate(doc["blocks"]):
                header = BlockHeader(bytes.fromhex(b["device"]),
                                     bytes.fromhex(b["previous_header_hash"]),
                                     int(b["created_at"]), bytes.fromhex(b["managing_gateway"]))
                cert = [CertificateEntry(bytes.fromhex(c["signer"]), bytes.fromhex(c["signature"]))
                        for c in b["certificate"]]
                block = Block(header, cert)
                for t in b["transactions"]:
                    payload = TransactionPayload(ContentAddress.from_hex(t["storage_address"]),
                                                 bytes.fromhex(t["metadata_hash"]),
                                                 int(t["timestamp"]))
                    block.transactions.append(Transaction(
                        bytes.fromhex(t["previous_transaction_hash"]), int(t["sequence_number"]),
                        payload, bytes.fromhex(t["gateway_signature"]),
                        bytes.fromhex(t["transaction_hash"])))
                ledger._load_block(block, i)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, LedgerFormatError):
                raise
            raise LedgerFormatError(f"invalid JSON ledger: {exc!r}", 0) from exc
        return ledger


def _meta_record(config: ConsensusConfig) -> bytes:
    return u64(config.f) + field(b"".join(config.peers))


def _decode_meta(body: bytes, offset: int) -> ConsensusConfig:
    r = Reader(body, offset)
    f = r.u64()
    peers = r.field()
    r.expect_end()
    if len(peers) % 32:
        raise DecodeError("peer table is not a multiple of 32 bytes", offset)
    try:
        return ConsensusConfig(tuple(peers[i:i + 32] for i in range(0, len(peers), 32)), f)
    except ValueError as exc:
        raise DecodeError(str(exc), offset) from exc


def _block_record(block: Block) -> bytes:
    return field(block.header.encode()) + field(encode_certificate(block.certificate))


def _block_json(b: Block) -> dict:
    h = b.header
    return {
        "device": h.device_public_key.hex(),
        "previous_header_hash": h.previous_header_hash.hex(),
        "created_at": h.created_at,
        "managing_gateway": h.managing_gateway.hex(),
        "header_hash": h.header_hash.hex(),
        "certificate": [{"signer": e.signer.hex(), "signature": e.signature.hex()}
                        for e in b.certificate],
        "transactions": [_tx_json(t) for t in b.transactions],
    }


def _tx_json(t) -> dict:
    if isinstance(t, MalformedTransaction):
        return {"malformed": t.raw.hex(), "error": t.error}
    return {
        "sequence_number": t.sequence_number,
        "previous_transaction_hash": t.previous_transaction_hash.hex(),
        "storage_address": t.payload.storage_address.hex,
        "metadata_hash": t.payload.metadata_hash.hex(),
        "timestamp": t.payload.timestamp,
        "gateway_signature": t.gateway_signature.hex(),
        "transaction_hash": t.transaction_hash.hex(),
    }


def load_ledger(path: str | os.PathLike) -> Ledger:
    """Read a binary ledger file or its JSON export."""
    data = Path(path).read_bytes()
    if data[:1] == b"{":
        try:
            doc = json.loads(data)
        except json.JSONDecodeError as exc:
            raise LedgerFormatError(f"invalid JSON: {exc.msg}", exc.pos) from exc
        return Ledger.from_json(doc)
    return Ledger.from_bytes(data)


class LedgerLog:
    """Append-only on-disk log mirroring every ledger mutation."""

    def __init__(self, path: str | os.PathLike, ledger: Ledger):
        self.path = Path(path)
        self._lock = threading.Lock()
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "ab")
        if fresh:
            self._fh.write(FILE_MAGIC + pack_frame(REC_META, _meta_record(ledger.config)))
            self._fh.flush()
        ledger.listeners.append(self.append)

    def append(self, kind: int, body: bytes) -> None:
        with self._lock:
            self._fh.write(pack_frame(kind, body))
            self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def open_ledger(path: str | os.PathLike, config: ConsensusConfig) -> tuple[Ledger, LedgerLog]:
    """Load (or create) a persisted ledger and keep appending to it."""
    p = Path(path)
    if p.exists() and p.stat().st_size:
        ledger = Ledger.from_bytes(p.read_bytes())
        if ledger.config.peers != config.peers or ledger.config.f != config.f:
            raise LedgerError(f"{p}: membership differs from configuration")
        ledger.config = config
    else:
        ledger = Ledger(config)
    return ledger, LedgerLog(p, ledger)


# -- validation ---------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str
    device: str
    block_index: int
    sequence: int | None  # position within the block; None for header-level
    detail: str

    def __str__(self) -> str:
        where = f"block {self.block_index} ({self.device[:16]})"
        if self.sequence is not None:
            where += f" seq {self.sequence}"
        return f"{self.kind} at {where}: {self.detail}"


def _certificate_violations(ledger: Ledger, j: int, block: Block) -> list[Violation]:
    out = []
    dev, hh = block.device_public_key.hex(), block.header_hash
    seen = set()
    for e in block.certificate:
        if e.signer not in ledger.config:
            out.append(Violation("certificate-signer", dev, j, None,
                                 f"{e.signer.hex()[:16]} is not a member"))
        elif not e.valid_for(hh):
            out.append(Violation("certificate-signature", dev, j, None,
                                 f"bad signature from {e.signer.hex()[:16]}"))
        else:
            seen.add(e.signer)
    if len(seen) < ledger.config.quorum:
        out.append(Violation("certificate-quorum", dev, j, None,
                             f"{len(seen)} valid distinct signatures, need {ledger.config.quorum}"))
    return out


def validate_ledger(ledger: Ledger) -> list[Violation]:
    """Check every structural invariant; an empty list means valid.

    A transaction whose stored hash does not match its contents is reported
    once at its own position: the next transaction's link and sequence are
    then checked against positions rather than against the broken record,
    so a single corrupted record never implicates its neighbours.
    """
    violations: list[Violation] = []
    with ledger._lock:
        blocks = list(ledger.blocks)
    prev_header = ZERO_HASH
    seen_devices: set[bytes] = set()
    for j, block in enumerate(blocks):
        with block.lock:
            txs = list(block.transactions)
            header = block.header
        dev = header.device_public_key.hex()
        if header.previous_header_hash != prev_header:
            violations.append(Violation("header-link", dev, j, None,
                                        "previous_header_hash does not match preceding block"))
        if header.device_public_key in seen_devices:
            violations.append(Violation("duplicate-device", dev, j, None,
                                        "device already has a block"))
        seen_devices.add(header.device_public_key)
        if header.managing_gateway not in ledger.config:
            violations.append(Violation("managing-gateway", dev, j, None,
                                        "managing gateway is not a member"))
        violations.extend(_certificate_violations(ledger, j, block))
        prev_header = header.header_hash
        violations.extend(_transaction_violations(header, j, txs))
    return violations


def _transaction_violations(header: BlockHeader, j: int, txs: list) -> list[Violation]:
    out = []
    dev = header.device_public_key.hex()
    anchor, anchor_ok = header.header_hash, True
    expected_seq, last_ts = 0, None
    for pos, tx in enumerate(txs):
        def report(kind, detail):
            out.append(Violation(kind, dev, j, pos, detail))

        if isinstance(tx, MalformedTransaction):
            report("malformed", tx.error)
            anchor_ok, expected_seq = False, expected_seq + 1
            continue
        consistent = tx.compute_hash() == tx.transaction_hash
        if not consistent:
            report("hash-mismatch", "stored transaction_hash does not match contents")
        if anchor_ok and tx.previous_transaction_hash != anchor:
            report("chain-break", "previous_transaction_hash does not match predecessor")
        if tx.sequence_number != expected_seq:
            report("sequence-gap", f"sequence {tx.sequence_number}, expected {expected_seq}")
        if not identity.verify(header.managing_gateway, tx.transaction_hash, tx.gateway_signature):
            report("signature", "gateway signature does not verify")
        if consistent and last_ts is not None and tx.payload.timestamp < last_ts:
            report("timestamp", f"timestamp {tx.payload.timestamp} precedes {last_ts}")
        anchor, anchor_ok = tx.transaction_hash, consistent
        if consistent:
            expected_seq, last_ts = tx.sequence_number + 1, tx.payload.timestamp
        else:
            expected_seq += 1
    return out
