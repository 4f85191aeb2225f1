"""Three-phase agreement among a fixed set of gateways on a new device block.

One :class:`ConsensusInstance` runs per device bootstrap. The proposer's
PRE_PREPARE counts as its PREPARE vote. A node sends COMMIT once it holds
a quorum (2f+1) of PREPAREs for the proposal it accepted, and a header is
decided once 2f+1 COMMITs for it are collected and the header itself is
known. There is no view change: a stalled instance is abandoned by the
caller and the camera retries.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from . import identity
from .encoding import DecodeError, Reader, field
from .ledger import BlockHeader, CertificateEntry
from .quorum import ConsensusConfig, Phase, vote_message

log = logging.getLogger(__name__)


class ConsensusError(Exception):
    pass


@dataclass(frozen=True)
class ConsensusMessage:
    phase: Phase
    device_public_key: bytes
    header_hash: bytes
    sender: bytes
    signature: bytes
    proposed_header: BlockHeader | None = None

    @classmethod
    def create(cls, phase: Phase, header_hash: bytes, signer: identity.DeviceIdentity,
               device_public_key: bytes,
               proposed_header: BlockHeader | None = None) -> "ConsensusMessage":
        sig = identity.sign(signer, vote_message(phase, header_hash))
        return cls(phase, device_public_key, header_hash, signer.public_key, sig, proposed_header)

    def signature_valid(self) -> bool:
        return identity.verify(self.sender, vote_message(self.phase, self.header_hash),
                               self.signature)

    def encode(self) -> bytes:
        hdr = self.proposed_header.encode() if self.proposed_header else b""
        return (field(bytes((self.phase.value,))) + field(self.device_public_key)
                + field(self.header_hash) + field(hdr) + field(self.sender)
                + field(self.signature))

    @classmethod
    def decode(cls, data: bytes) -> "ConsensusMessage":
        r = Reader(data)
        raw_phase = r.field(1)[0]
        try:
            phase = Phase(raw_phase)
        except ValueError:
            raise DecodeError(f"unknown phase {raw_phase}") from None
        device, hh, hdr = r.field(32), r.field(32), r.field()
        sender, sig = r.field(32), r.field(64)
        r.expect_end()
        header = BlockHeader.decode(hdr) if hdr else None
        return cls(phase, device, hh, sender, sig, header)


@dataclass(frozen=True)
class Decision:
    header: BlockHeader
    certificate: list[CertificateEntry]


class ConsensusInstance:
    """Single-threaded state machine for one device's block admission.

    ``accept`` lets the owner veto a well-formed proposal (for example one
    that does not extend its current chain tail); it is consulted only for
    the first PRE_PREPARE the instance sees from a valid proposer.
    """

    def __init__(self, config: ConsensusConfig, me: identity.DeviceIdentity,
                 device_public_key: bytes,
                 accept: Callable[[BlockHeader], bool] | None = None,
                 started_at: int = 0):
        if me.public_key not in config:
            raise ConsensusError("local identity is not a member")
        self.config = config
        self.me = me
        self.device = device_public_key
        self.accept = accept
        self.started_at = started_at
        self.proposal: BlockHeader | None = None
        self.known_headers: dict[bytes, BlockHeader] = {}
        self.prepare_votes: dict[bytes, set[bytes]] = {}
        self.commit_votes: dict[bytes, dict[bytes, bytes]] = {}
        self.sent_commit = False
        self.decided: BlockHeader | None = None
        self.proposed = False
        self.rejected = 0
        self.ignored = 0
        self._sent: list[ConsensusMessage] = []

    @property
    def quorum(self) -> int:
        return self.config.quorum

    def _msg(self, phase: Phase, hh: bytes, header: BlockHeader | None = None) -> ConsensusMessage:
        m = ConsensusMessage.create(phase, hh, self.me, self.device, header)
        self._sent.append(m)
        return m

    def sent_messages(self) -> list[ConsensusMessage]:
        """Everything this node has emitted, for retransmission."""
        return list(self._sent)

    def propose(self, header: BlockHeader) -> list[ConsensusMessage]:
        if self.proposed or self.proposal is not None:
            raise ConsensusError("instance already has a proposal")
        if header.device_public_key != self.device:
            raise ConsensusError("header is for a different device")
        if header.managing_gateway != self.me.public_key:
            raise ConsensusError("proposer must be the managing gateway")
        hh = header.header_hash
        self.proposed = True
        self.proposal = header
        self.known_headers[hh] = header
        self.prepare_votes.setdefault(hh, set()).add(self.me.public_key)
        out = [self._msg(Phase.PRE_PREPARE, hh, header)]
        return out + self._advance()[0]

    def step(self, msg: ConsensusMessage) -> tuple[list[ConsensusMessage], Decision | None]:
        if msg.sender not in self.config or not msg.signature_valid():
            self.rejected += 1
            return [], None
        if msg.device_public_key != self.device:
            self.rejected += 1
            return [], None
        hh = msg.header_hash
        out: list[ConsensusMessage] = []
        if msg.phase is Phase.PRE_PREPARE:
            header = msg.proposed_header
            if (header is None or header.header_hash != hh or header.device_public_key != self.device
                    or header.managing_gateway != msg.sender):
                self.rejected += 1
                return [], None
            self.known_headers.setdefault(hh, header)
            if self.proposal is not None:
                self.ignored += 1
            elif self.accept is not None and not self.accept(header):
                self.ignored += 1
            else:
                self.proposal = header
                votes = self.prepare_votes.setdefault(hh, set())
                votes.add(msg.sender)
                votes.add(self.me.public_key)
                out.append(self._msg(Phase.PREPARE, hh))
        elif msg.phase is Phase.PREPARE:
            votes = self.prepare_votes.setdefault(hh, set())
            if msg.sender in votes:
                self.ignored += 1
            votes.add(msg.sender)
        else:
            votes = self.commit_votes.setdefault(hh, {})
            if msg.sender in votes:
                self.ignored += 1
            votes.setdefault(msg.sender, msg.signature)
        more, decision = self._advance()
        return out + more, decision

    def _advance(self) -> tuple[list[ConsensusMessage], Decision | None]:
        out = []
        if self.proposal is not None and not self.sent_commit:
            hh = self.proposal.header_hash
            if len(self.prepare_votes.get(hh, ())) >= self.quorum:
                self.sent_commit = True
                m = self._msg(Phase.COMMIT, hh)
                self.commit_votes.setdefault(hh, {})[self.me.public_key] = m.signature
                out.append(m)
        if self.decided is None:
            for hh, votes in self.commit_votes.items():
                # A commit quorum implies f+1 honest nodes prepared hh, so
                # adopting it without a local prepare quorum is still safe.
                if len(votes) >= self.quorum and hh in self.known_headers:
                    self.decided = self.known_headers[hh]
                    return out, Decision(self.decided, self.certificate())
        return out, None

    def certificate(self) -> list[CertificateEntry]:
        if self.decided is None:
            return []
        votes = self.commit_votes.get(self.decided.header_hash, {})
        return sorted(CertificateEntry(s, sig) for s, sig in votes.items())

    def snapshot(self) -> tuple:
        """Hashable summary of the protocol state (for state-space search)."""
        return (
            self.proposal.header_hash if self.proposal else None,
            tuple(sorted((h, tuple(sorted(v))) for h, v in self.prepare_votes.items())),
            tuple(sorted((h, tuple(sorted(v))) for h, v in self.commit_votes.items())),
            tuple(sorted(self.known_headers)),
            self.sent_commit,
            self.decided.header_hash if self.decided else None,
        )
