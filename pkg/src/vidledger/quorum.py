"""Static gateway membership and the byte string each consensus vote signs."""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .encoding import field


class Phase(enum.Enum):
    PRE_PREPARE = 1
    PREPARE = 2
    COMMIT = 3


@dataclass(frozen=True)
class ConsensusConfig:
    peers: tuple[bytes, ...]
    f: int
    timeout_ms: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "peers", tuple(self.peers))
        if self.f < 0:
            raise ValueError("f must be non-negative")
        if len(self.peers) < 3 * self.f + 1:
            raise ValueError(f"{len(self.peers)} peers cannot tolerate f={self.f} (need 3f+1)")
        if len(set(self.peers)) != len(self.peers):
            raise ValueError("duplicate peer keys")
        if any(len(p) != 32 for p in self.peers):
            raise ValueError("peer keys must be 32 bytes")

    @property
    def n(self) -> int:
        return len(self.peers)

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    def __contains__(self, key: bytes) -> bool:
        return key in self.peers


def vote_message(phase: Phase, header_hash: bytes) -> bytes:
    """Bytes signed by a consensus vote; COMMIT votes form block certificates."""
    return field(phase.name.encode("ascii")) + field(header_hash)
