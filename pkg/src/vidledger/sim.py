"""In-process peer network for running several gateways in one process."""
from __future__ import annotations

import collections
import random
import threading
from typing import Callable, Iterable

from .encoding import sha256
from .gateway import Gateway, PeerKind, PeerMessage, RetryPolicy
from .identity import DeviceIdentity, generate_identity
from .quorum import ConsensusConfig

DropRule = Callable[[bytes, bytes, bytes], bool]


class VirtualClock:
    def __init__(self, start_ms: int = 1_700_000_000_000):
        self.now = start_ms

    def __call__(self) -> int:
        return self.now

    def advance(self, ms: int) -> None:
        self.now += ms


def drop_kind(kind: PeerKind, probability: float, rng: random.Random) -> DropRule:
    """Drop messages of one kind with the given probability."""
    def rule(src: bytes, dst: bytes, data: bytes) -> bool:
        return PeerMessage.decode(data).kind is kind and rng.random() < probability
    return rule


class LocalNetwork:
    """Queues peer messages and delivers them on :meth:`pump`.

    Sending never blocks and is thread-safe, so it behaves like handing a
    message to a transport. Messages to or from nodes in ``down`` vanish.
    """

    def __init__(self, rng: random.Random | None = None, drop: DropRule | None = None):
        self.nodes: dict[bytes, Gateway] = {}
        self.queue: collections.deque = collections.deque()
        self.down: set[bytes] = set()
        self.drop = drop
        self.rng = rng
        self.delivered = 0
        self.dropped = 0
        self._lock = threading.Lock()

    def sender(self, src: bytes) -> Callable[[bytes, bytes], None]:
        def send(dst: bytes, data: bytes) -> None:
            with self._lock:
                self.queue.append((src, dst, data))
        return send

    def _pop(self):
        with self._lock:
            if not self.queue:
                return None
            if self.rng is not None and len(self.queue) > 1:
                i = self.rng.randrange(len(self.queue))
                self.queue.rotate(-i)
                item = self.queue.popleft()
                self.queue.rotate(i)
                return item
            return self.queue.popleft()

    def pump(self, limit: int | None = None) -> int:
        n = 0
        while limit is None or n < limit:
            item = self._pop()
            if item is None:
                break
            src, dst, data = item
            n += 1
            if src in self.down or dst in self.down or dst not in self.nodes:
                self.dropped += 1
                continue
            if self.drop is not None and self.drop(src, dst, data):
                self.dropped += 1
                continue
            self.nodes[dst].on_peer_message(data)
            self.delivered += 1
        return n


def gateway_identities(n: int, seed: int = 0) -> list[DeviceIdentity]:
    return [generate_identity(sha256(f"gateway-{seed}-{i}".encode())) for i in range(n)]


class Cluster:
    """``n`` gateways sharing one store over a :class:`LocalNetwork`."""

    def __init__(self, store, n: int = 4, f: int = 1, *, seed: int = 0,
                 clock: Callable[[], int] | None = None, network: LocalNetwork | None = None,
                 timeout_ms: int = 2000, retry: RetryPolicy = RetryPolicy()):
        self.clock = clock if clock is not None else VirtualClock()
        self.network = network if network is not None else LocalNetwork()
        self.identities = gateway_identities(n, seed)
        self.config = ConsensusConfig(tuple(i.public_key for i in self.identities), f, timeout_ms)
        self.gateways = [Gateway(ident, self.config, store, self.network.sender(ident.public_key),
                                 clock=self.clock, retry=retry)
                         for ident in self.identities]
        for gw in self.gateways:
            self.network.nodes[gw.public_key] = gw

    def __getitem__(self, i: int) -> Gateway:
        return self.gateways[i]

    def stop(self, i: int) -> None:
        self.network.down.add(self.gateways[i].public_key)

    def live(self) -> list[Gateway]:
        return [g for g in self.gateways if g.public_key not in self.network.down]

    def bootstrap(self, camera_public_key: bytes, via: int = 0, max_rounds: int = 20) -> bool:
        """Send a camera hello to gateway ``via`` and run the network until the
        block is admitted there; ticks the clock past timeouts if stuck."""
        gw = self.gateways[via]
        gw.handle_camera_hello(camera_public_key)
        for _ in range(max_rounds):
            self.network.pump()
            if gw.is_ready(camera_public_key):
                return True
            if isinstance(self.clock, VirtualClock):
                self.clock.advance(self.config.timeout_ms)
            for g in self.live():
                g.tick()
            if not gw.is_ready(camera_public_key):
                gw.handle_camera_hello(camera_public_key)
        return gw.is_ready(camera_public_key)

    def settle(self, rounds: int = 10) -> None:
        """Deliver everything, then repair with anti-entropy until stable."""
        for _ in range(rounds):
            self.network.pump()
            before = self.fingerprint()
            for g in self.live():
                g.anti_entropy()
            self.network.pump()
            if self.fingerprint() == before and not self.network.queue:
                return

    def fingerprint(self) -> tuple:
        return tuple(sha256(g.ledger.to_bytes()) for g in self.live())

    def converged(self, gateways: Iterable[Gateway] | None = None) -> bool:
        gws = list(gateways) if gateways is not None else self.live()
        first = gws[0].ledger.to_bytes()
        return all(g.ledger.to_bytes() == first for g in gws[1:])
