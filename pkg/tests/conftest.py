import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vidledger.cas import LocalStore  # noqa: E402
from vidledger.chunks import generate_stream  # noqa: E402
from vidledger.encoding import sha256  # noqa: E402
from vidledger.identity import generate_identity  # noqa: E402
from vidledger.sim import Cluster, VirtualClock  # noqa: E402


def camera(i: int):
    return generate_identity(sha256(f"test-camera-{i}".encode()))


@pytest.fixture
def store(tmp_path):
    return LocalStore(tmp_path / "cas")


@pytest.fixture
def cluster(store):
    return Cluster(store, n=4, f=1, clock=VirtualClock())


@pytest.fixture
def small_run(cluster):
    """One camera, five 64-byte chunks, fully replicated."""
    cam = camera(0)
    assert cluster.bootstrap(cam.public_key)
    txs = []
    for frame in generate_stream(50_000, 10_000, payload_bytes=64, seed=7):
        cluster.clock.advance(10)
        txs.append(cluster[0].process_chunk(cam.public_key, frame))
    cluster.settle()
    return cluster, cam, txs


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
