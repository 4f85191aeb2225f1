import asyncio
import threading

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from vidledger.cas import (
    ContentAddress, IntegrityError, LocalStore, ObjectNotFound, StoreClient, StoreServer,
    TransientStoreError, open_store, verify_address,
)

ABC = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_abc_vector(store):
    assert store.put(b"abc").hex == ABC
    assert oracles.sha256(b"abc").hex() == ABC


def test_idempotent_put(store):
    a = store.put(b"chunk")
    b = store.put(b"chunk")
    assert a == b
    assert len(store.addresses()) == 1


def test_distinct_content_distinct_addresses(store):
    assert store.put(b"a") != store.put(b"b")


def test_round_trip_and_layout(store):
    addr = store.put(b"video bytes")
    assert store.get(addr) == b"video bytes"
    assert store.path_for(addr).parent.name == addr.hex[:2]


def test_empty_rejected(store):
    with pytest.raises(ValueError):
        store.put(b"")


def test_unknown_address(store):
    with pytest.raises(ObjectNotFound):
        store.get(ContentAddress(bytes(32)))


def test_corrupted_file_detected(store):
    addr = store.put(b"original footage")
    path = store.path_for(addr)
    data = bytearray(path.read_bytes())
    data[0] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        store.get(addr)


def test_verify_address():
    addr = ContentAddress.from_hex(ABC)
    assert verify_address(addr, b"abc")
    assert not verify_address(addr, b"abd")
    assert not verify_address(addr, b"ab")


def test_address_hex_round_trip():
    addr = ContentAddress.of(b"xyz")
    assert ContentAddress.from_hex(addr.hex) == addr
    with pytest.raises(ValueError):
        ContentAddress.from_hex(addr.hex.upper())


def test_concurrent_identical_puts(store):
    results = []
    threads = [threading.Thread(target=lambda: results.append(store.put(b"same" * 1000)))
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(results)) == 1
    assert len(store.addresses()) == 1
    assert not list(store.tmp.iterdir())


@settings(max_examples=200, deadline=None)
@given(st.binary(min_size=1, max_size=2048))
def test_put_get_property(tmp_path_factory, content):
    store = LocalStore(tmp_path_factory.getbasetemp() / "prop-cas")
    addr = store.put(content)
    assert addr.digest == oracles.sha256(content)
    assert store.get(addr) == content


@pytest.fixture
def served_store(tmp_path):
    store = LocalStore(tmp_path / "served")
    loop = asyncio.new_event_loop()
    server = StoreServer(store)
    host, port = loop.run_until_complete(server.start())
    t = threading.Thread(target=loop.run_forever, daemon=True)
    t.start()
    yield store, f"{host}:{port}"
    asyncio.run_coroutine_threadsafe(server.close(), loop).result()
    loop.call_soon_threadsafe(loop.stop)
    t.join()


def test_wire_protocol(served_store):
    store, address = served_store
    client = StoreClient(address)
    addr = client.put(b"abc")
    assert addr.hex == ABC
    assert client.get(addr) == b"abc"
    with pytest.raises(ObjectNotFound):
        client.get(ContentAddress(bytes(32)))
    path = store.path_for(addr)
    path.write_bytes(b"abd")
    with pytest.raises(IntegrityError):
        client.get(addr)
    client.close()


def test_unreachable_store_is_transient():
    client = StoreClient("127.0.0.1:1", timeout=0.5)
    with pytest.raises(TransientStoreError):
        client.put(b"x")


def test_open_store(tmp_path):
    assert isinstance(open_store(str(tmp_path)), LocalStore)
    assert isinstance(open_store("127.0.0.1:9"), StoreClient)
