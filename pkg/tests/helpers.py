from vidledger.cas import ContentAddress
from vidledger.encoding import sha256
from vidledger.identity import generate_identity, sign
from vidledger.ledger import CertificateEntry, Ledger, TransactionPayload
from vidledger.quorum import ConsensusConfig, Phase, vote_message

GATEWAYS = [generate_identity(sha256(f"ledger-gw-{i}".encode())) for i in range(4)]
CONFIG = ConsensusConfig(tuple(g.public_key for g in GATEWAYS), f=1)


def certify(header, signers=GATEWAYS[:3]):
    return [CertificateEntry(g.public_key, sign(g, vote_message(Phase.COMMIT, header.header_hash)))
            for g in signers]


def payload(i: int, ts: int | None = None) -> TransactionPayload:
    return TransactionPayload(ContentAddress.of(f"chunk-{i}".encode()),
                              sha256(f"meta-{i}".encode()), 1000 + i if ts is None else ts)


def build_ledger(devices=1, txs=3, manager=GATEWAYS[0]) -> Ledger:
    ledger = Ledger(CONFIG)
    for d in range(devices):
        dev = generate_identity(sha256(f"ledger-cam-{d}".encode())).public_key
        header = ledger.build_block_header(dev, 1_000 + d, manager.public_key)
        ledger.insert_block(header, certify(header))
        for i in range(txs):
            ledger.append_transaction(dev, payload(i), manager)
    return ledger
