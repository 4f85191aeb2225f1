"""Auditor checks: ledger structure and stored footage against the ledger.

Verdicts: CLEAN (every check passed), TAMPERED (some check failed) or
INCOMPLETE (some chunks could not be fetched, everything fetched passed).
Exit codes follow the verdict: 0, 1 and 2 respectively.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from .cas import IntegrityError, ObjectNotFound, StoreError, verify_address
from .chunks import ChunkError, extract_metadata, hash_metadata, parse_chunk
from .ledger import Ledger, MalformedTransaction, Transaction, validate_ledger

PASS, FAIL, MISSING = "PASS", "FAIL", "MISSING"
CLEAN, TAMPERED, INCOMPLETE = "CLEAN", "TAMPERED", "INCOMPLETE"
EXIT_CODES = {CLEAN: 0, TAMPERED: 1, INCOMPLETE: 2}


class AuditError(Exception):
    pass


@dataclass(frozen=True)
class Check:
    name: str
    block: int | None
    sequence: int | None
    status: str
    detail: str = ""

    @property
    def target(self) -> str:
        parts = []
        if self.block is not None:
            parts.append(f"block {self.block}")
        if self.sequence is not None:
            parts.append(f"seq {self.sequence}")
        return " ".join(parts) or "ledger"


@dataclass
class AuditReport:
    scope: dict
    checks: list[Check] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        statuses = {c.status for c in self.checks}
        if FAIL in statuses:
            return TAMPERED
        if MISSING in statuses:
            return INCOMPLETE
        return CLEAN

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.verdict]

    def failures(self) -> list[Check]:
        return [c for c in self.checks if c.status != PASS]

    def failing_sequences(self) -> set[int]:
        return {c.sequence for c in self.checks if c.status == FAIL and c.sequence is not None}


def _chain_checks(ledger: Ledger, only_block: int | None = None) -> list[Check]:
    by_coord: dict[tuple, list] = {}
    for v in validate_ledger(ledger):
        by_coord.setdefault((v.block_index, v.sequence), []).append(v)
    checks = []
    for j, block in enumerate(ledger.blocks):
        if only_block is not None and j != only_block:
            continue
        header_issues = by_coord.get((j, None), [])
        cert = [v for v in header_issues if v.kind.startswith("certificate")]
        other = [v for v in header_issues if not v.kind.startswith("certificate")]
        for name, issues in (("block-header", other), ("certificate", cert)):
            if issues:
                checks.extend(Check(f"{name}:{v.kind}", j, None, FAIL, v.detail) for v in issues)
            else:
                checks.append(Check(name, j, None, PASS,
                                    f"{len(block.certificate)} signatures" if name == "certificate" else ""))
        for k in range(len(block.transactions)):
            issues = by_coord.get((j, k), [])
            if issues:
                checks.extend(Check(f"transaction:{v.kind}", j, k, FAIL, v.detail) for v in issues)
            else:
                checks.append(Check("transaction", j, k, PASS))
    return checks


def verify_chain(ledger: Ledger) -> AuditReport:
    """Structural audit of every block: links, certificates, hash chains,
    sequence numbers, signatures and timestamps."""
    report = AuditReport({"kind": "chain", "blocks": len(ledger.blocks)})
    report.checks = _chain_checks(ledger)
    return report


def _check_chunk(store, block_index: int, tx: Transaction) -> list[Check]:
    seq = tx.sequence_number
    addr = tx.payload.storage_address
    try:
        data = store.get(addr)
    except ObjectNotFound:
        return [Check("retrieve", block_index, seq, MISSING, f"{addr.hex} not found")]
    except IntegrityError as exc:
        return [Check("storage-integrity", block_index, seq, FAIL, str(exc))]
    except StoreError as exc:
        return [Check("retrieve", block_index, seq, MISSING, f"store unreachable: {exc}")]
    if not verify_address(addr, data):
        return [Check("storage-integrity", block_index, seq, FAIL,
                      "fetched bytes do not hash to their address")]
    checks = [Check("storage-integrity", block_index, seq, PASS)]
    try:
        chunk = parse_chunk(data)
    except ChunkError as exc:
        return checks + [Check("parse", block_index, seq, FAIL, str(exc))]
    recomputed = hash_metadata(extract_metadata(chunk))
    if recomputed != tx.payload.metadata_hash:
        checks.append(Check("metadata-hash", block_index, seq, FAIL,
                            f"recomputed {recomputed.hex()} != recorded "
                            f"{tx.payload.metadata_hash.hex()}"))
    else:
        checks.append(Check("metadata-hash", block_index, seq, PASS,
                            f"position_ms={chunk.position_ms}"))
    return checks


def verify_video(ledger: Ledger, store, device: bytes, from_seq: int = 0,
                 to_seq: int | None = None, workers: int = 4) -> AuditReport:
    """Check stored chunks of one camera against the recorded metadata hashes.

    ``to_seq`` is inclusive; None means the last transaction.
    """
    block = ledger.find_block(device)
    if block is None:
        raise AuditError(f"no block for device {device.hex()}")
    j = ledger.blocks.index(block)
    txs = block.transactions
    last = len(txs) - 1 if to_seq is None else min(to_seq, len(txs) - 1)
    report = AuditReport({"kind": "video", "device": device.hex(), "block": j,
                          "from": from_seq, "to": last})
    report.checks = _chain_checks(ledger, only_block=j)
    selected = [(k, txs[k]) for k in range(from_seq, last + 1)]
    decodable = [(k, t) for k, t in selected if not isinstance(t, MalformedTransaction)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(lambda kt: _check_chunk(store, j, kt[1]), decodable)
        by_pos = dict(zip((k for k, _ in decodable), results))
    for k, t in selected:
        if k in by_pos:
            # Pinpoint by position so a corrupted sequence field still lands on its row.
            report.checks.extend(Check(c.name, c.block, k, c.status, c.detail) for c in by_pos[k])
    return report


def export_report(report: AuditReport, fmt: str = "text") -> bytes:
    if fmt == "json":
        doc = {
            "scope": report.scope,
            "verdict": report.verdict,
            "exit_code": report.exit_code,
            "checks": [asdict(c) for c in report.checks],
            "failures": [asdict(c) for c in report.failures()],
        }
        return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    scope = ", ".join(f"{k}={v}" for k, v in report.scope.items())
    lines = [f"audit scope: {scope}"]
    for c in report.checks:
        lines.append(f"{c.status:<8} {c.name:<32} {c.target:<18} {c.detail}".rstrip())
    n_pass = sum(c.status == PASS for c in report.checks)
    lines.append(f"{n_pass}/{len(report.checks)} checks passed")
    lines.append(f"verdict: {report.verdict} (exit code {report.exit_code})")
    return ("\n".join(lines) + "\n").encode()
