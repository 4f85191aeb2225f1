"""Tamper-evident storage of surveillance video chunks.

Gateways anchor per-chunk metadata hashes in a per-device permissioned
ledger, keep the chunk bytes in a content-addressed store and let an
auditor check stored footage against the ledger later.
"""

__version__ = "0.1.0"
