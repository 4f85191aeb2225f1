"""Ed25519 identities for cameras and gateways."""
from __future__ import annotations

import os
import secrets
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

KEY_SIZE = 32
SIGNATURE_SIZE = 64

_RAW = serialization.Encoding.Raw


class IdentityError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceIdentity:
    """A device keypair. ``secret_key`` is None for remote identities."""

    public_key: bytes
    secret_key: bytes | None = None

    def __post_init__(self):
        if len(self.public_key) != KEY_SIZE:
            raise IdentityError(f"public key must be {KEY_SIZE} bytes")
        if self.secret_key is not None and len(self.secret_key) != KEY_SIZE:
            raise IdentityError(f"secret key must be {KEY_SIZE} bytes")

    @property
    def device_id(self) -> str:
        return self.public_key.hex()

    @property
    def can_sign(self) -> bool:
        return self.secret_key is not None

    def public(self) -> "DeviceIdentity":
        return DeviceIdentity(self.public_key)

    def __repr__(self) -> str:
        return f"DeviceIdentity({self.device_id[:16]}..., signer={self.can_sign})"


def _public_from_seed(seed: bytes) -> bytes:
    key = Ed25519PrivateKey.from_private_bytes(seed)
    return key.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)


def generate_identity(seed: bytes | None = None) -> DeviceIdentity:
    """Create an identity from a 32-byte seed, or from a fresh random one."""
    if seed is None:
        seed = secrets.token_bytes(KEY_SIZE)
    elif len(seed) != KEY_SIZE:
        raise IdentityError(f"seed must be exactly {KEY_SIZE} bytes, got {len(seed)}")
    return DeviceIdentity(_public_from_seed(bytes(seed)), bytes(seed))


def sign(identity: DeviceIdentity, message: bytes) -> bytes:
    if identity.secret_key is None:
        raise IdentityError("identity has no secret key")
    return Ed25519PrivateKey.from_private_bytes(identity.secret_key).sign(message)


def verify(public_key: bytes, message: bytes, sig: bytes) -> bool:
    # Malformed inputs yield False so audit paths never raise here.
    if len(public_key) != KEY_SIZE or len(sig) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(sig, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def save_seed(identity: DeviceIdentity, path: str | os.PathLike) -> None:
    if identity.secret_key is None:
        raise IdentityError("cannot save an identity without a secret key")
    path = Path(path)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(identity.secret_key)
    try:
        os.chmod(path, 0o600)
    except OSError:  # platforms without POSIX modes
        pass


def load_seed(path: str | os.PathLike) -> DeviceIdentity:
    seed = Path(path).read_bytes()
    if len(seed) != KEY_SIZE:
        raise IdentityError(f"{path}: key file must hold a raw {KEY_SIZE}-byte seed")
    return generate_identity(seed)
