"""Video chunk container, metadata extraction and the metadata hash.

Container layout (big-endian)::

    magic "SVC1" | width u32 | height u32 | frame_rate_milli u32
    | position_ms u64 | payload_len u64 | payload

The metadata hash is SHA-256 over the ASCII string
``"{width}|{height}|{frame_rate_milli}|{position_ms}|{chunk_hash_hex}"``.
"""
from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from typing import Iterator

from .encoding import sha256

MAGIC = b"SVC1"
_HEADER = struct.Struct(">4sIIIQQ")
HEADER_SIZE = _HEADER.size  # 32

DEFAULT_INTERVAL_MS = 10_000


class ChunkError(ValueError):
    pass


class BadMagic(ChunkError):
    pass


class TruncatedChunk(ChunkError):
    pass


class InvalidChunkField(ChunkError):
    pass


@dataclass(frozen=True)
class VideoChunk:
    width_px: int
    height_px: int
    frame_rate_milli: int
    position_ms: int
    payload: bytes

    def __post_init__(self):
        for name in ("width_px", "height_px", "frame_rate_milli"):
            if getattr(self, name) <= 0:
                raise InvalidChunkField(f"{name} must be positive")
        if not self.payload:
            raise InvalidChunkField("payload must be non-empty")

    def encode(self) -> bytes:
        return encode_chunk(self)


@dataclass(frozen=True)
class VideoMetadata:
    width_px: int
    height_px: int
    frame_rate_milli: int
    position_ms: int
    chunk_hash: bytes

    def __post_init__(self):
        if len(self.chunk_hash) != 32:
            raise InvalidChunkField("chunk_hash must be 32 bytes")


@dataclass(frozen=True)
class ChunkingConfig:
    interval_ms: int = DEFAULT_INTERVAL_MS

    def __post_init__(self):
        if self.interval_ms <= 0:
            raise ValueError("interval_ms must be positive")


def encode_chunk(chunk: VideoChunk) -> bytes:
    head = _HEADER.pack(MAGIC, chunk.width_px, chunk.height_px,
                        chunk.frame_rate_milli, chunk.position_ms, len(chunk.payload))
    return head + chunk.payload


def parse_chunk(frame: bytes) -> VideoChunk:
    if len(frame) < 4 or frame[:4] != MAGIC:
        if len(frame) < 4 and MAGIC.startswith(bytes(frame)):
            raise TruncatedChunk("frame shorter than magic")
        raise BadMagic(f"bad magic {bytes(frame[:4])!r}")
    if len(frame) < HEADER_SIZE:
        raise TruncatedChunk(f"header needs {HEADER_SIZE} bytes, got {len(frame)}")
    _, width, height, fr, pos, n = _HEADER.unpack_from(frame)
    remaining = len(frame) - HEADER_SIZE
    if n > remaining:
        raise TruncatedChunk(f"declared payload of {n} bytes, only {remaining} present")
    if n < remaining:
        raise ChunkError(f"{remaining - n} trailing bytes after payload")
    return VideoChunk(width, height, fr, pos, bytes(frame[HEADER_SIZE:]))


def extract_metadata(chunk: VideoChunk) -> VideoMetadata:
    return VideoMetadata(chunk.width_px, chunk.height_px, chunk.frame_rate_milli,
                         chunk.position_ms, sha256(chunk.payload))


def metadata_string(vm: VideoMetadata) -> bytes:
    return (f"{vm.width_px}|{vm.height_px}|{vm.frame_rate_milli}|"
            f"{vm.position_ms}|{vm.chunk_hash.hex()}").encode("ascii")


def hash_metadata(vm: VideoMetadata) -> bytes:
    return sha256(metadata_string(vm))


def generate_stream(duration_ms: int, interval_ms: int = DEFAULT_INTERVAL_MS, *,
                    payload_bytes: int = 512 * 1024, seed: int = 0,
                    width_px: int = 1920, height_px: int = 1080,
                    frame_rate_milli: int = 30_000) -> Iterator[bytes]:
    """Yield encoded synthetic chunks covering ``duration_ms`` of footage.

    Payloads are seeded pseudo-random bytes; ``position_ms`` marks the
    start of each chunk.
    """
    if payload_bytes <= 0:
        raise ValueError("payload_bytes must be positive")
    rng = random.Random(seed)
    for start in range(0, duration_ms, interval_ms):
        payload = rng.randbytes(payload_bytes)
        yield encode_chunk(VideoChunk(width_px, height_px, frame_rate_milli, start, payload))
