"""Hashing, Ed25519 signing and chunked AES-256-GCM used across the package."""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

HASH_SIZE = 32
ADDRESS_SIZE = 20
SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
CHUNK_SIZE = 64 * 1024
TRADE_ID_SIZE = 16

ZERO_HASH = b"\x00" * HASH_SIZE


class AuthenticationError(Exception):
    """A ciphertext chunk failed AES-GCM authentication."""


class ChunkLayoutError(ValueError):
    """Chunk indices or totals are inconsistent."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def address_of(public_key: bytes) -> bytes:
    """Address = first 20 bytes of SHA-256 over the raw public key."""
    if len(public_key) != PUBLIC_KEY_SIZE:
        raise ValueError("public key must be 32 bytes")
    return sha256(public_key)[:ADDRESS_SIZE]


class KeyPair:
    """Ed25519 signing key with its derived address."""

    def __init__(self, private_key: Optional[Ed25519PrivateKey] = None):
        self._sk = private_key or Ed25519PrivateKey.generate()
        self.public_key = self._sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self.address = address_of(self.public_key)

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        if len(seed) != 32:
            raise ValueError("Ed25519 seed must be 32 bytes")
        return cls(Ed25519PrivateKey.from_private_bytes(seed))

    @property
    def secret_key(self) -> bytes:
        return self._sk.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )

    def sign(self, message: bytes) -> bytes:
        return self._sk.sign(message)

    def __repr__(self) -> str:
        return f"KeyPair(address={self.address.hex()})"


def sign(secret_key: bytes, message: bytes) -> bytes:
    return KeyPair.from_seed(secret_key).sign(message)


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Ed25519 verification. Raises ValueError on a malformed public key."""
    if len(public_key) != PUBLIC_KEY_SIZE:
        raise ValueError("public key must be 32 bytes")
    pk = Ed25519PublicKey.from_public_bytes(public_key)
    if len(signature) != SIGNATURE_SIZE:
        return False
    try:
        pk.verify(signature, message)
    except InvalidSignature:
        return False
    return True


@dataclass(frozen=True)
class DataKey:
    key: bytes

    def __post_init__(self):
        if len(self.key) != KEY_SIZE:
            raise ValueError("data key must be 32 bytes (AES-256)")

    @classmethod
    def generate(cls, rng=None) -> "DataKey":
        raw = rng.randbytes(KEY_SIZE) if rng is not None else os.urandom(KEY_SIZE)
        return cls(raw)


@dataclass(frozen=True)
class CipherChunk:
    index: int
    total: int
    nonce: bytes
    tag: bytes
    body: bytes

    def to_bytes(self) -> bytes:
        return (
            struct.pack(">II", self.index, self.total)
            + self.nonce
            + self.tag
            + struct.pack(">I", len(self.body))
            + self.body
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CipherChunk":
        if len(raw) < 8 + NONCE_SIZE + TAG_SIZE + 4:
            raise ValueError("truncated chunk")
        index, total = struct.unpack_from(">II", raw, 0)
        off = 8
        nonce = raw[off : off + NONCE_SIZE]
        off += NONCE_SIZE
        tag = raw[off : off + TAG_SIZE]
        off += TAG_SIZE
        (n,) = struct.unpack_from(">I", raw, off)
        off += 4
        body = raw[off : off + n]
        if len(body) != n or off + n != len(raw):
            raise ValueError("chunk length mismatch")
        return cls(index, total, nonce, tag, body)


def _chunk_aad(trade_id: bytes, index: int, total: int) -> bytes:
    return bytes(trade_id) + struct.pack(">II", index, total)


def _chunk_nonce(index: int) -> bytes:
    return index.to_bytes(NONCE_SIZE, "little")


def encrypt_chunked(key: DataKey, data: bytes, trade_id: bytes) -> list[CipherChunk]:
    """Split ``data`` into 64 KiB pieces and seal each one independently.

    The AAD binds every chunk to ``trade_id``, its index and the chunk count, so
    chunks cannot be replayed into another trade or reordered.
    """
    if not data:
        raise ValueError("cannot encrypt an empty payload")
    aead = AESGCM(key.key)
    total = (len(data) + CHUNK_SIZE - 1) // CHUNK_SIZE
    chunks = []
    for i in range(total):
        piece = data[i * CHUNK_SIZE : (i + 1) * CHUNK_SIZE]
        nonce = _chunk_nonce(i)
        sealed = aead.encrypt(nonce, piece, _chunk_aad(trade_id, i, total))
        chunks.append(CipherChunk(i, total, nonce, sealed[-TAG_SIZE:], sealed[:-TAG_SIZE]))
    return chunks


def decrypt_chunk(key: DataKey, chunk: CipherChunk, trade_id: bytes) -> bytes:
    if not 0 <= chunk.index < chunk.total:
        raise ChunkLayoutError(f"chunk index {chunk.index} outside 0..{chunk.total - 1}")
    aead = AESGCM(key.key)
    try:
        return aead.decrypt(
            chunk.nonce, chunk.body + chunk.tag, _chunk_aad(trade_id, chunk.index, chunk.total)
        )
    except InvalidTag as exc:
        raise AuthenticationError(f"chunk {chunk.index} failed authentication") from exc


def decrypt_chunked(key: DataKey, chunks: list[CipherChunk], trade_id: bytes) -> bytes:
    if not chunks:
        raise ChunkLayoutError("no chunks")
    total = chunks[0].total
    ordered = sorted(chunks, key=lambda c: c.index)
    if any(c.total != total for c in ordered) or [c.index for c in ordered] != list(range(total)):
        raise ChunkLayoutError("chunk set is incomplete or inconsistent")
    return b"".join(decrypt_chunk(key, c, trade_id) for c in ordered)
