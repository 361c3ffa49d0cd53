"""Payment evidence: a payment plus its Merkle authentication path and block reference.

Wire form::

    payment encoding | leaf_index(4) | path_len(2) | [side(1) | sibling(32)]* | block_height(8) | block_hash(32)

``side`` is 0 when the sibling sits on the left, 1 when it sits on the right.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional, Protocol

from .chain import (
    PAYMENT_SIZE,
    BlockHeader,
    ChainState,
    PaymentTransaction,
    merkle_path,
)
from .crypto import HASH_SIZE, sha256

LEFT = "left"
RIGHT = "right"
_SIDE_CODES = {LEFT: 0, RIGHT: 1}
_SIDE_NAMES = {0: LEFT, 1: RIGHT}


class EvidenceStatus(enum.Enum):
    VALID = "Valid"
    BAD_PATH = "BadPath"
    UNKNOWN_BLOCK = "UnknownBlock"
    INSUFFICIENT_CONFIRMATIONS = "InsufficientConfirmations"


class EvidenceError(LookupError):
    pass


class HeaderView(Protocol):
    """What a verifier needs from its view of the chain."""

    def best_tip(self) -> BlockHeader: ...

    def best_chain_header(self, height: int) -> Optional[BlockHeader]: ...


@dataclass(frozen=True)
class PaymentEvidence:
    tx: PaymentTransaction
    path: tuple  # of (sibling_hash, side)
    leaf_index: int
    block_height: int
    block_hash: bytes

    def folded_root(self) -> bytes:
        return fold_path(self.tx.tx_hash, self.path)

    def encode(self) -> bytes:
        out = [self.tx.encode(), struct.pack(">IH", self.leaf_index, len(self.path))]
        for sibling, side in self.path:
            out.append(bytes([_SIDE_CODES[side]]) + sibling)
        out.append(struct.pack(">Q", self.block_height) + self.block_hash)
        return b"".join(out)

    @classmethod
    def decode(cls, raw: bytes) -> "PaymentEvidence":
        tx = PaymentTransaction.decode(raw[:PAYMENT_SIZE])
        off = PAYMENT_SIZE
        leaf_index, n = struct.unpack_from(">IH", raw, off)
        off += 6
        path = []
        for _ in range(n):
            side = raw[off]
            if side not in _SIDE_NAMES:
                raise ValueError(f"bad side flag {side}")
            sibling = raw[off + 1 : off + 1 + HASH_SIZE]
            if len(sibling) != HASH_SIZE:
                raise ValueError("truncated path")
            path.append((sibling, _SIDE_NAMES[side]))
            off += 1 + HASH_SIZE
        (height,) = struct.unpack_from(">Q", raw, off)
        block_hash = raw[off + 8 : off + 8 + HASH_SIZE]
        if len(block_hash) != HASH_SIZE or off + 8 + HASH_SIZE != len(raw):
            raise ValueError("evidence length mismatch")
        return cls(tx, tuple(path), leaf_index, height, block_hash)


def fold_path(leaf: bytes, path) -> bytes:
    node = leaf
    for sibling, side in path:
        node = sha256(sibling + node) if side == LEFT else sha256(node + sibling)
    return node


def build_evidence(chain: ChainState, tx_hash: bytes) -> PaymentEvidence:
    found = chain.find_transaction(tx_hash)
    if found is None:
        raise EvidenceError(f"transaction {tx_hash.hex()[:16]} is not on the canonical chain")
    block, index = found
    tx = block.transactions[index]
    if not isinstance(tx, PaymentTransaction):
        raise EvidenceError("evidence can only be built for payments")
    leaves = [t.tx_hash for t in block.transactions]
    path = tuple(merkle_path(leaves, index))
    return PaymentEvidence(tx, path, index, block.height, block.hash)


def _sides_match_index(ev: PaymentEvidence) -> bool:
    if ev.leaf_index >> len(ev.path):
        return False
    for level, (_, side) in enumerate(ev.path):
        expected = LEFT if (ev.leaf_index >> level) & 1 else RIGHT
        if side != expected:
            return False
    return True


def verify_evidence(ev: PaymentEvidence, headers: HeaderView, confirm_depth: int) -> EvidenceStatus:
    """Check ``ev`` against the best chain of ``headers``.

    Outcomes are checked in order: the referenced block must sit on the best
    chain, the path must fold to its Merkle root, and the tip must be at least
    ``confirm_depth`` blocks above it.
    """
    header = headers.best_chain_header(ev.block_height)
    if header is None or header.hash != ev.block_hash:
        return EvidenceStatus.UNKNOWN_BLOCK
    if not _sides_match_index(ev) or ev.folded_root() != header.merkle_root:
        return EvidenceStatus.BAD_PATH
    if headers.best_tip().height - ev.block_height < confirm_depth:
        return EvidenceStatus.INSUFFICIENT_CONFIRMATIONS
    return EvidenceStatus.VALID
