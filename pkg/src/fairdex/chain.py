"""Toy proof-of-work ledger carrying payments and reviews.

Everything that is signed or hashed uses the fixed-width big-endian encodings
below, so roots and signatures are reproducible byte for byte:

    header  = height(8) | prev_hash(32) | merkle_root(32) | timestamp(8) | target(32) | nonce(8)
    payment = 0x01 | from(20) | to(20) | amount(8) | nonce(8) | sig(64)
    review  = 0x02 | reviewer(20) | subject(20) | rating(1) | comment_hash(32) | sig(64)

Signatures cover the encoding minus the trailing signature. The encodings carry
addresses only, so verification keys come from a key directory seeded by the
network config (see ``NetworkConfig.allocations``).
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Union

from .crypto import (
    ADDRESS_SIZE,
    SIGNATURE_SIZE,
    ZERO_HASH,
    KeyPair,
    address_of,
    sha256,
    verify,
)

MAX_TARGET = 2**256 - 1
MAX_U64 = 2**64 - 1
PAYMENT_TAG = 0x01
REVIEW_TAG = 0x02
HEADER_SIZE = 8 + 32 + 32 + 8 + 32 + 8
PAYMENT_SIZE = 1 + 20 + 20 + 8 + 8 + 64
REVIEW_SIZE = 1 + 20 + 20 + 1 + 32 + 64

DEFAULT_PROGRAM_VERSION = "fairdex-trusted-trading/1.0"


# --------------------------------------------------------------------------
# transactions


@dataclass(frozen=True)
class PaymentTransaction:
    sender: bytes
    recipient: bytes
    amount: int
    nonce: int
    signature: bytes = b"\x00" * SIGNATURE_SIZE

    def signing_bytes(self) -> bytes:
        return (
            bytes([PAYMENT_TAG])
            + self.sender
            + self.recipient
            + struct.pack(">QQ", self.amount, self.nonce)
        )

    def encode(self) -> bytes:
        return self.signing_bytes() + self.signature

    @cached_property
    def tx_hash(self) -> bytes:
        return sha256(self.encode())

    @classmethod
    def create(cls, keys: KeyPair, recipient: bytes, amount: int, nonce: int) -> "PaymentTransaction":
        unsigned = cls(keys.address, recipient, amount, nonce)
        return cls(keys.address, recipient, amount, nonce, keys.sign(unsigned.signing_bytes()))

    @classmethod
    def decode(cls, raw: bytes) -> "PaymentTransaction":
        if len(raw) != PAYMENT_SIZE or raw[0] != PAYMENT_TAG:
            raise ValueError("not a payment encoding")
        amount, nonce = struct.unpack_from(">QQ", raw, 41)
        return cls(raw[1:21], raw[21:41], amount, nonce, raw[57:121])


@dataclass(frozen=True)
class ReviewTransaction:
    reviewer: bytes
    subject: bytes
    rating: int
    comment_hash: bytes
    signature: bytes = b"\x00" * SIGNATURE_SIZE

    def signing_bytes(self) -> bytes:
        return (
            bytes([REVIEW_TAG])
            + self.reviewer
            + self.subject
            + bytes([self.rating])
            + self.comment_hash
        )

    def encode(self) -> bytes:
        return self.signing_bytes() + self.signature

    @cached_property
    def tx_hash(self) -> bytes:
        return sha256(self.encode())

    @classmethod
    def create(cls, keys: KeyPair, subject: bytes, rating: int, comment: str) -> "ReviewTransaction":
        ch = sha256(comment.encode())
        unsigned = cls(keys.address, subject, rating, ch)
        return cls(keys.address, subject, rating, ch, keys.sign(unsigned.signing_bytes()))

    @classmethod
    def decode(cls, raw: bytes) -> "ReviewTransaction":
        if len(raw) != REVIEW_SIZE or raw[0] != REVIEW_TAG:
            raise ValueError("not a review encoding")
        return cls(raw[1:21], raw[21:41], raw[41], raw[42:74], raw[74:138])


Transaction = Union[PaymentTransaction, ReviewTransaction]


def decode_tx(raw: bytes) -> Transaction:
    if not raw:
        raise ValueError("empty transaction")
    if raw[0] == PAYMENT_TAG:
        return PaymentTransaction.decode(raw)
    if raw[0] == REVIEW_TAG:
        return ReviewTransaction.decode(raw)
    raise ValueError(f"unknown transaction tag {raw[0]:#x}")


# --------------------------------------------------------------------------
# merkle tree


def merkle_root_from_leaves(leaves: list[bytes]) -> bytes:
    if not leaves:
        raise ValueError("merkle root of an empty list is undefined")
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def merkle_root(txs: list[Transaction]) -> bytes:
    """Pairwise SHA-256 tree over ``hash(encode(tx))`` leaves; odd levels repeat the last node."""
    return merkle_root_from_leaves([tx.tx_hash for tx in txs])


def merkle_path(leaves: list[bytes], index: int) -> list[tuple[bytes, str]]:
    """Sibling hashes from leaf to root with the side each sibling sits on."""
    if not 0 <= index < len(leaves):
        raise IndexError("leaf index out of range")
    path = []
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        if index % 2:
            path.append((level[index - 1], "left"))
        else:
            path.append((level[index + 1], "right"))
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        index //= 2
    return path


def merkle_paths(leaves: list[bytes]) -> list[list[tuple[bytes, str]]]:
    """Paths for every leaf at once, in one pass over the tree."""
    paths: list[list] = [[] for _ in leaves]
    pos = list(range(len(leaves)))
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        for leaf, i in enumerate(pos):
            paths[leaf].append((level[i - 1], "left") if i % 2 else (level[i + 1], "right"))
            pos[leaf] = i // 2
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return paths


def body_root(txs: list[Transaction]) -> bytes:
    # empty blocks (pure confirmations) commit to the all-zero root
    return merkle_root(txs) if txs else ZERO_HASH


# --------------------------------------------------------------------------
# headers and blocks


def work_of(target: int) -> int:
    return 2**256 // (target + 1)


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: int
    target: int
    nonce: int

    def encode(self) -> bytes:
        return (
            struct.pack(">Q", self.height)
            + self.prev_hash
            + self.merkle_root
            + struct.pack(">Q", self.timestamp)
            + self.target.to_bytes(32, "big")
            + struct.pack(">Q", self.nonce)
        )

    @classmethod
    def decode(cls, raw: bytes) -> "BlockHeader":
        if len(raw) != HEADER_SIZE:
            raise ValueError("header must be 120 bytes")
        (height,) = struct.unpack_from(">Q", raw, 0)
        (ts,) = struct.unpack_from(">Q", raw, 72)
        (nonce,) = struct.unpack_from(">Q", raw, 112)
        return cls(height, raw[8:40], raw[40:72], ts, int.from_bytes(raw[80:112], "big"), nonce)

    @cached_property
    def hash(self) -> bytes:
        return sha256(self.encode())

    def meets_target(self) -> bool:
        return int.from_bytes(self.hash, "big") <= self.target

    @property
    def work(self) -> int:
        return work_of(self.target)


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple = ()

    @property
    def hash(self) -> bytes:
        return self.header.hash

    @property
    def height(self) -> int:
        return self.header.height

    def encode(self) -> bytes:
        out = [self.header.encode(), struct.pack(">I", len(self.transactions))]
        for tx in self.transactions:
            raw = tx.encode()
            out.append(struct.pack(">I", len(raw)) + raw)
        return b"".join(out)

    @classmethod
    def decode(cls, raw: bytes) -> "Block":
        header = BlockHeader.decode(raw[:HEADER_SIZE])
        (count,) = struct.unpack_from(">I", raw, HEADER_SIZE)
        off = HEADER_SIZE + 4
        txs = []
        for _ in range(count):
            (n,) = struct.unpack_from(">I", raw, off)
            off += 4
            txs.append(decode_tx(raw[off : off + n]))
            off += n
        if off != len(raw):
            raise ValueError("trailing bytes after block")
        return cls(header, tuple(txs))


class MiningError(RuntimeError):
    pass


def solve_header(height: int, prev_hash: bytes, root: bytes, timestamp: int, target: int) -> BlockHeader:
    prefix = (
        struct.pack(">Q", height) + prev_hash + root + struct.pack(">Q", timestamp) + target.to_bytes(32, "big")
    )
    base = hashlib.sha256(prefix)
    pack = struct.Struct(">Q").pack
    for nonce in range(MAX_U64 + 1):
        h = base.copy()
        h.update(pack(nonce))
        if int.from_bytes(h.digest(), "big") <= target:
            return BlockHeader(height, prev_hash, root, timestamp, target, nonce)
    raise MiningError("nonce space exhausted")


def mine_block(
    parent: BlockHeader, txs: Iterable[Transaction], target: int, timestamp: Optional[int] = None
) -> Block:
    """Build and solve a block on top of ``parent``.

    Validity of ``txs`` against the parent state is the caller's business;
    ``ChainState.add_block`` enforces it.
    """
    txs = tuple(txs)
    ts = parent.timestamp if timestamp is None else timestamp
    header = solve_header(parent.height + 1, parent.hash, body_root(list(txs)), ts, target)
    return Block(header, txs)


# --------------------------------------------------------------------------
# network configuration


@dataclass(frozen=True)
class Allocation:
    address: bytes
    amount: int
    public_key: Optional[bytes] = None


@dataclass(frozen=True)
class ExchangeInfo:
    name: str
    endpoint: str
    owner: bytes


@dataclass
class NetworkConfig:
    """Genesis allocation plus the protocol parameters every participant agrees on."""

    target: int = 2**248
    allocations: list = field(default_factory=list)
    checkpoint_height: int = 0
    confirm_depth: int = 6
    fifo_capacity: int = 144
    trade_timeout: int = 600
    service_fee: int = 10
    block_interval: int = 10
    max_block_txs: int = 1000
    genesis_timestamp: int = 0
    program_version: str = DEFAULT_PROGRAM_VERSION
    attestation_root: Optional[bytes] = None
    exchanges: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "target_hex": f"{self.target:064x}",
            "allocations": [
                {"address": a.address.hex(), "amount": a.amount}
                | ({"public_key": a.public_key.hex()} if a.public_key else {})
                for a in self.allocations
            ],
            "checkpoint_height": self.checkpoint_height,
            "confirm_depth": self.confirm_depth,
            "fifo_capacity": self.fifo_capacity,
            "trade_timeout": self.trade_timeout,
            "service_fee": self.service_fee,
            "block_interval": self.block_interval,
            "max_block_txs": self.max_block_txs,
            "genesis_timestamp": self.genesis_timestamp,
            "program_version": self.program_version,
            "exchanges": [
                {"name": e.name, "endpoint": e.endpoint, "owner": e.owner.hex()} for e in self.exchanges
            ],
        }
        if self.attestation_root is not None:
            d["attestation_root"] = self.attestation_root.hex()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        allocations = []
        for a in d.get("allocations", []):
            address = bytes.fromhex(a["address"])
            if len(address) != ADDRESS_SIZE:
                raise ValueError(f"bad address {a['address']!r}")
            pk = bytes.fromhex(a["public_key"]) if a.get("public_key") else None
            allocations.append(Allocation(address, int(a["amount"]), pk))
        root = d.get("attestation_root")
        defaults = cls()
        return cls(
            target=int(d["target_hex"], 16),
            allocations=allocations,
            checkpoint_height=int(d.get("checkpoint_height", 0)),
            confirm_depth=int(d.get("confirm_depth", defaults.confirm_depth)),
            fifo_capacity=int(d.get("fifo_capacity", defaults.fifo_capacity)),
            trade_timeout=int(d.get("trade_timeout", defaults.trade_timeout)),
            service_fee=int(d.get("service_fee", defaults.service_fee)),
            block_interval=int(d.get("block_interval", defaults.block_interval)),
            max_block_txs=int(d.get("max_block_txs", defaults.max_block_txs)),
            genesis_timestamp=int(d.get("genesis_timestamp", 0)),
            program_version=d.get("program_version", DEFAULT_PROGRAM_VERSION),
            attestation_root=bytes.fromhex(root) if root else None,
            exchanges=[
                ExchangeInfo(e["name"], e["endpoint"], bytes.fromhex(e["owner"])) for e in d.get("exchanges", [])
            ],
        )

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_json(Path(path).read_text())

    @property
    def config_hash(self) -> bytes:
        return sha256(self.to_json().encode())

    def exchange(self, name: str) -> ExchangeInfo:
        for e in self.exchanges:
            if e.name == name:
                return e
        raise KeyError(name)


def make_genesis(config: NetworkConfig) -> Block:
    header = solve_header(0, ZERO_HASH, ZERO_HASH, config.genesis_timestamp, config.target)
    return Block(header, ())


# --------------------------------------------------------------------------
# ledger state


class Rejection(enum.Enum):
    DUPLICATE_BLOCK = "DuplicateBlock"
    UNKNOWN_PARENT = "UnknownParent"
    BAD_HEIGHT = "BadHeight"
    BAD_TIMESTAMP = "BadTimestamp"
    BAD_TARGET = "BadTarget"
    BAD_POW = "BadProofOfWork"
    BAD_MERKLE_ROOT = "BadMerkleRoot"
    TOO_MANY_TRANSACTIONS = "TooManyTransactions"
    UNKNOWN_SENDER = "UnknownSender"
    BAD_SIGNATURE = "BadSignature"
    INVALID_AMOUNT = "InvalidAmount"
    INSUFFICIENT_FUNDS = "InsufficientFunds"
    BAD_NONCE = "BadNonce"
    INVALID_RATING = "InvalidRating"
    UNAUTHORIZED_REVIEW = "UnauthorizedReview"
    DUPLICATE_REVIEW = "DuplicateReview"


class LedgerState:
    """Balances, per-sender nonces and the payment pairs that authorize reviews."""

    __slots__ = ("balances", "nonces", "paid", "reviews")

    def __init__(self, balances=None, nonces=None, paid=None, reviews=None):
        self.balances: dict[bytes, int] = dict(balances or {})
        self.nonces: dict[bytes, int] = dict(nonces or {})
        self.paid: set = set(paid or ())
        self.reviews: set = set(reviews or ())

    def copy(self) -> "LedgerState":
        return LedgerState(self.balances, self.nonces, self.paid, self.reviews)

    def apply(self, tx: Transaction, keys: dict, authorized: set) -> Optional[Rejection]:
        """Apply one transaction in place; return the reason on failure (state untouched).

        ``authorized`` holds the (payer, payee) pairs confirmed in strictly
        earlier blocks; reviews are checked against it.
        """
        if isinstance(tx, PaymentTransaction):
            pk = keys.get(tx.sender)
            if pk is None:
                return Rejection.UNKNOWN_SENDER
            if not verify(pk, tx.signing_bytes(), tx.signature):
                return Rejection.BAD_SIGNATURE
            if tx.amount <= 0:
                return Rejection.INVALID_AMOUNT
            if tx.nonce <= self.nonces.get(tx.sender, -1):
                return Rejection.BAD_NONCE
            if self.balances.get(tx.sender, 0) < tx.amount:
                return Rejection.INSUFFICIENT_FUNDS
            self.balances[tx.sender] -= tx.amount
            self.balances[tx.recipient] = self.balances.get(tx.recipient, 0) + tx.amount
            self.nonces[tx.sender] = tx.nonce
            self.paid.add((tx.sender, tx.recipient))
            return None
        pk = keys.get(tx.reviewer)
        if pk is None:
            return Rejection.UNKNOWN_SENDER
        if not verify(pk, tx.signing_bytes(), tx.signature):
            return Rejection.BAD_SIGNATURE
        if not 1 <= tx.rating <= 5:
            return Rejection.INVALID_RATING
        if (tx.reviewer, tx.subject) not in authorized:
            return Rejection.UNAUTHORIZED_REVIEW
        h = tx.tx_hash
        if h in self.reviews:
            return Rejection.DUPLICATE_REVIEW
        self.reviews.add(h)
        return None


class Review(NamedTuple):
    rating: int
    comment_hash: bytes
    reviewer: bytes


@dataclass
class _Entry:
    block: Block
    work: int
    state: LedgerState
    seq: int


class ChainState:
    """All known blocks plus the canonical (maximal cumulative work) chain.

    Mutated only through ``add_block``; tie on cumulative work keeps the
    block seen first.
    """

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.keys: dict[bytes, bytes] = {}
        balances: dict[bytes, int] = {}
        for a in config.allocations:
            balances[a.address] = balances.get(a.address, 0) + a.amount
            if a.public_key is not None:
                self.register_key(a.public_key)
        self.genesis = make_genesis(config)
        self._seq = 0
        self._entries: dict[bytes, _Entry] = {
            self.genesis.hash: _Entry(self.genesis, self.genesis.header.work, LedgerState(balances), 0)
        }
        self._canonical: list[bytes] = [self.genesis.hash]
        self._tx_index: dict[bytes, tuple[bytes, int]] = {}
        self.supply = sum(balances.values())

    def register_key(self, public_key: bytes) -> bytes:
        address = address_of(public_key)
        self.keys[address] = public_key
        return address

    # -- reads ------------------------------------------------------------

    @property
    def tip(self) -> Block:
        return self._entries[self._canonical[-1]].block

    @property
    def height(self) -> int:
        return len(self._canonical) - 1

    def best_tip(self) -> BlockHeader:
        return self.tip.header

    def best_chain_header(self, height: int) -> Optional[BlockHeader]:
        if 0 <= height < len(self._canonical):
            return self._entries[self._canonical[height]].block.header
        return None

    def block(self, block_hash: bytes) -> Optional[Block]:
        e = self._entries.get(block_hash)
        return e.block if e else None

    def has_block(self, block_hash: bytes) -> bool:
        return block_hash in self._entries

    def cumulative_work(self, block_hash: bytes) -> int:
        return self._entries[block_hash].work

    def canonical_hashes(self) -> list[bytes]:
        return list(self._canonical)

    def canonical_blocks(self) -> list[Block]:
        return [self._entries[h].block for h in self._canonical]

    def state_at(self, block_hash: bytes) -> LedgerState:
        return self._entries[block_hash].state.copy()

    @property
    def tip_state(self) -> LedgerState:
        return self._entries[self._canonical[-1]].state

    def balance(self, address: bytes) -> int:
        return self.tip_state.balances.get(address, 0)

    @property
    def balances(self) -> dict[bytes, int]:
        return dict(self.tip_state.balances)

    def next_nonce(self, address: bytes) -> int:
        return self.tip_state.nonces.get(address, -1) + 1

    def find_transaction(self, tx_hash: bytes) -> Optional[tuple[Block, int]]:
        """Locate a transaction on the canonical chain."""
        loc = self._tx_index.get(tx_hash)
        if loc is None:
            return None
        return self._entries[loc[0]].block, loc[1]

    def confirmations(self, tx_hash: bytes) -> Optional[int]:
        found = self.find_transaction(tx_hash)
        if found is None:
            return None
        return self.height - found[0].height

    def query_reviews(self, subject: bytes) -> list[Review]:
        out = []
        for h in self._canonical:
            for tx in self._entries[h].block.transactions:
                if isinstance(tx, ReviewTransaction) and tx.subject == subject:
                    out.append(Review(tx.rating, tx.comment_hash, tx.reviewer))
        return out

    def payments(self, sender: bytes, recipient: bytes) -> list[tuple[PaymentTransaction, int]]:
        """Canonical payments sender->recipient with their block heights."""
        out = []
        for h in self._canonical:
            blk = self._entries[h].block
            for tx in blk.transactions:
                if isinstance(tx, PaymentTransaction) and tx.sender == sender and tx.recipient == recipient:
                    out.append((tx, blk.height))
        return out

    def snapshot(self) -> dict:
        st = self.tip_state
        return {
            "tip": self.tip.hash.hex(),
            "height": self.height,
            "balances": {a.hex(): v for a, v in sorted(st.balances.items())},
            "nonces": {a.hex(): v for a, v in sorted(st.nonces.items())},
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))

    # -- writes -----------------------------------------------------------

    def apply_transactions(self, parent_hash: bytes, txs: Iterable[Transaction]):
        """Apply ``txs`` on top of ``parent_hash``; return (state, None) or (None, (index, reason))."""
        parent = self._entries[parent_hash].state
        state = parent.copy()
        for i, tx in enumerate(txs):
            reason = state.apply(tx, self.keys, parent.paid)
            if reason is not None:
                return None, (i, reason)
        return state, None

    def select_transactions(self, txs: Iterable[Transaction], limit: Optional[int] = None) -> list[Transaction]:
        """Greedy in-order filter of ``txs`` that stay valid on top of the current tip."""
        parent = self.tip_state
        state = parent.copy()
        limit = self.config.max_block_txs if limit is None else limit
        chosen = []
        for tx in txs:
            if len(chosen) >= limit:
                break
            if state.apply(tx, self.keys, parent.paid) is None:
                chosen.append(tx)
        return chosen

    def add_block(self, block: Block) -> Optional[Rejection]:
        """Validate ``block`` against its parent and store it; None on success."""
        h = block.header
        bh = block.hash
        if bh in self._entries:
            return Rejection.DUPLICATE_BLOCK
        parent = self._entries.get(h.prev_hash)
        if parent is None:
            return Rejection.UNKNOWN_PARENT
        if h.height != parent.block.height + 1:
            return Rejection.BAD_HEIGHT
        if h.timestamp < parent.block.header.timestamp:
            return Rejection.BAD_TIMESTAMP
        if h.target != self.config.target:
            return Rejection.BAD_TARGET
        if not h.meets_target():
            return Rejection.BAD_POW
        if body_root(list(block.transactions)) != h.merkle_root:
            return Rejection.BAD_MERKLE_ROOT
        if len(block.transactions) > self.config.max_block_txs:
            return Rejection.TOO_MANY_TRANSACTIONS
        state, err = self.apply_transactions(h.prev_hash, block.transactions)
        if err is not None:
            return err[1]
        self._seq += 1
        entry = _Entry(block, parent.work + h.work, state, self._seq)
        self._entries[bh] = entry
        if entry.work > self._entries[self._canonical[-1]].work:
            self._switch_tip(bh)
        return None

    def _switch_tip(self, new_tip: bytes) -> None:
        branch = []
        cur = new_tip
        while True:
            blk = self._entries[cur].block
            if blk.height < len(self._canonical) and self._canonical[blk.height] == cur:
                break
            branch.append(cur)
            cur = blk.header.prev_hash
        fork_height = self._entries[cur].block.height
        for old in self._canonical[fork_height + 1 :]:
            for tx in self._entries[old].block.transactions:
                self._tx_index.pop(tx.tx_hash, None)
        del self._canonical[fork_height + 1 :]
        for bh in reversed(branch):
            self._canonical.append(bh)
            for i, tx in enumerate(self._entries[bh].block.transactions):
                self._tx_index.setdefault(tx.tx_hash, (bh, i))

    def mine(self, txs: Iterable[Transaction] = (), timestamp: Optional[int] = None) -> Block:
        """Mine the given transactions on the current tip and add the block."""
        block = mine_block(self.tip.header, txs, self.config.target, timestamp)
        reason = self.add_block(block)
        if reason is not None:
            raise ValueError(f"mined block rejected: {reason.value}")
        return block


def validate_and_apply(state: ChainState, block: Block) -> Optional[Rejection]:
    return state.add_block(block)
