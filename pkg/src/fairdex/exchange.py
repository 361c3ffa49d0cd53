"""The trusted trading program that runs inside a (simulated) enclave.

The host can reach the enclave only through the request methods of
``TrustedExchange``; everything else lives in name-mangled attributes. Data
leaves the enclave exclusively through the ``egress`` callback supplied at
launch, which lets the host-side ``EgressAudit`` check release gating without
trusting the enclave's own bookkeeping.
"""

from __future__ import annotations

import enum
import os
from collections import deque
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

from .attestation import AttestationReport, EnclaveIdentity, SimulatedCPU
from .chain import DEFAULT_PROGRAM_VERSION, BlockHeader, NetworkConfig, work_of
from .crypto import TRADE_ID_SIZE, CipherChunk, KeyPair
from .spv import EvidenceStatus, PaymentEvidence, verify_evidence
from .wire import DataReleasedMsg, Sample, TradeOpened, STATUS_OK, valid_endpoint


class IngestResult(enum.Enum):
    ACCEPTED = "Accepted"
    REJECTED_LINKAGE = "RejectedLinkage"
    REJECTED_DIFFICULTY = "RejectedDifficulty"
    REJECTED_PRE_CHECKPOINT = "RejectedPreCheckpoint"


class Checkpoint(NamedTuple):
    height: int
    hash: bytes
    timestamp: int = 0


class HeaderStore:
    """Bounded FIFO of validated headers anchored at a hardcoded checkpoint.

    Forks inside the window are kept; the best tip is the header with maximal
    cumulative work above the checkpoint, first seen on ties. Once a header is
    evicted its descendants keep their recorded work, but new headers that
    would attach to it are refused as unanchored.
    """

    def __init__(self, checkpoint: Checkpoint, target: int, capacity: int = 144):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.checkpoint = checkpoint
        self.target = target
        self.capacity = capacity
        self._order: deque[bytes] = deque()
        self._headers: dict[bytes, tuple[BlockHeader, int]] = {}
        self._best: Optional[bytes] = None
        self._best_chain: dict[int, bytes] = {}
        self.evicted: list[bytes] = []

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, block_hash: bytes) -> bool:
        return block_hash in self._headers

    def headers(self) -> list[BlockHeader]:
        return [self._headers[h][0] for h in self._order]

    def work_of(self, block_hash: bytes) -> int:
        return self._headers[block_hash][1]

    def best_tip(self):
        if self._best is None:
            return self.checkpoint
        return self._headers[self._best][0]

    def best_chain_header(self, height: int) -> Optional[BlockHeader]:
        h = self._best_chain.get(height)
        return self._headers[h][0] if h is not None else None

    def ingest(self, header: BlockHeader) -> IngestResult:
        if header.target != self.target or not header.meets_target():
            return IngestResult.REJECTED_DIFFICULTY
        if header.height <= self.checkpoint.height:
            return IngestResult.REJECTED_PRE_CHECKPOINT
        bh = header.hash
        if bh in self._headers:
            return IngestResult.ACCEPTED
        if header.prev_hash == self.checkpoint.hash:
            parent_height, parent_work, parent_ts = self.checkpoint.height, 0, self.checkpoint.timestamp
        elif header.prev_hash in self._headers:
            parent, parent_work = self._headers[header.prev_hash]
            parent_height, parent_ts = parent.height, parent.timestamp
        else:
            # no path back to the checkpoint inside the window
            return IngestResult.REJECTED_PRE_CHECKPOINT
        if header.height != parent_height + 1 or header.timestamp < parent_ts:
            return IngestResult.REJECTED_LINKAGE

        work = parent_work + work_of(header.target)
        self._headers[bh] = (header, work)
        self._order.append(bh)
        if self._best is None or work > self._headers[self._best][1]:
            self._best = bh
            self._rebuild_best_chain()
        while len(self._order) > self.capacity:
            self._evict()
        return IngestResult.ACCEPTED

    def _evict(self) -> None:
        old = self._order.popleft()
        header, _ = self._headers.pop(old)
        self.evicted.append(old)
        if self._best_chain.get(header.height) == old:
            del self._best_chain[header.height]
        if old == self._best:
            self._best = None
            best_work = -1
            for h in self._order:
                if self._headers[h][1] > best_work:
                    self._best, best_work = h, self._headers[h][1]
            self._rebuild_best_chain()

    def _rebuild_best_chain(self) -> None:
        self._best_chain = {}
        cur = self._best
        while cur is not None and cur in self._headers:
            header = self._headers[cur][0]
            self._best_chain[header.height] = cur
            cur = header.prev_hash


class TradeState(enum.IntEnum):
    OPENED = 1
    DATA_DEPOSITED = 2
    RELEASED = 3
    EXPIRED = 4


_ALLOWED = {
    (TradeState.OPENED, TradeState.DATA_DEPOSITED),
    (TradeState.DATA_DEPOSITED, TradeState.RELEASED),
    (TradeState.OPENED, TradeState.EXPIRED),
    (TradeState.DATA_DEPOSITED, TradeState.EXPIRED),
    (TradeState.RELEASED, TradeState.EXPIRED),
}


@dataclass(frozen=True)
class TradeId:
    raw: bytes

    def __post_init__(self):
        if len(self.raw) != TRADE_ID_SIZE:
            raise ValueError("trade id must be 16 bytes")

    @property
    def hex(self) -> str:
        return self.raw.hex()

    def __str__(self) -> str:
        return self.raw.hex()

    @classmethod
    def from_hex(cls, text: str) -> "TradeId":
        return cls(bytes.fromhex(text))


@dataclass
class PendingTradeEntry:
    id: TradeId
    price: int
    buyer: bytes
    seller: bytes
    buyer_endpoint: str
    deposit_timestamp: int
    state: TradeState = TradeState.OPENED
    ciphertext: Optional[tuple] = None


# --- request outcomes -------------------------------------------------------


@dataclass(frozen=True)
class Opened:
    trade_id: TradeId


@dataclass(frozen=True)
class InvalidEvidence:
    reason: str


@dataclass(frozen=True)
class FeeTooLow:
    paid: int
    required: int


@dataclass(frozen=True)
class MalformedRequest:
    detail: str


@dataclass(frozen=True)
class TradeParams:
    trade_id: TradeId
    price: int
    buyer: bytes
    seller: bytes


@dataclass(frozen=True)
class UnknownId:
    trade_id: TradeId


@dataclass(frozen=True)
class WrongState:
    trade_id: TradeId
    state: TradeState


@dataclass(frozen=True)
class SampleSent:
    trade_id: TradeId
    chunk: CipherChunk


@dataclass(frozen=True)
class DataReleased:
    trade_id: TradeId
    chunks: tuple


@dataclass(frozen=True)
class EvidenceRejected:
    reason: str


@dataclass(frozen=True)
class MismatchedTerms:
    detail: str


@dataclass(frozen=True)
class ExchangeConfig:
    checkpoint_height: int
    checkpoint_hash: bytes
    target: int
    owner: bytes
    network_config_hash: bytes
    confirm_depth: int = 6
    fifo_capacity: int = 144
    trade_timeout: int = 600
    service_fee: int = 10
    checkpoint_timestamp: int = 0
    gc_every: int = 10

    @classmethod
    def from_network(cls, net: NetworkConfig, owner: bytes, checkpoint: BlockHeader) -> "ExchangeConfig":
        return cls(
            checkpoint_height=checkpoint.height,
            checkpoint_hash=checkpoint.hash,
            checkpoint_timestamp=checkpoint.timestamp,
            target=net.target,
            owner=owner,
            network_config_hash=net.config_hash,
            confirm_depth=net.confirm_depth,
            fifo_capacity=net.fifo_capacity,
            trade_timeout=net.trade_timeout,
            service_fee=net.service_fee,
        )

    def identity(self, program_version: str) -> EnclaveIdentity:
        return EnclaveIdentity(
            program_version, self.checkpoint_hash, self.network_config_hash, self.confirm_depth, self.fifo_capacity
        )


Egress = Callable[[str, object], None]


class Outbox:
    """Default egress: collects (endpoint, message) pairs."""

    def __init__(self):
        self.sent: list[tuple[str, object]] = []

    def __call__(self, endpoint: str, message) -> None:
        self.sent.append((endpoint, message))


class TrustedExchange:
    """Enclave-resident trading program.

    ``release_gating=False`` is a mutation hook for tests: it releases the
    full ciphertext on any evidence submission.
    """

    def __init__(
        self,
        config: ExchangeConfig,
        cpu: SimulatedCPU,
        *,
        egress: Optional[Egress] = None,
        rng=None,
        program_version: str = DEFAULT_PROGRAM_VERSION,
        release_gating: bool = True,
    ):
        self.__cfg = config
        self.__cpu = cpu
        self.__rng = rng
        self.__egress = egress if egress is not None else Outbox()
        self.__identity = config.identity(program_version)
        self.__keys = KeyPair.from_seed(self.__random(32))
        self.__store = HeaderStore(
            Checkpoint(config.checkpoint_height, config.checkpoint_hash, config.checkpoint_timestamp),
            config.target,
            config.fifo_capacity,
        )
        self.__table: dict[TradeId, PendingTradeEntry] = {}
        self.__consumed: dict[bytes, bytes] = {}
        self.__ingested = 0
        self.__gating = release_gating

    def __random(self, n: int) -> bytes:
        return self.__rng.randbytes(n) if self.__rng is not None else os.urandom(n)

    def __transition(self, entry: PendingTradeEntry, new: TradeState) -> None:
        if (entry.state, new) not in _ALLOWED:
            raise RuntimeError(f"illegal trade transition {entry.state.name} -> {new.name}")
        entry.state = new

    # -- requests -----------------------------------------------------------

    def attest(self, challenge_nonce: bytes) -> AttestationReport:
        return self.__cpu.generate_report(self.__identity, self.__keys.public_key, challenge_nonce)

    def ingest_header(self, header: BlockHeader) -> IngestResult:
        result = self.__store.ingest(header)
        if result is IngestResult.ACCEPTED:
            self.__ingested += 1
            if self.__ingested % self.__cfg.gc_every == 0:
                self.gc(self.__store.best_tip().timestamp)
        return result

    def open_trade(self, service_evidence: PaymentEvidence, price: int, buyer: bytes, seller: bytes, buyer_endpoint: str):
        cfg = self.__cfg
        if price <= 0 or not valid_endpoint(buyer_endpoint):
            return MalformedRequest("price must be positive and endpoint well-formed")
        status = verify_evidence(service_evidence, self.__store, cfg.confirm_depth)
        if status is not EvidenceStatus.VALID:
            return InvalidEvidence(status.value)
        tx = service_evidence.tx
        if tx.recipient != cfg.owner:
            return InvalidEvidence("WrongRecipient")
        if tx.sender != buyer:
            return InvalidEvidence("WrongPayer")
        if tx.tx_hash in self.__consumed:
            return InvalidEvidence("DepositAlreadyUsed")
        if tx.amount < cfg.service_fee:
            return FeeTooLow(tx.amount, cfg.service_fee)
        trade_id = TradeId(self.__random(TRADE_ID_SIZE))
        while trade_id in self.__table:
            trade_id = TradeId(self.__random(TRADE_ID_SIZE))
        header = self.__store.best_chain_header(service_evidence.block_height)
        self.__consumed[tx.tx_hash] = service_evidence.block_hash
        self.__table[trade_id] = PendingTradeEntry(trade_id, price, buyer, seller, buyer_endpoint, header.timestamp)
        self.__egress(buyer_endpoint, TradeOpened(STATUS_OK, trade_id.raw, ""))
        return Opened(trade_id)

    def get_trade_params(self, trade_id: TradeId):
        entry = self.__table.get(trade_id)
        if entry is None:
            return UnknownId(trade_id)
        return TradeParams(entry.id, entry.price, entry.buyer, entry.seller)

    def deposit_data(self, trade_id: TradeId, chunks):
        entry = self.__table.get(trade_id)
        if entry is None:
            return UnknownId(trade_id)
        if entry.state is not TradeState.OPENED:
            return WrongState(trade_id, entry.state)
        chunks = tuple(sorted(chunks, key=lambda c: c.index))
        if not chunks or [c.index for c in chunks] != list(range(chunks[0].total)) or any(
            c.total != chunks[0].total for c in chunks
        ):
            return MalformedRequest("chunk set incomplete or inconsistent")
        entry.ciphertext = chunks
        self.__transition(entry, TradeState.DATA_DEPOSITED)
        self.__egress(entry.buyer_endpoint, Sample(trade_id.raw, (chunks[0],)))
        return SampleSent(trade_id, chunks[0])

    def submit_payment_evidence(self, trade_id: TradeId, ev: PaymentEvidence):
        entry = self.__table.get(trade_id)
        if entry is None:
            return UnknownId(trade_id)
        if entry.state is not TradeState.DATA_DEPOSITED:
            return WrongState(trade_id, entry.state)
        if self.__gating:
            status = verify_evidence(ev, self.__store, self.__cfg.confirm_depth)
            if status is not EvidenceStatus.VALID:
                return EvidenceRejected(status.value)
            tx = ev.tx
            if tx.sender != entry.buyer or tx.recipient != entry.seller or tx.amount < entry.price:
                return MismatchedTerms("payer, payee or amount disagree with the pending trade")
            if tx.tx_hash in self.__consumed:
                return EvidenceRejected("PaymentAlreadyUsed")
            self.__consumed[tx.tx_hash] = ev.block_hash
        self.__transition(entry, TradeState.RELEASED)
        self.__egress(entry.buyer_endpoint, DataReleasedMsg(trade_id.raw, entry.ciphertext))
        return DataReleased(trade_id, entry.ciphertext)

    def gc(self, now: int) -> int:
        """Drop released and timed-out trades together with their ciphertext."""
        removed = 0
        for tid in list(self.__table):
            entry = self.__table[tid]
            if entry.state is TradeState.RELEASED or now - entry.deposit_timestamp > self.__cfg.trade_timeout:
                self.__transition(entry, TradeState.EXPIRED)
                entry.ciphertext = None
                del self.__table[tid]
                removed += 1
        for txh in [t for t, bh in self.__consumed.items() if bh not in self.__store]:
            del self.__consumed[txh]
        return removed

    # -- instrumentation (no secrets) ------------------------------------------

    @property
    def retained_chunks(self) -> int:
        return sum(len(e.ciphertext) for e in self.__table.values() if e.ciphertext)

    @property
    def header_count(self) -> int:
        return len(self.__store)

    @property
    def best_height(self) -> int:
        return self.__store.best_tip().height

    def table_summary(self) -> list[dict]:
        return [
            {"id": e.id.hex, "state": e.state.name, "price": e.price, "buyer": e.buyer.hex(), "seller": e.seller.hex()}
            for e in self.__table.values()
        ]


# --- host-side release audit -----------------------------------------------------


@dataclass
class _Call:
    seq: int
    op: str
    trade_id: Optional[bytes] = None
    result: object = None


class EgressAudit:
    """Host-side record of enclave calls and everything they emitted.

    A chunk other than chunk 0 is tainted: it may leave the enclave only
    during a ``submit_payment_evidence`` call whose result was DataReleased
    for the same trade.
    """

    def __init__(self):
        self.calls: list[_Call] = []
        self.egress: list[tuple[int, str, bytes, tuple]] = []
        self._current: Optional[_Call] = None

    def begin(self, op: str, trade_id: Optional[bytes] = None) -> _Call:
        call = _Call(len(self.calls), op, trade_id)
        self.calls.append(call)
        self._current = call
        return call

    def end(self, call: _Call, result) -> None:
        call.result = result
        self._current = None

    def record(self, endpoint: str, message) -> None:
        seq = self._current.seq if self._current is not None else -1
        chunks = getattr(message, "chunks", ())
        tid = getattr(message, "trade_id", b"")
        self.egress.append((seq, type(message).__name__, tid, tuple(c.index for c in chunks)))

    def violations(self) -> list[str]:
        out = []
        for seq, kind, tid, indices in self.egress:
            if not any(i != 0 for i in indices):
                continue
            call = self.calls[seq] if seq >= 0 else None
            ok = (
                call is not None
                and call.op == "submit_payment_evidence"
                and isinstance(call.result, DataReleased)
                and call.result.trade_id.raw == tid
            )
            if not ok:
                op = call.op if call else "<outside any call>"
                out.append(f"chunks {indices} of trade {tid.hex()} left via {kind} during {op}")
        return out
