"""Buyer and seller clients.

Both clients are single-threaded state machines. They never block: the host
environment (normally ``fairdex.sim``) delivers parsed messages, new-block
notifications and timer callbacks, and the clients answer by sending frames,
submitting transactions or arming timers through the ``ClientEnv`` they are
given.

Trading steps are numbered 1..15. The buyer acts in steps 1, 2, 3, 5, 10, 11,
12 and 14, and observes steps 4, 9 and 13 when the exchange answers. The
seller acts in steps 6, 7 and 8. Requirements matching happens before step 1,
so an abort during matching is reported as step 0.
"""

from __future__ import annotations

import enum
import statistics
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

from .attestation import AttestationReport, measure, verify_report
from .chain import (
    MAX_TARGET,
    BlockHeader,
    ChainState,
    NetworkConfig,
    PaymentTransaction,
    ReviewTransaction,
    mine_block,
)
from .crypto import (
    AuthenticationError,
    ChunkLayoutError,
    DataKey,
    KeyPair,
    decrypt_chunk,
    decrypt_chunked,
    encrypt_chunked,
)
from .exchange import ExchangeConfig, TradeId
from .spv import EvidenceError, PaymentEvidence, build_evidence
from .wire import (
    STATUS_OK,
    Accept,
    AttestRequest,
    AttestResponse,
    DataReleasedMsg,
    Demand,
    DepositAck,
    DepositData,
    EvidenceResult,
    Headers,
    Message,
    OpenTrade,
    ParamsRequest,
    ParamsResponse,
    Propose,
    Reply,
    Sample,
    SubmitEvidence,
    TradeInit,
    TradeOpened,
    valid_endpoint,
)

BUYER_STEPS = (1, 2, 3, 4, 5, 9, 10, 11, 12, 13, 14)
SELLER_STEPS = (6, 7, 8)


class ClientEnv(Protocol):
    """What a client needs from its host."""

    chain: ChainState

    def now(self) -> int: ...  # simulated seconds

    def send(self, src: str, dst: str, msg: Message) -> None: ...

    def submit_tx(self, src: str, tx) -> None: ...

    def set_timer(self, delay_s: float, callback: Callable[[], None]) -> None: ...

    def record(self, actor: str, kind: str, detail: str) -> None: ...

    def random_bytes(self, actor: str, n: int) -> bytes: ...


# --------------------------------------------------------------------------
# matching


@dataclass(frozen=True)
class DataSpec:
    """Tag subset plus an inclusive size range."""

    tags: frozenset
    min_size: int = 0
    max_size: int = 2**63

    def matches(self, item: "DataItem") -> bool:
        return self.tags <= item.tags and self.min_size <= len(item.data) <= self.max_size


@dataclass(frozen=True)
class DataItem:
    name: str
    tags: frozenset
    data: bytes


@dataclass
class SellerPolicy:
    inventory: list
    min_price: int

    def offer_for(self, spec: DataSpec, price: int) -> Optional[DataItem]:
        if price < self.min_price:
            return None
        for item in self.inventory:
            if spec.matches(item):
                return item
        return None


@dataclass(frozen=True)
class DemandBroadcast:
    spec: DataSpec
    price: int
    buyer_endpoint: str

    def __post_init__(self):
        if self.price <= 0:
            raise ValueError("price must be positive")
        if not valid_endpoint(self.buyer_endpoint):
            raise ValueError(f"malformed endpoint {self.buyer_endpoint!r}")

    def to_message(self) -> Demand:
        return Demand(tuple(sorted(self.spec.tags)), self.spec.min_size, self.spec.max_size, self.price, self.buyer_endpoint)

    @classmethod
    def from_message(cls, msg: Demand) -> "DemandBroadcast":
        return cls(DataSpec(frozenset(msg.tags), msg.min_size, msg.max_size), msg.price, msg.buyer_endpoint)


@dataclass(frozen=True)
class SellerReply:
    seller: bytes
    seller_endpoint: str

    def __post_init__(self):
        if not valid_endpoint(self.seller_endpoint):
            raise ValueError(f"malformed endpoint {self.seller_endpoint!r}")


@dataclass(frozen=True)
class NoCandidate:
    pass


def broadcast_demand(buyer_endpoint: str, spec: DataSpec, price: int, sellers) -> set:
    """Replies from every seller in ``sellers`` ((address, endpoint, policy) triples) that would answer."""
    demand = DemandBroadcast(spec, price, buyer_endpoint)
    return {
        SellerReply(address, endpoint)
        for address, endpoint, policy in sellers
        if policy.offer_for(demand.spec, demand.price) is not None
    }


def mean_rating(chain: ChainState, subject: bytes) -> float:
    ratings = [r.rating for r in chain.query_reviews(subject)]
    return statistics.fmean(ratings) if ratings else 0.0


def select_seller(replies, chain: ChainState):
    """Highest mean on-chain rating; ties go to the smallest address."""
    replies = list(replies)
    if not replies:
        return NoCandidate()
    return min(replies, key=lambda r: (-mean_rating(chain, r.seller), r.seller))


def post_review(author: KeyPair, subject: bytes, rating: int, comment: str, submit: Callable) -> ReviewTransaction:
    """Sign a review and hand it to ``submit``; the chain rejects it unless author paid subject earlier."""
    tx = ReviewTransaction.create(author, subject, rating, comment)
    submit(tx)
    return tx


# --------------------------------------------------------------------------
# sessions


class Role(enum.Enum):
    BUYER = "buyer"
    SELLER = "seller"


@dataclass(frozen=True)
class Completed:
    def __str__(self) -> str:
        return "Completed"


@dataclass(frozen=True)
class AbortedAtStep:
    step: int
    reason: str = ""

    def __str__(self) -> str:
        return f"AbortedAtStep({self.step})"


@dataclass
class TradeSession:
    role: Role
    exchanges: list
    data_key: Optional[DataKey] = None
    trade_ids: dict = field(default_factory=dict)  # exchange name -> TradeId
    phases: list = field(default_factory=list)
    outcome: object = None
    defrauded: bool = False

    @property
    def trade_id(self) -> Optional[TradeId]:
        return next(iter(self.trade_ids.values()), None)

    @property
    def phase(self) -> int:
        return self.phases[-1] if self.phases else 0

    @property
    def done(self) -> bool:
        return self.outcome is not None

    def advance(self, step: int) -> None:
        if self.outcome is not None and not isinstance(self.outcome, Completed):
            raise RuntimeError(f"session already ended with {self.outcome}")
        if step <= self.phase:
            raise RuntimeError(f"step {step} does not follow step {self.phase}")
        self.phases.append(step)

    def abort(self, step: int, reason: str) -> None:
        if self.outcome is None:
            self.outcome = AbortedAtStep(step, reason)

    def complete(self) -> None:
        if self.outcome is None:
            self.outcome = Completed()


def expected_measurement(net: NetworkConfig, owner: bytes, checkpoint: BlockHeader) -> bytes:
    cfg = ExchangeConfig.from_network(net, owner, checkpoint)
    return measure(cfg.identity(net.program_version))


@dataclass
class BuyerBehavior:
    """Deviations from the honest buyer, used by the adversarial harness."""

    halt_step: Optional[int] = None
    cheat_when_halted: bool = True  # replay the fee evidence as seller payment
    skip_attestation: bool = False
    open_price: Optional[int] = None  # tell the enclave a different price
    submit_depth: Optional[int] = None  # confirmations before first submission
    fake_chain: Optional[tuple] = None  # (target multiplier, length)
    double_spend_to: Optional[bytes] = None

    @property
    def honest(self) -> bool:
        return (
            self.halt_step is None
            and not self.skip_attestation
            and self.open_price is None
            and self.submit_depth is None
            and self.fake_chain is None
            and self.double_spend_to is None
        )


class _Client:
    role: Role
    steps: tuple

    def __init__(self, env: ClientEnv, name: str, keys: KeyPair, endpoint: str, net: NetworkConfig, wait_timeout: int):
        self.env = env
        self.name = name
        self.keys = keys
        self.endpoint = endpoint
        self.net = net
        self.wait_timeout = wait_timeout
        self.session: Optional[TradeSession] = None
        self._wait = 0

    def _log(self, kind: str, detail: str) -> None:
        self.env.record(self.name, kind, detail)

    def _advance(self, step: int) -> None:
        self.session.advance(step)
        self._log("phase", str(step))

    def _abort(self, step: int, reason: str) -> None:
        if self.session.done:
            return
        self.session.abort(step, reason)
        self._wait += 1
        self._log("outcome", f"{self.session.outcome} {reason}")

    def _complete(self) -> None:
        self.session.complete()
        self._log("outcome", "Completed")

    def _arm(self, step: int, what: str, on_timeout=None) -> None:
        """Start waiting; abort at ``step`` unless another wait supersedes this one in time."""
        self._wait += 1
        token = self._wait

        def fire():
            if token == self._wait and self.session and not self.session.done:
                if on_timeout is not None:
                    on_timeout()
                else:
                    self._abort(step, f"timed out waiting for {what}")

        self.env.set_timer(self.wait_timeout, fire)

    def _checkpoint(self) -> BlockHeader:
        return self.env.chain.best_chain_header(self.net.checkpoint_height)

    def _attestation_ok(self, info, report_bytes: bytes, nonce: bytes) -> bool:
        try:
            report = AttestationReport.decode(report_bytes)
        except ValueError:
            return False
        expected = expected_measurement(self.net, info.owner, self._checkpoint())
        return verify_report(report, expected, self.net.attestation_root, nonce)

    def on_block(self) -> None:
        pass

    def on_message(self, src: str, msg: Message) -> None:
        handler = getattr(self, f"_on_{type(msg).__name__}", None)
        if handler is not None and self.session is not None and not self.session.done:
            handler(src, msg)
        elif handler is not None and self.session is None:
            handler(src, msg)


class BuyerClient(_Client):
    role = Role.BUYER
    steps = BUYER_STEPS

    def __init__(
        self,
        env: ClientEnv,
        keys: KeyPair,
        endpoint: str,
        net: NetworkConfig,
        *,
        spec: DataSpec,
        price: int,
        seller_endpoints: list,
        exchanges: list,
        sample_ok: Callable[[bytes], bool],
        data_ok: Callable[[bytes], bool],
        behavior: Optional[BuyerBehavior] = None,
        wait_timeout: int = 200,
        reply_window: float = 1.0,
        name: str = "buyer",
    ):
        super().__init__(env, name, keys, endpoint, net, wait_timeout)
        self.spec = spec
        self.price = price
        self.seller_endpoints = list(seller_endpoints)
        self.exchange_list = list(exchanges)
        self.sample_ok = sample_ok
        self.data_ok = data_ok
        self.behavior = behavior or BuyerBehavior()
        self.reply_window = reply_window
        self.replies: set = set()
        self.seller: Optional[SellerReply] = None
        self._by_endpoint = {e.endpoint: e for e in self.exchange_list}
        self._nonces: dict[str, bytes] = {}
        self._attested: set = set()
        self._next_nonce = 0
        self._fees: dict[str, PaymentTransaction] = {}
        self._fee_evidence: dict[str, PaymentEvidence] = {}
        self._opened: dict[str, TradeId] = {}
        self._open_retry: set = set()
        self._samples: dict[str, bytes] = {}
        self.payment: Optional[PaymentTransaction] = None
        self._evidence: Optional[PaymentEvidence] = None
        self._submit_retry: set = set()
        self._rejected: dict[str, str] = {}
        self.data: Optional[bytes] = None
        self.reviews: list = []
        self._waiting = None  # "fees" | "payment" while waiting on confirmations

    # -- helpers ----------------------------------------------------------

    def _halted(self, step: int) -> bool:
        k = self.behavior.halt_step
        if k is None or step < k:
            return False
        self._abort(step, "halted")
        if self.behavior.cheat_when_halted and self._samples and step <= 12:
            self._cheat()
        return True

    def _cheat(self) -> None:
        """Refuse to pay and try to unlock the data with the fee deposit instead."""
        for name, tid in self._opened.items():
            ev = self._fee_evidence.get(name)
            if ev is not None:
                self._log("cheat", f"fee evidence as payment at {name}")
                self.env.send(self.endpoint, self._info(name).endpoint, SubmitEvidence(tid.raw, ev.encode()))

    def _info(self, name: str):
        return next(e for e in self.exchange_list if e.name == name)

    def _nonce(self) -> int:
        n = max(self._next_nonce, self.env.chain.next_nonce(self.keys.address))
        self._next_nonce = n + 1
        return n

    def _live(self) -> list:
        return [e for e in self.exchange_list if e.name in self._opened]

    # -- matching ---------------------------------------------------------

    def start(self) -> None:
        self.session = TradeSession(Role.BUYER, [e.name for e in self.exchange_list])
        demand = DemandBroadcast(self.spec, self.price, self.endpoint).to_message()
        for ep in self.seller_endpoints:
            self.env.send(self.endpoint, ep, demand)
        self._log("demand", f"{len(self.seller_endpoints)} sellers")
        self.env.set_timer(self.reply_window, self._choose)

    def _on_Reply(self, src, msg: Reply) -> None:
        if self.seller is None:
            self.replies.add(SellerReply(msg.seller, msg.seller_endpoint))

    def _choose(self) -> None:
        pick = select_seller(self.replies, self.env.chain)
        if isinstance(pick, NoCandidate):
            self._abort(0, "no matching seller")
            return
        self.seller = pick
        self._log("select", pick.seller.hex())
        self.env.send(
            self.endpoint,
            pick.seller_endpoint,
            Propose(self.price, self.keys.address, self.endpoint, tuple(e.name for e in self.exchange_list)),
        )
        self._arm(0, "seller acceptance")

    def _on_Accept(self, src, msg: Accept) -> None:
        if self.seller is None or src != self.seller.seller_endpoint or self.session.phases:
            return
        if not msg.accepted:
            self._abort(0, "seller declined")
            return
        self._step1()

    # -- trading ------------------------------------------------------------

    def _step1(self) -> None:
        if self._halted(1):
            return
        self._advance(1)
        for e in self.exchange_list:
            nonce = self.env.random_bytes(self.name, 32)
            self._nonces[e.endpoint] = nonce
            self.env.send(self.endpoint, e.endpoint, AttestRequest(nonce, 1))
        self._arm(1, "attestation")

    def _on_AttestResponse(self, src, msg: AttestResponse) -> None:
        info = self._by_endpoint.get(src)
        if info is None or self.session.phase != 1 or src in self._attested:
            return
        if not self.behavior.skip_attestation and not self._attestation_ok(info, msg.report, self._nonces[src]):
            self._abort(1, f"attestation of {info.name} failed")
            return
        self._attested.add(src)
        if len(self._attested) == len(self.exchange_list):
            self._step2()

    def _step2(self) -> None:
        if self._halted(2):
            return
        self._advance(2)
        for e in self.exchange_list:
            tx = PaymentTransaction.create(self.keys, e.owner, self.net.service_fee, self._nonce())
            self._fees[e.name] = tx
            self.env.submit_tx(self.endpoint, tx)
        self._waiting = "fees"
        self._arm(3, "fee confirmation")

    def on_block(self) -> None:
        if self.session is None or self.session.done:
            return
        chain = self.env.chain
        k = self.net.confirm_depth
        if self._waiting == "fees":
            if all((chain.confirmations(tx.tx_hash) or -1) >= k for tx in self._fees.values()):
                self._waiting = None
                self._step3()
        elif self._waiting == "payment":
            depth = k if self.behavior.submit_depth is None else self.behavior.submit_depth
            if (chain.confirmations(self.payment.tx_hash) or -1) >= depth:
                self._waiting = None
                self._step12()
        if self._open_retry:
            retry, self._open_retry = self._open_retry, set()
            for name in sorted(retry):
                self._send_open(name)
        if self._submit_retry:
            retry, self._submit_retry = self._submit_retry, set()
            for name in sorted(retry):
                self._send_evidence(name)

    def _step3(self) -> None:
        if self._halted(3):
            return
        self._advance(3)
        for e in self.exchange_list:
            self._fee_evidence[e.name] = build_evidence(self.env.chain, self._fees[e.name].tx_hash)
            self._send_open(e.name)
        self._arm(4, "trade id", self._open_timeout)

    def _send_open(self, name: str) -> None:
        price = self.price if self.behavior.open_price is None else self.behavior.open_price
        ev = self._fee_evidence[name]
        self.env.send(
            self.endpoint,
            self._info(name).endpoint,
            OpenTrade(ev.encode(), price, self.keys.address, self.seller.seller, self.endpoint),
        )

    def _on_TradeOpened(self, src, msg: TradeOpened) -> None:
        info = self._by_endpoint.get(src)
        if info is None or self.session.phase != 3 or info.name in self._opened:
            return
        if msg.status != STATUS_OK:
            if msg.detail == "InsufficientConfirmations":
                self._open_retry.add(info.name)
                return
            self._abort(4, f"{info.name} refused to open: {msg.detail}")
            return
        self._opened[info.name] = TradeId(msg.trade_id)
        if len(self._opened) == len(self.exchange_list):
            self._after_open()

    def _open_timeout(self) -> None:
        if self._opened:
            self._after_open()
        else:
            self._abort(4, "timed out waiting for trade id")

    def _after_open(self) -> None:
        self._advance(4)
        self.session.trade_ids = dict(self._opened)
        self._step5()

    def _step5(self) -> None:
        if self._halted(5):
            return
        key = DataKey(self.env.random_bytes(self.name, 32))
        self.session.data_key = key
        self._advance(5)
        ids = tuple((name, tid.raw) for name, tid in self._opened.items())
        self.env.send(self.endpoint, self.seller.seller_endpoint, TradeInit(ids, key.key))
        self._arm(9, "sample", self._sample_timeout)

    def _on_Sample(self, src, msg: Sample) -> None:
        info = self._by_endpoint.get(src)
        if info is None or info.name not in self._opened or info.name in self._samples or self.session.phase != 5:
            return
        tid = self._opened[info.name]
        if msg.trade_id != tid.raw or len(msg.chunks) != 1:
            return
        try:
            self._samples[info.name] = decrypt_chunk(self.session.data_key, msg.chunks[0], tid.raw)
        except (AuthenticationError, ChunkLayoutError):
            self._samples[info.name] = b""
        if len(self._samples) == len(self._opened):
            self._after_sample()

    def _sample_timeout(self) -> None:
        if self._samples:
            self._after_sample()
        else:
            self._abort(9, "timed out waiting for sample")

    def _after_sample(self) -> None:
        self._advance(9)
        self._step10()

    def _step10(self) -> None:
        if self._halted(10):
            return
        self._advance(10)
        if not all(self.sample_ok(s) for s in self._samples.values()):
            self._abort(10, "sample does not match the demand")
            return
        self._step11()

    def _step11(self) -> None:
        if self._halted(11):
            return
        if self.behavior.fake_chain is not None:
            self._advance(11)
            self._fake_payment()
            return
        self.payment = PaymentTransaction.create(self.keys, self.seller.seller, self.price, self._nonce())
        self._advance(11)
        self.env.submit_tx(self.endpoint, self.payment)
        self._waiting = "payment"
        self._arm(12, "payment confirmation")

    def _fake_payment(self) -> None:
        """Mine a private low-difficulty chain that contains the payment and feed it to the exchanges."""
        multiplier, length = self.behavior.fake_chain
        target = min(self.net.target * multiplier, MAX_TARGET)
        self.payment = PaymentTransaction.create(self.keys, self.seller.seller, self.price, self._nonce())
        parent = self.env.chain.tip.header
        blocks = []
        for i in range(length):
            blk = mine_block(parent, [self.payment] if i == 0 else [], target, self.env.now())
            blocks.append(blk)
            parent = blk.header
        self._evidence = PaymentEvidence(self.payment, (), 0, blocks[0].height, blocks[0].hash)
        headers = Headers(tuple(b.header for b in blocks))
        for e in self._live():
            self.env.send(self.endpoint, e.endpoint, headers)
        self._log("fake-chain", f"{length} headers")
        self.env.set_timer(1.0, self._step12)

    def _step12(self) -> None:
        if self._halted(12):
            return
        self._advance(12)
        if self._evidence is None:
            self._evidence = build_evidence(self.env.chain, self.payment.tx_hash)
        for e in self._live():
            self._send_evidence(e.name)
        self._arm(13, "data release")

    def _send_evidence(self, name: str) -> None:
        tid = self._opened[name]
        self.env.send(self.endpoint, self._info(name).endpoint, SubmitEvidence(tid.raw, self._evidence.encode()))

    def _on_EvidenceResult(self, src, msg: EvidenceResult) -> None:
        info = self._by_endpoint.get(src)
        if info is None or msg.status == STATUS_OK or self.session.phase != 12:
            return
        if msg.detail == "InsufficientConfirmations":
            self._submit_retry.add(info.name)
            return
        if msg.detail == "UnknownBlock" and self.behavior.fake_chain is None:
            # the payment may have moved to another block after a reorg
            try:
                fresh = build_evidence(self.env.chain, self.payment.tx_hash)
            except EvidenceError:
                self._abort(13, "payment is no longer on the canonical chain")
                return
            if fresh != self._evidence:
                self._evidence = fresh
                self._submit_retry.add(info.name)
                return
        self._rejected[info.name] = msg.detail
        if len(self._rejected) == len(self._live()):
            self._abort(13, f"evidence rejected: {msg.detail}")

    def _on_DataReleasedMsg(self, src, msg: DataReleasedMsg) -> None:
        info = self._by_endpoint.get(src)
        if info is None or info.name not in self._opened or self.data is not None:
            return
        tid = self._opened[info.name]
        try:
            data = decrypt_chunked(self.session.data_key, list(msg.chunks), tid.raw)
        except (AuthenticationError, ChunkLayoutError):
            data = None
        if self.session.phase != 12:
            return  # release outside the honest flow (e.g. after a halt) is handled by the audit
        if data is None or not self.data_ok(data):
            self.session.defrauded = True
            self._abort(13, f"released data from {info.name} is not what was sampled")
            return
        self.data = data
        self._advance(13)
        self._complete()
        self._step14()

    def _step14(self) -> None:
        k = self.behavior.halt_step
        if k is not None and k <= 14:
            return
        self._advance(14)
        submit = lambda tx: self.env.submit_tx(self.endpoint, tx)  # noqa: E731
        self.reviews.append(post_review(self.keys, self.seller.seller, 5, "data as described", submit))
        for e in self.exchange_list:
            self.reviews.append(post_review(self.keys, e.owner, 5, f"service at {e.name}", submit))


@dataclass
class SellerBehavior:
    halt_step: Optional[int] = None
    garbage: bool = False  # deposit data that does not match the offer

    @property
    def honest(self) -> bool:
        return self.halt_step is None and not self.garbage


class SellerClient(_Client):
    role = Role.SELLER
    steps = SELLER_STEPS

    def __init__(
        self,
        env: ClientEnv,
        keys: KeyPair,
        endpoint: str,
        net: NetworkConfig,
        *,
        policy: SellerPolicy,
        behavior: Optional[SellerBehavior] = None,
        wait_timeout: int = 200,
        name: str = "seller",
    ):
        super().__init__(env, name, keys, endpoint, net, wait_timeout)
        self.policy = policy
        self.behavior = behavior or SellerBehavior()
        self.offers: dict[str, DataItem] = {}
        self.terms: Optional[Propose] = None
        self.item: Optional[DataItem] = None
        self._exchanges: list = []
        self._nonces: dict[str, bytes] = {}
        self._pending: set = set()
        self._ids: dict[str, TradeId] = {}
        self.deposited: list = []

    def _halted(self, step: int) -> bool:
        k = self.behavior.halt_step
        if k is not None and step >= k:
            self._abort(step, "halted")
            return True
        return False

    def _on_Demand(self, src, msg: Demand) -> None:
        try:
            demand = DemandBroadcast.from_message(msg)
        except ValueError:
            return
        item = self.policy.offer_for(demand.spec, demand.price)
        if item is None:
            return
        self.offers[demand.buyer_endpoint] = item
        self.env.send(self.endpoint, demand.buyer_endpoint, Reply(self.keys.address, self.endpoint))

    def _on_Propose(self, src, msg: Propose) -> None:
        item = self.offers.get(msg.buyer_endpoint)
        known = {e.name for e in self.net.exchanges}
        ok = (
            self.session is None
            and item is not None
            and msg.price >= self.policy.min_price
            and 0 < len(msg.exchanges) <= 5
            and set(msg.exchanges) <= known
        )
        if self.session is not None:
            return
        self.env.send(self.endpoint, msg.buyer_endpoint, Accept(1 if ok else 0))
        if not ok:
            return
        self.terms = msg
        self.item = item
        self._exchanges = [self.net.exchange(n) for n in msg.exchanges]
        self.session = TradeSession(Role.SELLER, list(msg.exchanges))
        self._arm(6, "trade init")

    def _on_TradeInit(self, src, msg: TradeInit) -> None:
        if self.terms is None or src != self.terms.buyer_endpoint or self.session.phases:
            return
        agreed = {e.name for e in self._exchanges}
        ids = {name: TradeId(raw) for name, raw in msg.trade_ids}
        if not ids or not set(ids) <= agreed:
            self._abort(6, "trade ids name exchanges that were not agreed")
            return
        self._ids = ids
        self.session.trade_ids = dict(ids)
        self.session.data_key = DataKey(msg.data_key)
        self._step6()

    def _info(self, name: str):
        return next(e for e in self._exchanges if e.name == name)

    def _step6(self) -> None:
        if self._halted(6):
            return
        self._advance(6)
        self._pending = set(self._ids)
        for name in sorted(self._ids):
            nonce = self.env.random_bytes(self.name, 32)
            self._nonces[self._info(name).endpoint] = nonce
            self.env.send(self.endpoint, self._info(name).endpoint, AttestRequest(nonce, 6))
        self._arm(6, "attestation", lambda: self._partial(6, self._step7))

    def _partial(self, step: int, then) -> None:
        """Carry on with the exchanges that answered, dropping the silent ones."""
        for name in self._pending:
            self._ids.pop(name, None)
        self._pending = set()
        if self._ids:
            then()
        else:
            self._abort(step, "no exchange answered")

    def _by_src(self, src: str) -> Optional[str]:
        for name in self._ids:
            if self._info(name).endpoint == src:
                return name
        return None

    def _on_AttestResponse(self, src, msg: AttestResponse) -> None:
        name = self._by_src(src)
        if name is None or self.session.phase != 6 or name not in self._pending:
            return
        if not self._attestation_ok(self._info(name), msg.report, self._nonces[src]):
            self._abort(6, f"attestation of {name} failed")
            return
        self._pending.discard(name)
        if not self._pending:
            self._step7()

    def _step7(self) -> None:
        if self._halted(7):
            return
        self._advance(7)
        self._pending = set(self._ids)
        for name in sorted(self._ids):
            self.env.send(self.endpoint, self._info(name).endpoint, ParamsRequest(self._ids[name].raw))
        self._arm(7, "trade parameters", lambda: self._partial(7, self._step8))

    def _on_ParamsResponse(self, src, msg: ParamsResponse) -> None:
        name = self._by_src(src)
        if name is None or self.session.phase != 7 or name not in self._pending:
            return
        t = self.terms
        good = (
            msg.status == STATUS_OK
            and msg.trade_id == self._ids[name].raw
            and msg.price == t.price
            and msg.buyer == t.buyer
            and msg.seller == self.keys.address
        )
        if not good:
            self._abort(7, f"trade parameters at {name} disagree with the agreed terms")
            return
        self._pending.discard(name)
        if not self._pending:
            self._step8()

    def _step8(self) -> None:
        if self._halted(8):
            return
        self._advance(8)
        data = self.item.data
        if self.behavior.garbage:
            data = self.env.random_bytes(self.name, len(data))
        self._pending = set(self._ids)
        for name in sorted(self._ids):
            chunks = encrypt_chunked(self.session.data_key, data, self._ids[name].raw)
            self.env.send(self.endpoint, self._info(name).endpoint, DepositData(self._ids[name].raw, tuple(chunks)))
        self._arm(8, "deposit acknowledgement", lambda: self._partial(8, self._complete))

    def _on_DepositAck(self, src, msg: DepositAck) -> None:
        name = self._by_src(src)
        if name is None or self.session.phase != 8 or name not in self._pending:
            return
        if msg.status != STATUS_OK:
            self._abort(8, f"{name} refused the deposit: {msg.detail}")
            return
        self._pending.discard(name)
        self.deposited.append(name)
        if not self._pending:
            self._wait += 1
            self._complete()


def run_trade_buyer(buyer: BuyerClient) -> TradeSession:
    """Start the buyer's side of a trade; the outcome settles as the host delivers events."""
    buyer.start()
    return buyer.session


def run_trade_seller(seller: SellerClient, buyer_request: TradeInit, src: str) -> Optional[TradeSession]:
    """Feed the buyer's (trade ids, key) message to a seller that already accepted the terms."""
    seller.on_message(src, buyer_request)
    return seller.session
