"""Deterministic in-process network simulator and the adversarial trading harness.

Everything runs on one logical thread. Events fire in (time, insertion)
order, all randomness comes from generators seeded by ``SimConfig.seed``, and
every protocol message is serialized to a frame, delivered, and parsed again,
so the same config always yields a byte-identical ``EventTrace``.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

from .attestation import SimulatedCPU
from .chain import Allocation, ChainState, ExchangeInfo, NetworkConfig, PaymentTransaction, decode_tx, mine_block
from .clients import (
    AbortedAtStep,
    BuyerBehavior,
    BuyerClient,
    Completed,
    DataItem,
    DataSpec,
    SellerBehavior,
    SellerClient,
    SellerPolicy,
)
from .crypto import CHUNK_SIZE, AuthenticationError, ChunkLayoutError, KeyPair, decrypt_chunked, sha256
from .exchange import (
    DataReleased,
    EgressAudit,
    EvidenceRejected,
    ExchangeConfig,
    InvalidEvidence,
    Opened,
    SampleSent,
    TradeId,
    TradeParams,
    TrustedExchange,
)
from .spv import PaymentEvidence
from .wire import (
    STATUS_ERROR,
    STATUS_OK,
    AttestRequest,
    AttestResponse,
    DataReleasedMsg,
    DepositAck,
    DepositData,
    EvidenceResult,
    Headers,
    Message,
    MsgType,
    OpenTrade,
    ParamsRequest,
    ParamsResponse,
    SubmitEvidence,
    TradeOpened,
    TxMsg,
    decode_frame,
)

PARTIES = ("buyer", "seller", "exchange")
NODE_ENDPOINT = "10.0.0.1:8333"
BUYER_ENDPOINT = "10.0.2.1:9000"
SIM_TARGET = 2**252


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class DelayModel:
    kind: str = "uniform"  # "fixed" | "uniform"
    fixed: int = 10
    low: int = 5
    high: int = 50

    def validate(self) -> None:
        if self.kind == "fixed":
            if self.fixed < 0:
                raise ConfigError("fixed delay must be non-negative")
        elif self.kind == "uniform":
            if not 0 <= self.low <= self.high:
                raise ConfigError("uniform delay needs 0 <= low <= high")
        else:
            raise ConfigError(f"unknown delay model {self.kind!r}")

    @property
    def worst(self) -> int:
        return self.fixed if self.kind == "fixed" else self.high

    def draw(self, rng: random.Random) -> int:
        return self.fixed if self.kind == "fixed" else rng.randint(self.low, self.high)

    def to_dict(self) -> dict:
        if self.kind == "fixed":
            return {"fixed": self.fixed}
        return {"uniform": [self.low, self.high]}

    @classmethod
    def from_dict(cls, d) -> "DelayModel":
        if d is None:
            return cls()
        if "fixed" in d:
            return cls("fixed", fixed=int(d["fixed"]))
        if "uniform" in d:
            low, high = d["uniform"]
            return cls("uniform", low=int(low), high=int(high))
        raise ConfigError(f"unknown delay model {d!r}")


@dataclass
class AdversarySpec:
    halt: Optional[tuple] = None  # (party, step)
    drop: tuple = ()  # ((message type name, probability), ...)
    fake_chain: Optional[tuple] = None  # (target multiplier, length)
    reorg: Optional[tuple] = None  # (trigger depth, branch length); None entries default to K-1, K+1
    kill_exchange: tuple = ()  # ((exchange index, after step), ...)
    tamper_enclave: tuple = ()  # exchange indices
    seller_garbage: bool = False
    underquote: int = 0  # buyer opens the trade this much below the agreed price
    skip_attestation: bool = False  # buyer colludes with a tampered exchange
    disable_release_gating: bool = False  # mutation hook for the audit

    @property
    def empty(self) -> bool:
        return self == AdversarySpec()

    def validate(self, n_exchanges: int) -> None:
        if self.halt is not None:
            party, step = self.halt
            if party not in PARTIES or not 1 <= int(step) <= 15:
                raise ConfigError(f"halt must be (buyer|seller|exchange, 1..15), got {self.halt!r}")
        for name, p in self.drop:
            if name not in MsgType.__members__ or not 0.0 <= float(p) <= 1.0:
                raise ConfigError(f"bad drop rule {(name, p)!r}")
        if self.fake_chain is not None:
            mult, length = self.fake_chain
            if mult < 1 or length < 1:
                raise ConfigError("fake chain needs multiplier >= 1 and length >= 1")
        for idx, step in self.kill_exchange:
            if not 0 <= idx < n_exchanges or not 1 <= step <= 15:
                raise ConfigError(f"bad kill rule {(idx, step)!r}")
        for idx in self.tamper_enclave:
            if not 0 <= idx < n_exchanges:
                raise ConfigError(f"no exchange {idx} to tamper with")
        if self.underquote < 0:
            raise ConfigError("underquote must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v not in (None, (), [], False, 0)}

    @classmethod
    def from_dict(cls, d) -> "AdversarySpec":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown adversary controls {sorted(unknown)}")

        def pairs(v):
            return tuple(tuple(x) for x in (v or ()))

        return cls(
            halt=tuple(d["halt"]) if d.get("halt") else None,
            drop=pairs(d.get("drop")),
            fake_chain=tuple(d["fake_chain"]) if d.get("fake_chain") else None,
            reorg=tuple(d["reorg"]) if d.get("reorg") is not None else None,
            kill_exchange=pairs(d.get("kill_exchange")),
            tamper_enclave=tuple(d.get("tamper_enclave") or ()),
            seller_garbage=bool(d.get("seller_garbage", False)),
            underquote=int(d.get("underquote", 0)),
            skip_attestation=bool(d.get("skip_attestation", False)),
            disable_release_gating=bool(d.get("disable_release_gating", False)),
        )


@dataclass
class SimConfig:
    seed: int = 0
    exchanges: int = 1
    sellers: int = 2
    price: int = 100
    data_size: int = 2 * CHUNK_SIZE + 4000
    target: int = SIM_TARGET
    confirm_depth: int = 6
    fifo_capacity: int = 144
    trade_timeout: int = 600
    service_fee: int = 10
    block_interval: int = 10
    wait_timeout: int = 200
    max_time: int = 3600
    adversary: AdversarySpec = field(default_factory=AdversarySpec)
    delay: DelayModel = field(default_factory=DelayModel)
    name: str = "custom"

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        if not 1 <= self.exchanges <= 5:
            raise ConfigError("between 1 and 5 exchanges")
        if self.sellers < 1:
            raise ConfigError("need at least one seller")
        if self.price <= 0 or self.data_size <= 0 or self.service_fee <= 0:
            raise ConfigError("price, data size and fee must be positive")
        if self.confirm_depth < 1 or self.fifo_capacity <= self.confirm_depth:
            raise ConfigError("need 1 <= confirm_depth < fifo_capacity")
        if self.block_interval <= 0 or self.wait_timeout <= 0 or self.max_time <= 0:
            raise ConfigError("intervals must be positive")
        if not 0 < self.target < 2**256:
            raise ConfigError("target out of range")
        self.delay.validate()
        self.adversary.validate(self.exchanges)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("adversary", "delay", "target")}
        d["target_hex"] = f"{self.target:064x}"
        d["adversary"] = self.adversary.to_dict()
        d["delay"] = self.delay.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__) | {"target_hex", "expect"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        adversary = AdversarySpec.from_dict(d.pop("adversary", None))
        delay = DelayModel.from_dict(d.pop("delay", None))
        d.pop("expect", None)
        if "target_hex" in d:
            d["target"] = int(d.pop("target_hex"), 16)
        try:
            cfg = cls(adversary=adversary, delay=delay, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


# --------------------------------------------------------------------------
# trace and event loop


@dataclass(frozen=True)
class TraceRecord:
    sim_time: int  # milliseconds
    actor: str
    event_kind: str
    payload_digest: str
    detail: str = ""


class EventTrace:
    """Append-only event log, exported as JSON Lines."""

    def __init__(self):
        self._records: list[TraceRecord] = []

    def append(self, record: TraceRecord) -> None:
        self._records.append(record)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True, separators=(",", ":")) + "\n" for r in self._records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "EventTrace":
        trace = cls()
        for line in text.splitlines():
            if line.strip():
                trace.append(TraceRecord(**json.loads(line)))
        return trace

    def digest(self) -> str:
        return sha256(self.to_jsonl().encode()).hex()


class Simulator:
    """Event heap plus framed message transport.

    Links are FIFO per (src, dst) pair: a message never overtakes an earlier
    one on the same link, whatever the delay model draws.
    """

    def __init__(self, seed: int, delay: Optional[DelayModel] = None, drops=()):
        self.now_ms = 0
        self.delay = delay or DelayModel()
        self.drops = {MsgType[name]: float(p) for name, p in drops}
        self.trace = EventTrace()
        self._heap: list = []
        self._seq = 0
        self._delay_rng = random.Random(f"{seed}/delay")
        self._drop_rng = random.Random(f"{seed}/drop")
        self._actors: dict[str, object] = {}
        self._names: dict[str, str] = {}
        self._link_clock: dict[tuple, int] = {}
        self.on_send: Optional[Callable[[str, str, bytes], None]] = None
        self.on_deliver: Optional[Callable[[str, str, Message, bytes], None]] = None

    def register(self, endpoint: str, name: str, actor) -> None:
        self._actors[endpoint] = actor
        self._names[endpoint] = name

    def name_of(self, endpoint: str) -> str:
        return self._names.get(endpoint, endpoint)

    def record(self, actor: str, kind: str, payload: bytes = b"", detail: str = "") -> None:
        self.trace.append(TraceRecord(self.now_ms, actor, kind, sha256(payload).hex(), detail))

    def schedule(self, delay_ms: int, fn: Callable[[], None]) -> None:
        if delay_ms < 0:
            raise ValueError("cannot schedule into the past")
        heapq.heappush(self._heap, (self.now_ms + int(delay_ms), self._seq, fn))
        self._seq += 1

    def send(self, src: str, dst: str, msg: Message) -> None:
        frame = msg.frame()
        kind = MsgType(frame[4]).name
        if self.on_send is not None:
            self.on_send(src, dst, frame)
        p = self.drops.get(MsgType(frame[4]))
        if p is not None and self._drop_rng.random() < p:
            self.record(self.name_of(src), "drop", frame, f"{kind} -> {self.name_of(dst)}")
            return
        self.record(self.name_of(src), "send", frame, f"{kind} -> {self.name_of(dst)}")
        at = max(self.now_ms + self.delay.draw(self._delay_rng), self._link_clock.get((src, dst), 0))
        self._link_clock[(src, dst)] = at
        self.schedule(at - self.now_ms, lambda: self._deliver(src, dst, frame))

    def _deliver(self, src: str, dst: str, frame: bytes) -> None:
        actor = self._actors.get(dst)
        msg = decode_frame(frame)
        self.record(self.name_of(dst), "deliver", frame, f"{type(msg).__name__} <- {self.name_of(src)}")
        if self.on_deliver is not None:
            self.on_deliver(src, dst, msg, frame)
        if actor is not None:
            actor.on_message(src, msg)

    @property
    def pending(self) -> int:
        return len(self._heap)

    def next_event(self) -> bool:
        """Fire the earliest event; False when the queue is empty."""
        if not self._heap:
            return False
        t, _, fn = heapq.heappop(self._heap)
        self.now_ms = t
        fn()
        return True

    def advance_time(self, until_ms: int) -> None:
        """Fire every event scheduled at or before ``until_ms`` and move the clock there."""
        while self._heap and self._heap[0][0] <= until_ms:
            self.next_event()
        self.now_ms = max(self.now_ms, until_ms)

    def run(self, stop: Optional[Callable[[], bool]] = None, until_ms: Optional[int] = None) -> None:
        while self._heap:
            if until_ms is not None and self._heap[0][0] > until_ms:
                break
            self.next_event()
            if stop is not None and stop():
                break


# --------------------------------------------------------------------------
# actors


class LedgerNode:
    """The honest full node: mempool, periodic mining, header relay to exchange hosts."""

    def __init__(self, sim: Simulator, chain: ChainState, endpoint: str = NODE_ENDPOINT):
        self.sim = sim
        self.chain = chain
        self.endpoint = endpoint
        self.mempool: list = []
        self.relay: list[str] = []
        self.watchers: list[Callable[[], None]] = []
        self._relayed = chain.canonical_hashes()
        self.mining = True

    def on_message(self, src: str, msg: Message) -> None:
        if isinstance(msg, TxMsg):
            try:
                tx = decode_tx(msg.tx)
            except ValueError:
                return
            if all(t.tx_hash != tx.tx_hash for t in self.mempool):
                self.mempool.append(tx)

    def start(self) -> None:
        self.sim.schedule(self.chain.config.block_interval * 1000, self._tick)

    def _tick(self) -> None:
        if not self.mining:
            return
        self.mine_one()
        self.sim.schedule(self.chain.config.block_interval * 1000, self._tick)

    def mine_one(self):
        txs = self.chain.select_transactions(self.mempool)
        block = self.chain.mine(txs, self.sim.now_ms // 1000)
        self.sim.record("node", "block", block.hash, f"height {block.height} txs {len(txs)}")
        self._changed()
        return block

    def inject(self, blocks) -> None:
        """Blocks mined elsewhere (e.g. a private branch) arriving at this node."""
        for b in blocks:
            reason = self.chain.add_block(b)
            self.sim.record("node", "block", b.hash, f"height {b.height} injected {reason.value if reason else 'ok'}")
        self._changed()

    def _changed(self) -> None:
        new = self.chain.canonical_hashes()
        fork = 0
        while fork < min(len(new), len(self._relayed)) and new[fork] == self._relayed[fork]:
            fork += 1
        self._relayed = new
        if fork < len(new):
            headers = Headers(tuple(self.chain.block(h).header for h in new[fork:]))
            for ep in self.relay:
                self.sim.send(self.endpoint, ep, headers)
        pending = [tx for tx in self.mempool if self.chain.find_transaction(tx.tx_hash) is None]
        self.mempool = self.chain.select_transactions(pending, limit=len(pending))
        for watcher in self.watchers:
            self.sim.schedule(0, watcher)


def _reason(result) -> str:
    if isinstance(result, (InvalidEvidence, EvidenceRejected)):
        return result.reason
    return type(result).__name__


class ExchangeHost:
    """Untrusted host process around one enclave.

    Requests carry the trading step they serve; a host halted at step k
    crashes for good on the first request of step >= k.
    """

    STEP_OF = {OpenTrade: 4, ParamsRequest: 7, DepositData: 9, SubmitEvidence: 13}

    def __init__(self, sim: Simulator, name: str, endpoint: str, node_endpoint: str, enclave_factory):
        self.sim = sim
        self.name = name
        self.endpoint = endpoint
        self.node_endpoint = node_endpoint
        self.audit = EgressAudit()
        self.enclave: TrustedExchange = enclave_factory(self._egress)
        self.alive = True
        self.halt_step: Optional[int] = None
        self.foreign_headers: Counter = Counter()
        self.released = 0
        self.requests = 0
        self.gc_runs = 0

    def _egress(self, endpoint: str, msg) -> None:
        self.audit.record(endpoint, msg)
        self.sim.send(self.endpoint, endpoint, msg)

    def kill(self, why: str) -> None:
        if self.alive:
            self.alive = False
            self.sim.record(self.name, "crash", b"", why)

    def _gate(self, step: int) -> bool:
        if self.halt_step is not None and step >= self.halt_step:
            self.kill(f"halted at step {step}")
        return self.alive

    def _call(self, op: str, *args):
        call = self.audit.begin(op)
        result = getattr(self.enclave, op)(*args)
        self.audit.end(call, result)
        self.requests += 1
        self.sim.record(self.name, "enclave", op.encode(), f"{op} -> {_reason(result)}")
        return result

    def on_message(self, src: str, msg: Message) -> None:
        if not self.alive:
            return
        if isinstance(msg, Headers):
            for h in msg.headers:
                result = self.enclave.ingest_header(h)
                if src != self.node_endpoint:
                    self.foreign_headers[result.value] += 1
            return
        step = msg.step if isinstance(msg, AttestRequest) else self.STEP_OF.get(type(msg))
        if step is None or not self._gate(step):
            return
        handler = getattr(self, f"_on_{type(msg).__name__}")
        handler(src, msg)

    def _on_AttestRequest(self, src, msg: AttestRequest) -> None:
        report = self.enclave.attest(msg.nonce)
        self.sim.send(self.endpoint, src, AttestResponse(report.encode()))

    def _on_OpenTrade(self, src, msg: OpenTrade) -> None:
        try:
            ev = PaymentEvidence.decode(msg.evidence)
        except Exception:  # any malformed evidence bytes
            self.sim.send(self.endpoint, src, TradeOpened(STATUS_ERROR, bytes(16), "MalformedRequest"))
            return
        result = self._call("open_trade", ev, msg.price, msg.buyer, msg.seller, msg.buyer_endpoint)
        if not isinstance(result, Opened):
            self.sim.send(self.endpoint, src, TradeOpened(STATUS_ERROR, bytes(16), _reason(result)))

    def _on_ParamsRequest(self, src, msg: ParamsRequest) -> None:
        result = self._call("get_trade_params", TradeId(msg.trade_id))
        if isinstance(result, TradeParams):
            reply = ParamsResponse(STATUS_OK, msg.trade_id, result.price, result.buyer, result.seller)
        else:
            reply = ParamsResponse(STATUS_ERROR, msg.trade_id, 0, bytes(20), bytes(20))
        self.sim.send(self.endpoint, src, reply)

    def _on_DepositData(self, src, msg: DepositData) -> None:
        result = self._call("deposit_data", TradeId(msg.trade_id), msg.chunks)
        ok = isinstance(result, SampleSent)
        self.sim.send(self.endpoint, src, DepositAck(STATUS_OK if ok else STATUS_ERROR, msg.trade_id, "" if ok else _reason(result)))

    def _on_SubmitEvidence(self, src, msg: SubmitEvidence) -> None:
        try:
            ev = PaymentEvidence.decode(msg.evidence)
        except Exception:
            self.sim.send(self.endpoint, src, EvidenceResult(STATUS_ERROR, msg.trade_id, "MalformedRequest"))
            return
        result = self._call("submit_payment_evidence", TradeId(msg.trade_id), ev)
        ok = isinstance(result, DataReleased)
        self.sim.send(self.endpoint, src, EvidenceResult(STATUS_OK if ok else STATUS_ERROR, msg.trade_id, "" if ok else _reason(result)))
        if ok:
            self.released += 1
            if self._gate(15):
                self._call("gc", self.sim.now_ms // 1000)
                self.gc_runs += 1


# --------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class Violation:
    """A broken invariant: the deviating party, the step where it broke, and the run's seed."""

    party: str
    step: int
    seed: int
    invariant: str
    cell: str = ""
    detail: str = ""

    def __str__(self) -> str:
        return f"({self.party}, step {self.step}, seed {self.seed}) {self.invariant} [{self.cell}]: {self.detail}"


@dataclass
class FinalState:
    seed: int
    outcomes: dict
    reasons: dict
    phases: dict
    initial_balances: dict
    balances: dict
    chain_height: int
    chain_tip: str
    enclave_tables: dict
    exchange_alive: dict
    obtained: bool
    data_matches: bool
    seller_paid: bool
    any_seller_payment: bool
    released: int
    fake_headers: dict
    reviews: dict
    deposited: list
    audit_violations: list
    violations: list
    addresses: dict

    def balance_delta(self, who: str) -> int:
        a = self.addresses[who]
        return self.balances.get(a, 0) - self.initial_balances.get(a, 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violations"] = [asdict(v) for v in self.violations]
        return d


# --------------------------------------------------------------------------
# the world


def _key(seed: int, role: str) -> KeyPair:
    return KeyPair.from_seed(sha256(f"fairdex-sim/{seed}/{role}".encode()))


class World:
    """One buyer, ``sellers`` sellers, ``exchanges`` exchanges and a ledger node wired through a Simulator."""

    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        adv = config.adversary
        seed = config.seed
        self.sim = Simulator(seed, config.delay, adv.drop)
        self._rngs: dict[str, random.Random] = {}

        self.buyer_keys = _key(seed, "buyer")
        self.seller_keys = [_key(seed, f"seller{i}") for i in range(config.sellers)]
        self.owner_keys = [_key(seed, f"owner{i}") for i in range(config.exchanges)]
        self.cpu = SimulatedCPU(_key(seed, "cpu-root"))
        self.second_address = _key(seed, "buyer-stash").address
        funds = 10 * (config.price + config.service_fee * config.exchanges) + 1000
        allocations = [Allocation(self.buyer_keys.address, funds, self.buyer_keys.public_key)]
        allocations += [Allocation(k.address, 100, k.public_key) for k in self.seller_keys]
        allocations += [Allocation(k.address, 100, k.public_key) for k in self.owner_keys]
        exchanges = [
            ExchangeInfo(f"ex{i}", f"10.0.1.{i + 1}:7000", k.address) for i, k in enumerate(self.owner_keys)
        ]
        self.net = NetworkConfig(
            target=config.target,
            allocations=allocations,
            confirm_depth=config.confirm_depth,
            fifo_capacity=config.fifo_capacity,
            trade_timeout=config.trade_timeout,
            service_fee=config.service_fee,
            block_interval=config.block_interval,
            attestation_root=self.cpu.root_public_key,
            exchanges=exchanges,
        )
        self.chain = ChainState(self.net)
        self.node = LedgerNode(self.sim, self.chain)
        self.sim.register(NODE_ENDPOINT, "node", self.node)

        self.hosts: list[ExchangeHost] = []
        for i, info in enumerate(exchanges):
            version = self.net.program_version + ("+patched" if i in adv.tamper_enclave else "")
            xcfg = ExchangeConfig.from_network(self.net, info.owner, self.chain.genesis.header)
            rng = random.Random(f"{seed}/enclave/{i}")

            def factory(egress, xcfg=xcfg, rng=rng, version=version):
                return TrustedExchange(
                    xcfg,
                    self.cpu,
                    egress=egress,
                    rng=rng,
                    program_version=version,
                    release_gating=not adv.disable_release_gating,
                )

            host = ExchangeHost(self.sim, info.name, info.endpoint, NODE_ENDPOINT, factory)
            self.hosts.append(host)
            self.sim.register(info.endpoint, info.name, host)
            self.node.relay.append(info.endpoint)
        if adv.halt and adv.halt[0] == "exchange":
            self.hosts[0].halt_step = int(adv.halt[1])

        data_rng = random.Random(f"{seed}/data")
        self.file = data_rng.randbytes(config.data_size)
        spec = DataSpec(frozenset({"weather", "hourly"}), config.data_size // 2, config.data_size * 2)
        self.sellers: list[SellerClient] = []
        seller_endpoints = []
        for i, k in enumerate(self.seller_keys):
            if i == 0:
                items = [DataItem("station-log", frozenset({"weather", "hourly", "csv"}), self.file)]
            else:
                items = [DataItem(f"traffic-{i}", frozenset({"traffic"}), data_rng.randbytes(1000))]
            halt = adv.halt[1] if adv.halt and adv.halt[0] == "seller" and i == 0 else None
            behavior = SellerBehavior(halt_step=halt, garbage=adv.seller_garbage and i == 0)
            ep = f"10.0.3.{i + 1}:9000"
            seller = SellerClient(
                self,
                k,
                ep,
                self.net,
                policy=SellerPolicy(items, max(1, config.price - 10)),
                behavior=behavior,
                wait_timeout=config.wait_timeout,
                name="seller" if i == 0 else f"seller{i}",
            )
            self.sellers.append(seller)
            seller_endpoints.append(ep)
            self.sim.register(ep, seller.name, seller)

        behavior = BuyerBehavior(
            halt_step=int(adv.halt[1]) if adv.halt and adv.halt[0] == "buyer" else None,
            skip_attestation=adv.skip_attestation,
            open_price=config.price - adv.underquote if adv.underquote else None,
            fake_chain=tuple(adv.fake_chain) if adv.fake_chain else None,
        )
        if adv.reorg is not None:
            behavior.submit_depth = self._reorg_params()[0]
            behavior.double_spend_to = self.second_address
        self.buyer = BuyerClient(
            self,
            self.buyer_keys,
            BUYER_ENDPOINT,
            self.net,
            spec=spec,
            price=config.price,
            seller_endpoints=seller_endpoints,
            exchanges=exchanges,
            sample_ok=lambda s: s == self.file[: len(s)] and len(s) > 0,
            data_ok=lambda d: d == self.file,
            behavior=behavior,
            wait_timeout=config.wait_timeout,
            reply_window=1.0 + 2 * config.delay.worst / 1000,
        )
        self.sim.register(BUYER_ENDPOINT, "buyer", self.buyer)
        self.node.watchers.append(self.buyer.on_block)
        self.node.watchers.append(self._after_block)
        for s in self.sellers:
            self.node.watchers.append(s.on_block)

        self._killed: set = set()
        self._reorg_done = False
        self._settle_from: Optional[int] = None
        self.leaks: list[str] = []
        self.releases_to_buyer: list = []
        self._fragments = [self.file[i : i + 48] for i in range(0, len(self.file), CHUNK_SIZE)]
        self.sim.on_send = self._inspect
        self.sim.on_deliver = self._observe
        self.initial_balances = {a.hex(): v for a, v in self.chain.balances.items()}

    # -- ClientEnv ------------------------------------------------------------

    def now(self) -> int:
        return self.sim.now_ms // 1000

    def send(self, src: str, dst: str, msg: Message) -> None:
        self.sim.send(src, dst, msg)

    def submit_tx(self, src: str, tx) -> None:
        self.sim.send(src, NODE_ENDPOINT, TxMsg(tx.encode()))

    def set_timer(self, delay_s: float, callback) -> None:
        self.sim.schedule(int(delay_s * 1000), callback)

    def record(self, actor: str, kind: str, detail: str) -> None:
        self.sim.record(actor, kind, detail.encode(), detail)
        if kind == "phase":
            self._on_phase(int(detail))

    def random_bytes(self, actor: str, n: int) -> bytes:
        rng = self._rngs.setdefault(actor, random.Random(f"{self.config.seed}/actor/{actor}"))
        return rng.randbytes(n)

    # -- adversary hooks ---------------------------------------------------------

    def _on_phase(self, step: int) -> None:
        for idx, after in self.config.adversary.kill_exchange:
            if step >= after and idx not in self._killed:
                self._killed.add(idx)
                self.hosts[idx].kill(f"killed after step {after}")

    def _reorg_params(self) -> tuple:
        k = self.config.confirm_depth
        trigger, length = self.config.adversary.reorg or (None, None)
        return (k - 1 if trigger is None else int(trigger), k + 1 if length is None else int(length))

    def _after_block(self) -> None:
        if self.config.adversary.reorg is None or self._reorg_done or self.buyer.payment is None:
            return
        trigger, _ = self._reorg_params()
        if self.chain.confirmations(self.buyer.payment.tx_hash) == trigger:
            self._reorg_done = True
            # the private branch shows up half a block interval later
            self.sim.schedule(self.config.block_interval * 500, self._reorg)

    def _reorg(self) -> None:
        trigger, length = self._reorg_params()
        pay = self.buyer.payment
        found = self.chain.find_transaction(pay.tx_hash)
        if found is None:
            return
        block, _ = found
        parent = self.chain.block(block.header.prev_hash).header
        spend = PaymentTransaction.create(self.buyer_keys, self.second_address, pay.amount, pay.nonce)
        branch = []
        for i in range(length):
            b = mine_block(parent, [spend] if i == 0 else [], self.net.target, self.now())
            branch.append(b)
            parent = b.header
        self.sim.record("attacker", "reorg", branch[-1].hash, f"fork at {block.height - 1} length {length}")
        self.node.inject(branch)

    # -- oracles -----------------------------------------------------------------

    def _inspect(self, src: str, dst: str, frame: bytes) -> None:
        for frag in self._fragments:
            if frag in frame:
                self.leaks.append(f"{self.sim.name_of(src)} -> {self.sim.name_of(dst)} type {frame[4]}")
                return

    def _observe(self, src: str, dst: str, msg: Message, frame: bytes) -> None:
        if dst == BUYER_ENDPOINT and isinstance(msg, DataReleasedMsg):
            self.releases_to_buyer.append((src, msg))

    def obtained_data(self) -> tuple:
        """(full ciphertext arrived and opens under the buyer's key, plaintext equals the seller's file)."""
        key = self.buyer.session.data_key if self.buyer.session else None
        got, match = False, False
        for _, msg in self.releases_to_buyer:
            if not any(c.index != 0 for c in msg.chunks) or key is None:
                continue
            try:
                plain = decrypt_chunked(key, list(msg.chunks), msg.trade_id)
            except (AuthenticationError, ChunkLayoutError):
                continue
            got = True
            match = match or plain == self.file
        return got, match

    # -- run ---------------------------------------------------------------------

    def _finished(self) -> bool:
        sessions = [self.buyer.session] + [s.session for s in self.sellers if s.session is not None]
        if not all(s is not None and s.done for s in sessions):
            return False
        if self._settle_from is None:
            self._settle_from = self.chain.height
        return self.chain.height >= self._settle_from + self.config.confirm_depth + 1

    def run(self):
        self.node.start()
        self.buyer.start()
        self.sim.run(stop=self._finished, until_ms=self.config.max_time * 1000)
        self.node.mining = False
        for s in [self.buyer.session] + [s.session for s in self.sellers]:
            if s is not None and not s.done:
                s.abort(max(s.phases, default=0), "simulation time limit")
        return self.sim.trace, self.final_state()

    def final_state(self) -> FinalState:
        cfg = self.config
        chain = self.chain
        buyer = self.buyer_keys.address
        seller = self.seller_keys[0].address
        k = cfg.confirm_depth
        pays = chain.payments(buyer, seller)
        paid = any(tx.amount >= cfg.price and chain.height - h >= k for tx, h in pays)
        obtained, matches = self.obtained_data()
        audit = [f"{h.name}: {v}" for h in self.hosts for v in h.audit.violations()]
        foreign = Counter()
        for h in self.hosts:
            foreign.update(h.foreign_headers)
        state = FinalState(
            seed=cfg.seed,
            outcomes={"buyer": str(self.buyer.session.outcome), "seller": str(self.sellers[0].session.outcome if self.sellers[0].session else "Idle")},
            reasons={
                "buyer": getattr(self.buyer.session.outcome, "reason", ""),
                "seller": getattr(self.sellers[0].session.outcome, "reason", "") if self.sellers[0].session else "",
            },
            phases={
                "buyer": list(self.buyer.session.phases),
                "seller": list(self.sellers[0].session.phases) if self.sellers[0].session else [],
            },
            initial_balances=dict(self.initial_balances),
            balances={a.hex(): v for a, v in chain.balances.items()},
            chain_height=chain.height,
            chain_tip=chain.tip.hash.hex(),
            enclave_tables={h.name: h.enclave.table_summary() for h in self.hosts},
            exchange_alive={h.name: h.alive for h in self.hosts},
            obtained=obtained,
            data_matches=matches and self.buyer.data == self.file,
            seller_paid=paid,
            any_seller_payment=bool(pays),
            released=sum(h.released for h in self.hosts),
            fake_headers=dict(sorted(foreign.items())),
            reviews={
                "seller": [r.rating for r in chain.query_reviews(seller)],
                **{f"owner{i}": [r.rating for r in chain.query_reviews(o.address)] for i, o in enumerate(self.owner_keys)},
            },
            deposited=list(self.sellers[0].deposited),
            audit_violations=audit,
            violations=[],
            addresses={
                "buyer": buyer.hex(),
                "seller": seller.hex(),
                **{f"owner{i}": o.address.hex() for i, o in enumerate(self.owner_keys)},
            },
        )
        state.violations = check_fairness(self, state)
        return state


def deviating_party(adv: AdversarySpec) -> str:
    if adv.halt:
        return adv.halt[0]
    if adv.reorg is not None or adv.fake_chain or adv.underquote or adv.skip_attestation:
        return "buyer"
    if adv.seller_garbage:
        return "seller"
    if adv.kill_exchange or adv.tamper_enclave or adv.disable_release_gating:
        return "exchange"
    return "network" if adv.drop else "none"


def check_fairness(world: World, state: FinalState) -> list:
    """Evaluate the fairness invariants on a finished run."""
    cfg = world.config
    adv = cfg.adversary
    party, cell = deviating_party(adv), cfg.name
    if adv.halt:
        cell = f"halt {adv.halt[0]}@{adv.halt[1]}"
    out = []

    def flag(invariant, at_step, detail=""):
        out.append(Violation(party, at_step, cfg.seed, invariant, cell, detail))

    buyer = world.buyer
    outcome = buyer.session.outcome
    # obtained => paid
    if state.obtained and not state.seller_paid:
        flag("data-without-payment", 13, "buyer received the full ciphertext without a confirmed payment")
    # paid + honest exchange alive + honest buyer + reliable links => obtained
    honest_alive = any(
        h.alive and i not in adv.tamper_enclave for i, h in enumerate(world.hosts)
    )
    if buyer.behavior.honest and not adv.drop and state.seller_paid and honest_alive and not state.obtained:
        flag("payment-without-data", 13, "confirmed payment but no release")
    for v in state.audit_violations:
        flag("release-gating", 13, v)
    if world.sellers[0].behavior.honest and world.leaks:
        flag("plaintext-leak", 8, world.leaks[0])
    if isinstance(outcome, AbortedAtStep) and outcome.step <= 10 and state.any_seller_payment:
        flag("abort-safety", outcome.step, "buyer paid the seller after aborting")
    for client in [buyer, world.sellers[0]]:
        s = client.session
        if s is not None and s.phases != list(client.steps[: len(s.phases)]):
            flag("step-order", s.phases[-1], f"{client.name} phases {s.phases}")
    if adv.empty and (not isinstance(outcome, Completed) or state.outcomes["seller"] != "Completed"):
        flag("honest-completion", getattr(outcome, "step", 15), f"buyer {outcome}, seller {state.outcomes['seller']}")
    if buyer.session.defrauded:
        flag("defrauded", 13, "released data does not match the sample")
    return out


def run_simulation(config: SimConfig):
    """Run one configured trade; returns (EventTrace, FinalState)."""
    return World(config).run()
