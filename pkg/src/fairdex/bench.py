"""Throughput, validation latency and enclave response measurements.

Chain metrics run in simulated time: transactions arrive as a Poisson stream
at the offered load, a block is mined every ``block_interval`` simulated
seconds with at most ``max_block_txs`` transactions taken FIFO from the
mempool, and every block goes through full validation (signatures, nonces,
balances, Merkle root). Enclave metrics are wall-clock timings of serialized
``open_trade`` requests.
"""

from __future__ import annotations

import random
import statistics
import time
from collections import deque
from dataclasses import asdict, dataclass, field

from .attestation import SimulatedCPU
from .chain import (
    MAX_TARGET,
    Allocation,
    ChainState,
    NetworkConfig,
    PaymentTransaction,
    make_genesis,
    merkle_paths,
    mine_block,
)
from .crypto import KeyPair, sha256
from .exchange import ExchangeConfig, Opened, TrustedExchange
from .spv import PaymentEvidence

SCHEMA = "fairdex-metrics/1"
UNITS = {
    "offered_load": "transactions per simulated second",
    "tx_throughput": "validated transactions per simulated second",
    "validation_latency": "simulated seconds from arrival to inclusion in a block",
    "enclave_response": "wall-clock milliseconds per request",
}


@dataclass(frozen=True)
class ChainBenchConfig:
    block_interval: int = 1
    max_block_txs: int = 300
    senders: int = 64
    seed: int = 0

    @property
    def capacity(self) -> float:
        return self.max_block_txs / self.block_interval


@dataclass
class LoadPoint:
    offered_load: float
    throughput: float
    latency_min: float
    latency_avg: float
    latency_max: float
    included: int
    repeats: int


@dataclass
class EnclaveTiming:
    requests: int
    min_ms: float
    avg_ms: float
    max_ms: float


@dataclass
class MetricsReport:
    duration: float
    repeat: int
    chain: ChainBenchConfig
    points: list = field(default_factory=list)
    enclave: EnclaveTiming = None

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "units": UNITS,
            "chain": {**asdict(self.chain), "capacity_tps": self.chain.capacity, "duration_s": self.duration, "repeat": self.repeat},
            "tx_throughput": [{"offered_load": p.offered_load, "throughput": p.throughput} for p in self.points],
            "validation_latency": [
                {
                    "offered_load": p.offered_load,
                    "min": p.latency_min,
                    "avg": p.latency_avg,
                    "max": p.latency_max,
                    "included": p.included,
                }
                for p in self.points
            ],
            "enclave_response": asdict(self.enclave) if self.enclave else None,
        }


class _Pool:
    """Pre-signed payments, grown on demand and reused by every repetition."""

    def __init__(self, cfg: ChainBenchConfig):
        rng = random.Random(f"bench/{cfg.seed}")
        self.keys = [KeyPair.from_seed(rng.randbytes(32)) for _ in range(cfg.senders)]
        self.sink = [sha256(b"sink%d" % i)[:20] for i in range(8)]
        self.txs: list = []

    def take(self, n: int) -> list:
        while len(self.txs) < n:
            i = len(self.txs)
            k = self.keys[i % len(self.keys)]
            self.txs.append(PaymentTransaction.create(k, self.sink[i % len(self.sink)], 1, i // len(self.keys)))
        return self.txs[:n]

    def network(self, cfg: ChainBenchConfig) -> NetworkConfig:
        return NetworkConfig(
            target=MAX_TARGET,
            allocations=[Allocation(k.address, 10**12, k.public_key) for k in self.keys],
            block_interval=cfg.block_interval,
            max_block_txs=cfg.max_block_txs,
        )


def _arrivals(rng: random.Random, load: float, duration: float) -> list:
    times, t = [], 0.0
    while True:
        t += rng.expovariate(load)
        if t >= duration:
            return times
        times.append(t)


def measure_load(load: float, duration: float, repeat: int, cfg: ChainBenchConfig = ChainBenchConfig(), pool=None) -> LoadPoint:
    if load <= 0 or duration <= 0 or repeat < 1:
        raise ValueError("load, duration and repeat must be positive")
    pool = pool or _Pool(cfg)
    net = pool.network(cfg)
    thr, lmin, lavg, lmax, included = [], [], [], [], 0
    for rep in range(repeat):
        rng = random.Random(f"bench/{cfg.seed}/{load}/{rep}")
        times = _arrivals(rng, load, duration)
        txs = pool.take(len(times))
        chain = ChainState(net)
        queue: deque = deque()
        nxt = 0
        lat = []
        n_blocks = int(duration // cfg.block_interval)
        for b in range(1, n_blocks + 1):
            now = b * cfg.block_interval
            while nxt < len(times) and times[nxt] <= now:
                queue.append((times[nxt], txs[nxt]))
                nxt += 1
            batch = [queue.popleft() for _ in range(min(cfg.max_block_txs, len(queue)))]
            chain.mine([tx for _, tx in batch], now)
            lat.extend(now - t for t, _ in batch)
        thr.append(len(lat) / duration)
        included += len(lat)
        if lat:
            lmin.append(min(lat))
            lavg.append(statistics.fmean(lat))
            lmax.append(max(lat))
    mean = lambda xs: statistics.fmean(xs) if xs else 0.0  # noqa: E731
    return LoadPoint(load, mean(thr), mean(lmin), mean(lavg), mean(lmax), included, repeat)


def measure_enclave(requests: int = 1000, seed: int = 0) -> EnclaveTiming:
    """Wall-clock time of ``requests`` open_trade calls, each with a distinct confirmed fee deposit."""
    if requests < 1:
        raise ValueError("need at least one request")
    net = NetworkConfig(target=MAX_TARGET)
    genesis = make_genesis(net)
    owner, buyer, seller = sha256(b"owner")[:20], sha256(b"buyer")[:20], sha256(b"seller")[:20]
    # the enclave checks inclusion, not signatures, so unsigned deposits are enough here
    fees = [PaymentTransaction(buyer, owner, 10, i) for i in range(requests)]
    block = mine_block(genesis.header, fees, net.target, 1)
    confirm = mine_block(block.header, [], net.target, 2)
    xcfg = ExchangeConfig(0, genesis.hash, net.target, owner, net.config_hash, confirm_depth=1, trade_timeout=10**9)
    enclave = TrustedExchange(xcfg, SimulatedCPU(), egress=lambda *_: None, rng=random.Random(seed))
    enclave.ingest_header(block.header)
    enclave.ingest_header(confirm.header)
    paths = merkle_paths([t.tx_hash for t in fees])
    evidence = [PaymentEvidence(t, tuple(paths[i]), i, 1, block.hash) for i, t in enumerate(fees)]
    samples = []
    for ev in evidence:
        t0 = time.perf_counter()
        result = enclave.open_trade(ev, 100, buyer, seller, "10.0.2.1:9000")
        samples.append((time.perf_counter() - t0) * 1000.0)
        if not isinstance(result, Opened):
            raise RuntimeError(f"benchmark request failed: {result}")
    return EnclaveTiming(requests, min(samples), statistics.fmean(samples), max(samples))


def run_bench(
    loads, duration: float = 60.0, repeat: int = 100, enclave_requests: int = 1000, cfg: ChainBenchConfig = ChainBenchConfig()
) -> MetricsReport:
    pool = _Pool(cfg)
    report = MetricsReport(duration, repeat, cfg)
    for load in loads:
        report.points.append(measure_load(float(load), duration, repeat, cfg, pool))
    if enclave_requests:
        report.enclave = measure_enclave(enclave_requests, cfg.seed)
    return report
