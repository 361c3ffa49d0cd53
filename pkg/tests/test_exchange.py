import random

from hypothesis import given, settings, strategies as st

from fairdex.chain import BlockHeader, NetworkConfig, make_genesis, mine_block
from fairdex.crypto import CHUNK_SIZE, DataKey, decrypt_chunk, decrypt_chunked, encrypt_chunked
from fairdex.exchange import (
    Checkpoint,
    DataReleased,
    EgressAudit,
    EvidenceRejected,
    FeeTooLow,
    HeaderStore,
    IngestResult,
    InvalidEvidence,
    MismatchedTerms,
    SampleSent,
    TradeId,
    TradeParams,
    UnknownId,
    WrongState,
)
from fairdex.spv import PaymentEvidence
from fairdex.wire import DataReleasedMsg, Sample, TradeOpened

from conftest import EASY
from rig import ENDPOINT, Rig

KEY = DataKey(bytes(range(32)))


def seller_file(n_chunks=3, seed=0):
    return random.Random(seed).randbytes(CHUNK_SIZE * (n_chunks - 1) + 1234)


def _deposit(rig, tid, data=None):
    data = data or seller_file()
    chunks = encrypt_chunked(KEY, data, tid.raw)
    return data, chunks, rig.ex.deposit_data(tid, chunks)


class TestHeaderStore:
    def _chain(self, target, n, start=None, ts0=1):
        cfg = NetworkConfig(target=target)
        g = make_genesis(cfg) if start is None else start
        blocks, parent = [], g.header
        for i in range(n):
            blk = mine_block(parent, [], target, ts0 + i)
            blocks.append(blk)
            parent = blk.header
        return g, blocks

    def test_accepts_linked_chain(self):
        g, blocks = self._chain(2**252, 5)
        store = HeaderStore(Checkpoint(0, g.hash), 2**252)
        assert [store.ingest(b.header) for b in blocks] == [IngestResult.ACCEPTED] * 5
        assert store.best_tip() == blocks[-1].header

    def test_difficulty_rejections(self):
        g, blocks = self._chain(2**252, 3)
        store = HeaderStore(Checkpoint(0, g.hash), 2**250)
        assert all(store.ingest(b.header) is IngestResult.REJECTED_DIFFICULTY for b in blocks)
        assert len(store) == 0

    def test_hash_above_target(self):
        g = make_genesis(NetworkConfig(target=2**252))
        n = 0
        while True:
            h = BlockHeader(1, g.hash, b"\x00" * 32, 1, 2**252, n)
            if not h.meets_target():
                break
            n += 1
        store = HeaderStore(Checkpoint(0, g.hash), 2**252)
        assert store.ingest(h) is IngestResult.REJECTED_DIFFICULTY

    def test_linkage_and_checkpoint(self):
        g, blocks = self._chain(EASY, 3)
        store = HeaderStore(Checkpoint(0, g.hash), EASY)
        assert store.ingest(blocks[1].header) is IngestResult.REJECTED_PRE_CHECKPOINT  # parent unknown
        assert store.ingest(g.header) is IngestResult.REJECTED_PRE_CHECKPOINT
        wrong_height = BlockHeader(5, g.hash, b"\x00" * 32, 1, EASY, 0)
        assert store.ingest(wrong_height) is IngestResult.REJECTED_LINKAGE
        assert len(store) == 0

    def test_fifo_eviction(self):
        g, blocks = self._chain(EASY, 10)
        store = HeaderStore(Checkpoint(0, g.hash), EASY, capacity=4)
        for b in blocks:
            store.ingest(b.header)
        assert len(store) == 4
        assert [h.height for h in store.headers()] == [7, 8, 9, 10]
        assert store.best_tip().height == 10
        assert store.best_chain_header(6) is None and store.best_chain_header(7) is not None

    def test_forged_header_leaves_store_unchanged(self):
        g, blocks = self._chain(2**250, 4)
        store = HeaderStore(Checkpoint(0, g.hash), 2**250)
        for b in blocks:
            store.ingest(b.header)
        before = (store.headers(), store.best_tip())
        h = blocks[-1].header
        forged = [
            BlockHeader(h.height + 1, b"\x01" * 32, h.merkle_root, h.timestamp, h.target, 0),
            BlockHeader(h.height + 1, h.hash, h.merkle_root, h.timestamp, 2**255, 0),
            BlockHeader(h.height + 2, h.hash, h.merkle_root, h.timestamp, h.target, h.nonce),
        ]
        for f in forged:
            assert store.ingest(f) is not IngestResult.ACCEPTED
        assert (store.headers(), store.best_tip()) == before

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32), st.integers(2, 30))
    def test_best_tip_matches_brute_force(self, seed, capacity):
        rng = random.Random(seed)
        g = make_genesis(NetworkConfig(target=EASY))
        store = HeaderStore(Checkpoint(0, g.hash), EASY, capacity)
        produced = [g.header]
        for i in range(40):
            parent = rng.choice(produced[-5:])
            h = mine_block(parent, [], EASY, parent.timestamp + rng.randrange(1, 3)).header
            if store.ingest(h) is IngestResult.ACCEPTED:
                produced.append(h)
        stored = store.headers()
        assert len(stored) <= capacity
        best = max(stored, key=lambda h: (store.work_of(h.hash), -stored.index(h)))
        assert store.work_of(store.best_tip().hash) == store.work_of(best.hash)
        # every stored header reaches a stored parent or was anchored when it arrived
        for h in stored:
            assert h.prev_hash == g.hash or h.prev_hash in store or h.prev_hash in store.evicted


class TestOpenTrade:
    def test_confirmed_fee_opens_trade(self):
        rig = Rig(k=2)
        tid = rig.open_trade()
        assert len(tid.hex) == 32
        endpoint, msg = rig.outbox.sent[-1]
        assert endpoint == ENDPOINT and isinstance(msg, TradeOpened) and msg.trade_id == tid.raw

    def test_depth_k_minus_one(self):
        rig = Rig(k=3)
        fee = rig.pay(rig.buyer, rig.owner.address, 10)
        rig.mine(n=2)
        res = rig.ex.open_trade(rig.evidence(fee), 100, rig.buyer.address, rig.seller.address, ENDPOINT)
        assert res == InvalidEvidence("InsufficientConfirmations")

    def test_wrong_recipient(self):
        rig = Rig(k=1)
        fee = rig.pay(rig.buyer, rig.keys[3].address, 10)
        rig.mine()
        res = rig.ex.open_trade(rig.evidence(fee), 100, rig.buyer.address, rig.seller.address, ENDPOINT)
        assert res == InvalidEvidence("WrongRecipient")

    def test_fee_too_low(self):
        rig = Rig(k=1, fee=10)
        fee = rig.pay(rig.buyer, rig.owner.address, 9)
        rig.mine()
        res = rig.ex.open_trade(rig.evidence(fee), 100, rig.buyer.address, rig.seller.address, ENDPOINT)
        assert res == FeeTooLow(9, 10)

    def test_fee_deposit_cannot_be_reused(self):
        rig = Rig(k=1)
        fee = rig.pay(rig.buyer, rig.owner.address, 10)
        rig.mine()
        ev = rig.evidence(fee)
        rig.ex.open_trade(ev, 100, rig.buyer.address, rig.seller.address, ENDPOINT)
        assert rig.ex.open_trade(ev, 100, rig.buyer.address, rig.seller.address, ENDPOINT) == InvalidEvidence(
            "DepositAlreadyUsed"
        )


class TestTradeFlow:
    def test_params_echo(self):
        rig = Rig()
        tid = rig.open_trade(price=123)
        assert rig.ex.get_trade_params(tid) == TradeParams(tid, 123, rig.buyer.address, rig.seller.address)
        assert rig.ex.get_trade_params(TradeId(bytes(16))) == UnknownId(TradeId(bytes(16)))

    def test_deposit_sends_only_sample(self):
        rig = Rig()
        tid = rig.open_trade()
        data, chunks, res = _deposit(rig, tid)
        assert isinstance(res, SampleSent) and res.chunk == chunks[0]
        endpoint, msg = rig.outbox.sent[-1]
        assert isinstance(msg, Sample) and [c.index for c in msg.chunks] == [0]
        assert decrypt_chunk(KEY, msg.chunks[0], tid.raw) == data[:CHUNK_SIZE]
        assert rig.ex.retained_chunks == 3
        assert isinstance(rig.ex.deposit_data(tid, chunks), WrongState)

    def test_release_on_valid_payment(self):
        rig = Rig(k=2)
        tid = rig.open_trade(price=100)
        data, chunks, _ = _deposit(rig, tid)
        pay = rig.pay(rig.buyer, rig.seller.address, 100)
        ev = rig.evidence(pay)
        assert rig.ex.submit_payment_evidence(tid, ev) == EvidenceRejected("InsufficientConfirmations")
        rig.mine(n=2)
        res = rig.ex.submit_payment_evidence(tid, ev)
        assert isinstance(res, DataReleased)
        endpoint, msg = rig.outbox.sent[-1]
        assert isinstance(msg, DataReleasedMsg)
        assert decrypt_chunked(KEY, list(msg.chunks), tid.raw) == data
        assert isinstance(rig.ex.submit_payment_evidence(tid, ev), WrongState)

    def test_underpayment(self):
        rig = Rig(k=1)
        tid = rig.open_trade(price=100)
        _deposit(rig, tid)
        pay = rig.pay(rig.buyer, rig.seller.address, 99)
        rig.mine()
        assert isinstance(rig.ex.submit_payment_evidence(tid, rig.evidence(pay)), MismatchedTerms)

    def test_wrong_payee_and_payer(self):
        rig = Rig(k=1)
        tid = rig.open_trade(price=100)
        _deposit(rig, tid)
        p1 = rig.pay(rig.buyer, rig.keys[3].address, 100)
        p2 = rig.pay(rig.keys[3], rig.seller.address, 100)
        rig.mine()
        assert isinstance(rig.ex.submit_payment_evidence(tid, rig.evidence(p1)), MismatchedTerms)
        assert isinstance(rig.ex.submit_payment_evidence(tid, rig.evidence(p2)), MismatchedTerms)

    def test_overpayment_allowed(self):
        rig = Rig(k=1)
        tid = rig.open_trade(price=100)
        _deposit(rig, tid)
        pay = rig.pay(rig.buyer, rig.seller.address, 150)
        rig.mine()
        assert isinstance(rig.ex.submit_payment_evidence(tid, rig.evidence(pay)), DataReleased)

    def test_evidence_before_deposit_is_wrong_state(self):
        rig = Rig(k=1)
        tid = rig.open_trade()
        pay = rig.pay(rig.buyer, rig.seller.address, 100)
        rig.mine()
        assert isinstance(rig.ex.submit_payment_evidence(tid, rig.evidence(pay)), WrongState)

    def test_payment_evidence_cannot_unlock_two_trades(self):
        rig = Rig(k=1)
        t1 = rig.open_trade(price=100)
        t2 = rig.open_trade(price=100)
        _deposit(rig, t1)
        _deposit(rig, t2)
        pay = rig.pay(rig.buyer, rig.seller.address, 100)
        rig.mine()
        ev = rig.evidence(pay)
        assert isinstance(rig.ex.submit_payment_evidence(t1, ev), DataReleased)
        assert rig.ex.submit_payment_evidence(t2, ev) == EvidenceRejected("PaymentAlreadyUsed")

    def test_reorged_payment_is_rejected(self):
        rig = Rig(k=3)
        tid = rig.open_trade(price=100)
        _deposit(rig, tid)
        fork = rig.chain.tip.header
        pay = rig.pay(rig.buyer, rig.seller.address, 100)
        rig.mine(n=1)
        ev = rig.evidence(pay)
        # heavier branch from the fork point without the payment
        parent = fork
        for i in range(4):
            blk = mine_block(parent, [], rig.cfg.target, parent.timestamp + 1)
            rig.chain.add_block(blk)
            parent = blk.header
        rig.sync()
        rig.mine(n=3)
        assert rig.ex.submit_payment_evidence(tid, ev) == EvidenceRejected("UnknownBlock")


class TestGarbageCollection:
    def test_fresh_table(self):
        assert Rig().ex.gc(10**9) == 0

    def test_timeout(self):
        rig = Rig(timeout=600)
        tid = rig.open_trade()
        assert rig.ex.gc(rig.t) == 0
        assert rig.ex.gc(10 + 600 + 1) == 1
        assert rig.ex.get_trade_params(tid) == UnknownId(tid)

    def test_released_swept_and_memory_freed(self):
        rig = Rig(k=1)
        tid = rig.open_trade()
        _deposit(rig, tid)
        pay = rig.pay(rig.buyer, rig.seller.address, 100)
        rig.mine()
        rig.ex.submit_payment_evidence(tid, rig.evidence(pay))
        assert rig.ex.retained_chunks == 3
        assert rig.ex.gc(rig.t) == 1
        assert rig.ex.retained_chunks == 0
        assert rig.ex.table_summary() == []

    def test_automatic_sweep_every_tenth_header(self):
        rig = Rig(k=1, timeout=30)
        tid = rig.open_trade()
        rig.mine(n=12)
        assert rig.ex.get_trade_params(tid) == UnknownId(tid)


class TestAudit:
    def _run(self, gating):
        rig = Rig(k=1, release_gating=gating)
        audit = EgressAudit()
        rig.outbox = audit.record
        # rebind egress through the audit
        from fairdex.exchange import TrustedExchange

        rig.ex = TrustedExchange(rig.ex_cfg, rig.cpu, egress=audit.record, rng=random.Random(1), release_gating=gating)
        rig.fed.clear()
        rig.sync()

        def call(op, *args):
            c = audit.begin(op)
            res = getattr(rig.ex, op)(*args)
            audit.end(c, res)
            return res

        fee = rig.pay(rig.buyer, rig.owner.address, 10)
        rig.mine()
        tid = call("open_trade", rig.evidence(fee), 100, rig.buyer.address, rig.seller.address, ENDPOINT).trade_id
        call("deposit_data", tid, encrypt_chunked(KEY, seller_file(), tid.raw))
        return rig, audit, call, tid, fee

    def test_honest_release_passes_audit(self):
        rig, audit, call, tid, _ = self._run(True)
        pay = rig.pay(rig.buyer, rig.seller.address, 100)
        rig.mine()
        assert isinstance(call("submit_payment_evidence", tid, rig.evidence(pay)), DataReleased)
        assert audit.violations() == []

    def test_disabled_gating_releases_on_bogus_evidence(self):
        rig, audit, call, tid, fee = self._run(False)
        res = call("submit_payment_evidence", tid, rig.evidence(fee))
        assert isinstance(res, DataReleased)  # the buyer never paid the seller

    def test_leak_outside_release_is_flagged(self):
        audit = EgressAudit()
        c = audit.begin("deposit_data")
        chunks = encrypt_chunked(KEY, seller_file(), bytes(16))
        audit.record(ENDPOINT, Sample(bytes(16), tuple(chunks)))
        audit.end(c, None)
        assert len(audit.violations()) == 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["open", "deposit", "pay", "evidence", "gc", "mine", "junk"]), max_size=25), st.integers(0, 99))
def test_random_request_sequences_respect_state_machine(ops, seed):
    rig = Rig(k=1, timeout=40, seed=seed)
    rng = random.Random(seed)
    trades, pays = [], []
    for op in ops:
        if op == "open":
            trades.append(rig.open_trade(price=50))
        elif op == "deposit" and trades:
            t = rng.choice(trades)
            rig.ex.deposit_data(t, encrypt_chunked(KEY, b"data" * 10, t.raw))
        elif op == "pay":
            pays.append(rig.pay(rig.buyer, rig.seller.address, 50))
        elif op == "evidence" and trades and pays:
            rig.ex.submit_payment_evidence(rng.choice(trades), rig.evidence(rng.choice(pays)))
        elif op == "gc":
            rig.ex.gc(rig.t)
        elif op == "mine":
            rig.mine()
        elif op == "junk" and trades:
            rig.ex.submit_payment_evidence(rng.choice(trades), PaymentEvidence(pays[0].__class__(b"\0" * 20, b"\0" * 20, 1, 0), (), 0, 1, b"\0" * 32)) if pays else None
    # illegal transitions raise inside the enclave, so reaching here is the property
    for row in rig.ex.table_summary():
        assert row["state"] in {"OPENED", "DATA_DEPOSITED", "RELEASED"}


def test_trade_id_uniqueness_over_many_trades():
    from fairdex.attestation import SimulatedCPU
    from fairdex.chain import PaymentTransaction, merkle_paths
    from fairdex.exchange import ExchangeConfig, Opened, TrustedExchange

    n = 100_000
    cfg = NetworkConfig(target=EASY)
    g = make_genesis(cfg)
    owner, buyer, seller = b"\x01" * 20, b"\x02" * 20, b"\x03" * 20
    txs = [PaymentTransaction(buyer, owner, 10, i) for i in range(n)]
    blk = mine_block(g.header, txs, EASY, 1)
    ex = TrustedExchange(
        ExchangeConfig(0, g.hash, EASY, owner, cfg.config_hash, confirm_depth=0, trade_timeout=10**9),
        SimulatedCPU(),
        egress=lambda *a: None,
    )
    assert ex.ingest_header(blk.header) is IngestResult.ACCEPTED
    paths = merkle_paths([t.tx_hash for t in txs])
    ids = set()
    for i, tx in enumerate(txs):
        path = paths[i]
        res = ex.open_trade(PaymentEvidence(tx, tuple(path), i, 1, blk.hash), 5, buyer, seller, ENDPOINT)
        assert isinstance(res, Opened)
        ids.add(res.trade_id)
    assert len(ids) == n
