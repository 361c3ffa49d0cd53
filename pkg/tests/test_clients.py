
import pytest
from hypothesis import given, settings, strategies as st

from fairdex.chain import ChainState, PaymentTransaction, Rejection, mine_block
from fairdex.clients import (
    AbortedAtStep,
    Completed,
    DataItem,
    DataSpec,
    DemandBroadcast,
    NoCandidate,
    Role,
    SellerPolicy,
    SellerReply,
    TradeSession,
    broadcast_demand,
    mean_rating,
    post_review,
    select_seller,
)
from fairdex.scenarios import load_scenario, run_scenario
from fairdex.sim import SimConfig, World

from conftest import make_network

WEATHER = DataSpec(frozenset({"weather"}), 10, 1000)


def item(name, tags, size):
    return DataItem(name, frozenset(tags), bytes(size))


def seller(i, policy):
    return (bytes([i]) * 20, f"10.0.3.{i}:9000", policy)


def submit_to(chain):
    def submit(tx):
        block = mine_block(chain.tip.header, [tx], chain.config.target, chain.tip.header.timestamp + 10)
        return chain.add_block(block)

    return submit


class TestDemand:
    def test_no_sellers(self):
        assert broadcast_demand("10.0.2.1:9000", WEATHER, 100, []) == set()

    def test_two_of_three_match(self):
        sellers = [
            seller(1, SellerPolicy([item("a", {"weather", "csv"}, 100)], 50)),
            seller(2, SellerPolicy([item("b", {"traffic"}, 100)], 50)),
            seller(3, SellerPolicy([item("c", {"weather"}, 500)], 90)),
        ]
        replies = broadcast_demand("10.0.2.1:9000", WEATHER, 100, sellers)
        assert {r.seller for r in replies} == {bytes([1]) * 20, bytes([3]) * 20}

    def test_price_below_every_minimum(self):
        sellers = [seller(i, SellerPolicy([item("a", {"weather"}, 100)], 200 + i)) for i in range(1, 4)]
        assert broadcast_demand("10.0.2.1:9000", WEATHER, 100, sellers) == set()

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.lists(st.sampled_from(["weather", "traffic", "csv"]), max_size=3),
                st.integers(0, 2000),
                st.integers(1, 200),
            ),
            max_size=6,
        ),
        st.integers(1, 200),
    )
    def test_matches_brute_force(self, offers, price):
        sellers = [seller(i + 1, SellerPolicy([item("x", tags, size)], lo)) for i, (tags, size, lo) in enumerate(offers)]
        expected = {
            bytes([i + 1]) * 20
            for i, (tags, size, lo) in enumerate(offers)
            if "weather" in tags and 10 <= size <= 1000 and price >= lo
        }
        assert {r.seller for r in broadcast_demand("10.0.2.1:9000", WEATHER, price, sellers)} == expected

    @pytest.mark.parametrize("price, endpoint", [(0, "10.0.2.1:9000"), (-5, "10.0.2.1:9000"), (10, "nowhere"), (10, "h:99999")])
    def test_invalid_demand(self, price, endpoint):
        with pytest.raises(ValueError):
            DemandBroadcast(WEATHER, price, endpoint)

    def test_demand_message_round_trip(self):
        d = DemandBroadcast(WEATHER, 77, "10.0.2.1:9000")
        assert DemandBroadcast.from_message(d.to_message()) == d


class TestSelection:
    def setup_method(self):
        cfg, self.keys = make_network(n=6)
        self.chain = ChainState(cfg)
        self.submit = submit_to(self.chain)

    def review(self, author, subject, rating):
        assert self.submit(PaymentTransaction.create(author, subject.address, 1, self.chain.next_nonce(author.address))) is None
        return self.submit(post_review(author, subject.address, rating, "ok", lambda tx: None))

    def test_single_reply(self):
        r = SellerReply(self.keys[1].address, "10.0.3.1:9000")
        assert select_seller([r], self.chain) == r

    def test_highest_mean_rating_wins(self):
        a, b = self.keys[1], self.keys[2]
        assert self.review(self.keys[3], a, 5) is None
        assert self.review(self.keys[4], a, 4) is None
        assert self.review(self.keys[5], b, 3) is None
        assert mean_rating(self.chain, a.address) == 4.5
        assert mean_rating(self.chain, b.address) == 3.0
        replies = [SellerReply(b.address, "10.0.3.2:9000"), SellerReply(a.address, "10.0.3.1:9000")]
        assert select_seller(replies, self.chain).seller == a.address

    def test_tie_goes_to_smaller_address(self):
        replies = [SellerReply(k.address, f"10.0.3.{i}:9000") for i, k in enumerate(self.keys[:3])]
        assert select_seller(replies, self.chain).seller == min(k.address for k in self.keys[:3])

    def test_empty(self):
        assert select_seller([], self.chain) == NoCandidate()

    def test_review_after_payment_visible(self):
        assert self.review(self.keys[0], self.keys[1], 5) is None
        assert [r.rating for r in self.chain.query_reviews(self.keys[1].address)] == [5]

    def test_review_without_payment_rejected(self):
        tx = post_review(self.keys[0], self.keys[1].address, 5, "never traded", self.submit)
        assert self.chain.find_transaction(tx.tx_hash) is None
        assert self.chain.query_reviews(self.keys[1].address) == []
        bad = mine_block(self.chain.tip.header, [tx], self.chain.config.target, 99)
        assert self.chain.add_block(bad) is Rejection.UNAUTHORIZED_REVIEW

    def test_review_of_exchange_owner_after_fee(self):
        owner = self.keys[2]
        assert self.submit(PaymentTransaction.create(self.keys[0], owner.address, 10, 0)) is None
        assert self.submit(post_review(self.keys[0], owner.address, 4, "fast", lambda tx: None)) is None
        assert [r.rating for r in self.chain.query_reviews(owner.address)] == [4]


class TestSession:
    def test_phases_strictly_increase(self):
        s = TradeSession(Role.BUYER, ["ex0"])
        for step in (1, 2, 3):
            s.advance(step)
        with pytest.raises(RuntimeError):
            s.advance(3)
        with pytest.raises(RuntimeError):
            s.advance(2)
        assert s.phase == 3

    def test_abort_is_terminal(self):
        s = TradeSession(Role.SELLER, ["ex0"])
        s.advance(6)
        s.abort(7, "mismatch")
        s.complete()
        assert s.outcome == AbortedAtStep(7, "mismatch") and str(s.outcome) == "AbortedAtStep(7)"
        with pytest.raises(RuntimeError):
            s.advance(8)

    def test_review_step_after_completion(self):
        s = TradeSession(Role.BUYER, ["ex0"])
        s.advance(13)
        s.complete()
        s.advance(14)
        assert s.outcome == Completed() and s.phases == [13, 14]


def _run(name, seed=0, **over):
    sc = load_scenario(name, seed)
    for k, v in over.items():
        setattr(sc.config, k, v)
    world = World(sc.config)
    _, state = world.run()
    return world, state


class TestTradeFlows:
    def test_honest_buyer_completes_and_reviews(self):
        world, state = _run("honest-trade")
        assert state.outcomes == {"buyer": "Completed", "seller": "Completed"}
        assert state.reviews["seller"] and state.reviews["owner0"]
        assert world.buyer.data == world.file

    def test_garbage_seller_costs_only_the_fee(self):
        world, state = _run("mismatched-data")
        assert state.outcomes["buyer"] == "AbortedAtStep(10)"
        assert state.balance_delta("buyer") == -10
        assert not state.any_seller_payment

    def test_two_of_three_exchanges_crash_after_payment(self):
        world, state = _run("exchange-kill")
        assert state.outcomes["buyer"] == "Completed" and state.data_matches
        assert state.exchange_alive == {"ex0": True, "ex1": False, "ex2": False}

    @pytest.mark.parametrize("n", [1, 2, 3, 5])
    def test_seller_deposits_at_every_exchange(self, n):
        cfg = SimConfig(seed=n, exchanges=n)
        world = World(cfg)
        _, state = world.run()
        assert sorted(state.deposited) == [f"ex{i}" for i in range(n)]
        assert state.balance_delta("buyer") == -(100 + 10 * n)

    def test_seller_rejects_underquoted_trade(self):
        world, state = _run("underquote")
        assert state.outcomes["seller"] == "AbortedAtStep(7)"
        assert state.deposited == [] and not state.obtained

    def test_seller_rejects_tampered_enclave(self):
        world, state = _run("tampered-enclave-collusion")
        assert state.outcomes["seller"] == "AbortedAtStep(6)"
        assert state.deposited == []

    def test_honest_buyer_rejects_tampered_enclave(self):
        world, state = _run("tampered-enclave")
        assert state.outcomes["buyer"] == "AbortedAtStep(1)"
        assert state.balance_delta("buyer") == 0

    @pytest.mark.parametrize("seed", range(3))
    def test_scenarios_pass_across_seeds(self, seed):
        for name in ("honest-trade", "refuse-to-pay", "double-spend"):
            assert run_scenario(load_scenario(name, seed)).ok, name
