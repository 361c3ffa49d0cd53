import json

import pytest

from fairdex.sim import (
    AdversarySpec,
    ConfigError,
    DelayModel,
    EventTrace,
    SimConfig,
    Simulator,
    TraceRecord,
    World,
    run_simulation,
)
from fairdex.wire import TxMsg


class Sink:
    def __init__(self, sim):
        self.sim, self.got = sim, []

    def on_message(self, src, msg):
        self.got.append((self.sim.now_ms, src, msg))


def pair(delay, seed=0, drops=()):
    sim = Simulator(seed, delay, drops)
    sink = Sink(sim)
    sim.register("10.0.0.9:1", "sink", sink)
    return sim, sink


class TestScheduler:
    def test_same_time_sends_keep_order(self):
        sim, sink = pair(DelayModel("fixed", fixed=10))
        sim.advance_time(5)
        sim.send("10.0.0.8:1", "10.0.0.9:1", TxMsg(b"first"))
        sim.send("10.0.0.8:1", "10.0.0.9:1", TxMsg(b"second"))
        sim.run()
        assert [m.tx for _, _, m in sink.got] == [b"first", b"second"]
        assert [t for t, _, _ in sink.got] == [15, 15]

    def test_fixed_delay(self):
        sim, sink = pair(DelayModel("fixed", fixed=10))
        sim.advance_time(123)
        sim.send("a:1", "10.0.0.9:1", TxMsg(b"x"))
        assert sim.pending == 1
        sim.advance_time(132)
        assert sink.got == []
        sim.advance_time(133)
        assert sink.got[0][0] == 133 and sink.got[0][2] == TxMsg(b"x")

    def test_uniform_delay_bounded_and_reproducible(self):
        def times(seed):
            sim, sink = pair(DelayModel("uniform", low=5, high=15), seed)
            for i in range(200):
                sim.send(f"10.0.5.{i}:1", "10.0.0.9:1", TxMsg(bytes([i])))
            sim.run()
            return [(t, m.tx) for t, _, m in sink.got]

        a = times(3)
        assert all(5 <= t <= 15 for t, _ in a)
        assert a == times(3) and a != times(4)

    def test_link_is_fifo_under_random_delay(self):
        sim, sink = pair(DelayModel("uniform", low=1, high=500))
        for i in range(100):
            sim.send("a:1", "10.0.0.9:1", TxMsg(i.to_bytes(2, "big")))
        sim.run()
        assert [int.from_bytes(m.tx, "big") for _, _, m in sink.got] == list(range(100))

    def test_events_fire_in_time_then_insertion_order(self):
        sim = Simulator(0)
        fired = []
        sim.schedule(20, lambda: fired.append("late"))
        sim.schedule(10, lambda: fired.append("a"))
        sim.schedule(10, lambda: fired.append("b"))
        assert sim.next_event() and sim.now_ms == 10
        sim.run()
        assert fired == ["a", "b", "late"] and not sim.next_event()
        with pytest.raises(ValueError):
            sim.schedule(-1, lambda: None)

    def test_advance_time_moves_clock_without_events(self):
        sim = Simulator(0)
        sim.advance_time(500)
        assert sim.now_ms == 500

    def test_drop_probability_one(self):
        sim, sink = pair(DelayModel("fixed", fixed=1), drops=[("TX", 1.0)])
        sim.send("a:1", "10.0.0.9:1", TxMsg(b"gone"))
        sim.run()
        assert sink.got == [] and [r.event_kind for r in sim.trace] == ["drop"]

    def test_trace_records_frame_digests(self):
        sim, sink = pair(DelayModel("fixed", fixed=1))
        sim.send("a:1", "10.0.0.9:1", TxMsg(b"x"))
        sim.run()
        send, deliver = list(sim.trace)
        assert send.payload_digest == deliver.payload_digest and (send.sim_time, deliver.sim_time) == (0, 1)


class TestTrace:
    def test_same_seed_identical(self):
        a, _ = run_simulation(SimConfig(seed=11))
        b, _ = run_simulation(SimConfig(seed=11))
        assert a.to_jsonl() == b.to_jsonl()

    def test_different_seed_differs(self):
        a, _ = run_simulation(SimConfig(seed=1))
        b, _ = run_simulation(SimConfig(seed=2))
        assert a.digest() != b.digest()

    def test_jsonl_round_trip(self, tmp_path):
        trace, _ = run_simulation(SimConfig(seed=5))
        path = tmp_path / "t.jsonl"
        trace.write(path)
        text = path.read_text()
        assert EventTrace.from_jsonl(text).to_jsonl() == text
        first = json.loads(text.splitlines()[0])
        assert set(first) == {"sim_time", "actor", "event_kind", "payload_digest", "detail"}

    def test_records_are_time_ordered(self):
        trace, _ = run_simulation(SimConfig(seed=9, delay=DelayModel("uniform", low=1, high=900)))
        times = [r.sim_time for r in trace]
        assert times == sorted(times)
        assert isinstance(next(iter(trace)), TraceRecord)


class TestConfig:
    def test_round_trip(self):
        cfg = SimConfig(
            seed=4,
            exchanges=3,
            delay=DelayModel("fixed", fixed=25),
            adversary=AdversarySpec(halt=("seller", 7), kill_exchange=((1, 11),), drop=(("SAMPLE", 0.5),)),
        )
        assert SimConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    @pytest.mark.parametrize(
        "body",
        [
            {"exchanges": 0},
            {"exchanges": 6},
            {"bogus": 1},
            {"adversary": {"halt": ["mallory", 3]}},
            {"adversary": {"halt": ["buyer", 16]}},
            {"adversary": {"kill_exchange": [[4, 11]]}},
            {"adversary": {"drop": [["NOPE", 0.5]]}},
            {"adversary": {"drop": [["TX", 1.5]]}},
            {"adversary": {"unknown": True}},
            {"delay": {"uniform": [50, 5]}},
            {"delay": {"fixed": -1}},
            {"price": 0},
        ],
    )
    def test_invalid(self, body):
        with pytest.raises(ConfigError):
            SimConfig.from_dict(body).validate()


class TestRuns:
    def test_honest(self):
        trace, state = run_simulation(SimConfig(seed=0))
        assert state.outcomes == {"buyer": "Completed", "seller": "Completed"}
        assert state.data_matches and state.seller_paid and not state.violations
        assert state.phases["buyer"] == [1, 2, 3, 4, 5, 9, 10, 11, 12, 13, 14]
        assert state.phases["seller"] == [6, 7, 8]

    def test_buyer_halts_at_payment(self):
        world = World(SimConfig(seed=0, adversary=AdversarySpec(halt=("buyer", 11))))
        _, state = world.run()
        assert state.outcomes["buyer"] == "AbortedAtStep(11)"
        assert not state.seller_paid and not state.obtained
        assert state.balance_delta("seller") == 0
        # the buyer saw the sample and nothing else
        assert list(world.buyer._samples.values()) == [world.file[: 64 * 1024]]
        assert world.releases_to_buyer == []

    @pytest.mark.parametrize("seed", range(5))
    def test_completion_within_k_plus_four_blocks_of_payment(self, seed):
        cfg = SimConfig(seed=seed)
        trace, state = run_simulation(cfg)
        recs = list(trace)
        paid_at = next(r.sim_time for r in recs if r.actor == "buyer" and r.event_kind == "phase" and r.detail == "11")
        done_at = next(r.sim_time for r in recs if r.actor == "buyer" and r.event_kind == "outcome")
        blocks = sum(1 for r in recs if r.event_kind == "block" and paid_at <= r.sim_time <= done_at)
        assert state.outcomes["buyer"] == "Completed"
        assert blocks <= cfg.confirm_depth + 4

    def test_fake_chain_headers_all_rejected(self):
        _, state = run_simulation(SimConfig(seed=1, adversary=AdversarySpec(fake_chain=(256, 20))))
        assert state.fake_headers == {"RejectedDifficulty": 20}
        assert not state.obtained and not state.violations

    def test_reorg_never_releases(self):
        world = World(SimConfig(seed=2, adversary=AdversarySpec(reorg=(None, None))))
        trace, state = world.run()
        assert any(r.event_kind == "reorg" for r in trace)
        assert state.released == 0 and not state.obtained and not state.seller_paid

    def test_lossy_links_keep_invariants(self):
        for seed in range(5):
            adv = AdversarySpec(drop=(("SAMPLE", 0.5), ("DATA_RELEASED", 0.5)))
            _, state = run_simulation(SimConfig(seed=seed, adversary=adv))
            assert not state.violations

    def test_gating_mutation_is_caught(self):
        adv = AdversarySpec(halt=("buyer", 11), disable_release_gating=True)
        _, state = run_simulation(SimConfig(seed=0, adversary=adv))
        assert [(v.party, v.step, v.invariant) for v in state.violations] == [("buyer", 13, "data-without-payment")]

    def test_exchange_halt_leaves_buyer_unpaid_or_served(self):
        for step in (4, 9, 13):
            _, state = run_simulation(SimConfig(seed=step, adversary=AdversarySpec(halt=("exchange", step))))
            assert not state.violations
            assert not (state.obtained and not state.seller_paid)
