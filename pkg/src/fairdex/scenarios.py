"""Named scenarios, scenario files and the adversarial fairness sweep.

A scenario is a JSON object mirroring ``SimConfig`` plus an optional
``expect`` block of assertions checked against the final state, e.g.::

    {"name": "refuse-to-pay", "adversary": {"halt": ["buyer", 11]},
     "expect": {"buyer_outcome": "AbortedAtStep(11)", "seller_paid": false}}
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from .sim import PARTIES, AdversarySpec, ConfigError, FinalState, SimConfig, World

PRICE = 100
FEE = 10

BUILTINS: dict[str, dict] = {
    "honest-trade": {
        "expect": {
            "buyer_outcome": "Completed",
            "seller_outcome": "Completed",
            "data_matches": True,
            "seller_paid": True,
            "buyer_delta": -(PRICE + FEE),
            "seller_delta": PRICE,
            "seller_reviewed": True,
            "all_steps": True,
        },
    },
    "mismatched-data": {
        "adversary": {"seller_garbage": True},
        "expect": {
            "buyer_outcome": "AbortedAtStep(10)",
            "seller_paid": False,
            "obtained": False,
            "buyer_delta": -FEE,
        },
    },
    "refuse-to-pay": {
        "adversary": {"halt": ["buyer", 11]},
        "expect": {
            "buyer_outcome": "AbortedAtStep(11)",
            "seller_paid": False,
            "obtained": False,
            "buyer_delta": -FEE,
        },
    },
    "double-spend": {
        "adversary": {"reorg": [None, None]},
        "expect": {"obtained": False, "seller_paid": False, "buyer_outcome": "AbortedAtStep(13)"},
    },
    "fake-chain-attack": {
        "adversary": {"fake_chain": [256, 50]},
        "expect": {"fake_headers_rejected": 50, "obtained": False, "seller_paid": False},
    },
    "exchange-kill": {
        "exchanges": 3,
        "adversary": {"kill_exchange": [[1, 11], [2, 11]]},
        "expect": {"buyer_outcome": "Completed", "data_matches": True, "seller_paid": True, "seller_delta": PRICE},
    },
    "multi-exchange": {
        "exchanges": 3,
        "expect": {
            "buyer_outcome": "Completed",
            "seller_outcome": "Completed",
            "data_matches": True,
            "exchanges_with_deposit": 3,
            "buyer_delta": -(PRICE + 3 * FEE),
            "seller_delta": PRICE,
        },
    },
    "tampered-enclave": {
        "adversary": {"tamper_enclave": [0]},
        "expect": {"buyer_outcome": "AbortedAtStep(1)", "seller_paid": False, "obtained": False, "buyer_delta": 0},
    },
}

# extra sweep-only variants
VARIANTS: dict[str, dict] = {
    "tampered-enclave-collusion": {
        "adversary": {"tamper_enclave": [0], "skip_attestation": True},
        "expect": {"seller_outcome": "AbortedAtStep(6)", "obtained": False},
    },
    "underquote": {
        "adversary": {"underquote": 20},
        "expect": {"seller_outcome": "AbortedAtStep(7)", "seller_paid": False},
    },
    "lossy-links": {
        "adversary": {"drop": [["SAMPLE", 0.3], ["DATA_RELEASED", 0.3], ["TX", 0.05]]},
        "expect": {},
    },
}


@dataclass
class Scenario:
    name: str
    config: SimConfig
    expect: dict = field(default_factory=dict)


def _build(name: str, body: dict, seed=None) -> Scenario:
    body = copy.deepcopy(body)
    expect = body.pop("expect", {}) or {}
    body.setdefault("name", name)
    body.setdefault("price", PRICE)
    body.setdefault("service_fee", FEE)
    if seed is not None:
        body["seed"] = seed
    return Scenario(body["name"], SimConfig.from_dict(body), expect)


def load_scenario(ref: str, seed=None) -> Scenario:
    """A built-in name or a path to a JSON scenario file."""
    if ref in BUILTINS:
        return _build(ref, BUILTINS[ref], seed)
    if ref in VARIANTS:
        return _build(ref, VARIANTS[ref], seed)
    path = Path(ref)
    if not path.is_file():
        raise ConfigError(f"no built-in scenario or file named {ref!r}")
    try:
        body = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{ref}: {exc}") from exc
    if not isinstance(body, dict):
        raise ConfigError(f"{ref}: scenario must be a JSON object")
    return _build(path.stem, body, seed)


def _all_steps(world: World, state: FinalState) -> bool:
    seen = set(state.phases["buyer"]) | set(state.phases["seller"])
    if any(h.gc_runs for h in world.hosts):
        seen.add(15)
    return seen >= set(range(1, 16))


def check_expectations(scenario: Scenario, world: World, state: FinalState) -> list:
    """[(label, ok)] for every expectation plus the fairness invariants."""
    e = scenario.expect
    checks = []
    simple = {
        "buyer_outcome": state.outcomes["buyer"],
        "seller_outcome": state.outcomes["seller"],
        "data_matches": state.data_matches,
        "obtained": state.obtained,
        "seller_paid": state.seller_paid,
    }
    for key, actual in simple.items():
        if key in e:
            checks.append((f"{key} == {e[key]!r} (got {actual!r})", actual == e[key]))
    if "buyer_delta" in e:
        d = state.balance_delta("buyer")
        checks.append((f"buyer balance change {e['buyer_delta']} (got {d})", d == e["buyer_delta"]))
    if "seller_delta" in e:
        d = state.balance_delta("seller")
        checks.append((f"seller balance change {e['seller_delta']} (got {d})", d == e["seller_delta"]))
    if "seller_reviewed" in e:
        ok = bool(state.reviews["seller"]) == e["seller_reviewed"]
        checks.append((f"review of seller visible on chain: {state.reviews['seller']}", ok))
    if "all_steps" in e:
        checks.append(("all 15 trading steps executed", _all_steps(world, state) == e["all_steps"]))
    if "fake_headers_rejected" in e:
        n = e["fake_headers_rejected"] * sum(1 for h in world.hosts if h.alive)
        ok = state.fake_headers == {"RejectedDifficulty": n}
        checks.append((f"enclave rejected all fake headers ({state.fake_headers})", ok))
    if "exchanges_with_deposit" in e:
        n = len(state.deposited)
        checks.append((f"ciphertext deposited at {e['exchanges_with_deposit']} exchanges (got {n})", n == e["exchanges_with_deposit"]))
    checks.append(
        (f"no fairness violations ({len(state.violations)})", not state.violations)
    )
    return checks


@dataclass
class ScenarioResult:
    scenario: Scenario
    trace: object
    state: FinalState
    checks: list

    @property
    def ok(self) -> bool:
        return all(ok for _, ok in self.checks)


def run_scenario(scenario: Scenario) -> ScenarioResult:
    world = World(scenario.config)
    trace, state = world.run()
    return ScenarioResult(scenario, trace, state, check_expectations(scenario, world, state))


# --------------------------------------------------------------------------
# sweep


SPECIAL_RUNS = {
    "honest-trade": 10,
    "double-spend": 100,
    "fake-chain-attack": 10,
    "exchange-kill": 10,
    "multi-exchange": 10,
    "tampered-enclave": 10,
    "tampered-enclave-collusion": 10,
    "mismatched-data": 10,
    "underquote": 10,
    "lossy-links": 10,
}


@dataclass
class CellResult:
    label: str
    runs: int = 0
    failures: list = field(default_factory=list)  # Violation or failed expectation text

    @property
    def ok(self) -> bool:
        return not self.failures


@dataclass
class SweepReport:
    halt_cells: dict  # (party, step) -> CellResult
    specials: dict  # name -> CellResult
    runs: int
    audited_runs: int
    audit_clean_runs: int
    seconds: float

    @property
    def violations(self) -> list:
        out = []
        for cell in list(self.halt_cells.values()) + list(self.specials.values()):
            out.extend(cell.failures)
        return out

    @property
    def ok(self) -> bool:
        return not self.violations

    def matrix(self, parties, steps) -> str:
        lines = ["party     " + " ".join(f"{s:>3}" for s in steps)]
        for p in parties:
            cells = [self.halt_cells.get((p, s)) for s in steps]
            lines.append(f"{p:<9} " + " ".join("  ." if c is None else ("  ✓" if c.ok else "  ✗") for c in cells))
        for name, cell in self.specials.items():
            lines.append(f"{name:<28} {cell.runs:>4} runs  {'pass' if cell.ok else 'FAIL'}")
        return "\n".join(lines)


def _audit_clean(world: World) -> bool:
    return all(not h.audit.violations() for h in world.hosts)


def fairness_sweep(
    parties=PARTIES,
    steps=range(1, 16),
    seeds_per_cell: int = 20,
    base_seed: int = 0,
    specials=None,
    disable_release_gating: bool = False,
    progress=None,
) -> SweepReport:
    """Halt every party at every step over several seeds, plus the attack scenarios."""
    parties, steps = list(parties), list(steps)
    specials = dict(SPECIAL_RUNS if specials is None else specials)
    if (not parties or not steps or seeds_per_cell < 1) and not specials:
        raise ConfigError("empty adversary matrix")
    t0 = time.perf_counter()
    runs = audited = clean = 0

    def one(cfg: SimConfig, expect: dict, cell: CellResult):
        nonlocal runs, audited, clean
        if disable_release_gating:
            cfg.adversary.disable_release_gating = True
        world = World(cfg)
        _, state = world.run()
        runs += 1
        audited += 1
        clean += _audit_clean(world)
        cell.runs += 1
        cell.failures.extend(state.violations)
        for label, ok in check_expectations(Scenario(cfg.name, cfg, expect), world, state):
            if not ok and not label.startswith("no fairness"):
                cell.failures.append(f"{cell.label} seed {cfg.seed}: expected {label}")
        if progress:
            progress(runs)

    halt_cells = {}
    if seeds_per_cell >= 1:
        for p in parties:
            for s in steps:
                cell = halt_cells[(p, s)] = CellResult(f"halt {p}@{s}")
                for i in range(seeds_per_cell):
                    cfg = SimConfig(
                        seed=base_seed + i,
                        adversary=AdversarySpec(halt=(p, s)),
                        name=f"halt-{p}-{s}",
                        price=PRICE,
                        service_fee=FEE,
                    )
                    one(cfg, {}, cell)
    special_cells = {}
    for name, n in specials.items():
        cell = special_cells[name] = CellResult(name)
        for i in range(n):
            sc = load_scenario(name, seed=base_seed + i)
            one(sc.config, sc.expect, cell)
    return SweepReport(halt_cells, special_cells, runs, audited, clean, time.perf_counter() - t0)
