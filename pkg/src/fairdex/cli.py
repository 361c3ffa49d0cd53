"""Command-line front end: ``fairdex run``, ``fairdex sweep --fairness`` and ``fairdex bench``.

Exit codes: 0 when every assertion holds, 1 on an assertion failure or
fairness violation, 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .bench import ChainBenchConfig, run_bench
from .scenarios import BUILTINS, fairness_sweep, load_scenario, run_scenario
from .sim import PARTIES, ConfigError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _env_seed():
    raw = os.environ.get("BDTF_SEED")
    if raw is None or raw == "":
        return None
    try:
        seed = int(raw, 0)
    except ValueError:
        raise ConfigError(f"BDTF_SEED must be an integer, got {raw!r}")
    if not 0 <= seed < 2**64:
        raise ConfigError("BDTF_SEED must fit in 64 bits")
    return seed


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _steps(text: str) -> list:
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, _, hi = part.partition("-")
        a, b = int(lo), int(hi or lo)
        if not 1 <= a <= b <= 15:
            raise ConfigError(f"steps must lie in 1..15, got {part!r}")
        out.extend(range(a, b + 1))
    return sorted(set(out))


def cmd_run(args) -> int:
    seed = args.seed if args.seed is not None else _env_seed()
    scenario = load_scenario(args.scenario, seed)
    result = run_scenario(scenario)
    st = result.state
    print(f"scenario {scenario.name} seed {scenario.config.seed}")
    print(f"  buyer  {st.outcomes['buyer']} {st.reasons['buyer']}".rstrip())
    print(f"  seller {st.outcomes['seller']} {st.reasons['seller']}".rstrip())
    print(f"  chain height {st.chain_height}, events {len(result.trace)}")
    for label, ok in result.checks:
        print(f"  [{'PASS' if ok else 'FAIL'}] {label}")
    for v in st.violations:
        print(f"  VIOLATION {v}")
    if args.trace:
        result.trace.write(args.trace)
    if args.report:
        _write_json(
            args.report,
            {
                "scenario": scenario.name,
                "seed": scenario.config.seed,
                "config": scenario.config.to_dict(),
                "ok": result.ok,
                "checks": [{"assertion": label, "ok": ok} for label, ok in result.checks],
                "final_state": st.to_dict(),
                "trace_digest": result.trace.digest(),
            },
        )
    return EXIT_OK if result.ok else EXIT_FAIL


def cmd_sweep(args) -> int:
    if not args.fairness:
        raise ConfigError("nothing to sweep: pass --fairness")
    base = args.base_seed if args.base_seed is not None else (_env_seed() or 0)
    parties = [p for p in (x.strip() for x in args.parties.split(",")) if p]
    bad = set(parties) - set(PARTIES)
    if bad:
        raise ConfigError(f"unknown parties {sorted(bad)}")
    steps = _steps(args.steps)
    specials = {} if args.no_specials else None
    if not parties or not steps or args.seeds_per_cell < 1:
        parties, steps = [], []
        if args.no_specials:
            raise ConfigError("empty adversary matrix")
    report = fairness_sweep(
        parties,
        steps,
        seeds_per_cell=args.seeds_per_cell if parties else 0,
        base_seed=base,
        specials=specials,
        disable_release_gating=args.disable_release_gating,
    )
    print(report.matrix(parties, steps))
    print(
        f"runs {report.runs}  violations {len(report.violations)}  "
        f"release audit clean {report.audit_clean_runs}/{report.audited_runs}  {report.seconds:.1f}s"
    )
    for v in report.violations[: args.max_report]:
        print(f"VIOLATION {v}")
    if args.report:
        _write_json(
            args.report,
            {
                "runs": report.runs,
                "seconds": report.seconds,
                "audit_clean_runs": report.audit_clean_runs,
                "violations": [str(v) for v in report.violations],
                "cells": {f"{p}@{s}": c.ok for (p, s), c in report.halt_cells.items()},
                "specials": {n: {"runs": c.runs, "ok": c.ok} for n, c in report.specials.items()},
            },
        )
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_bench(args) -> int:
    try:
        loads = [float(x) for x in args.load.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --load {args.load!r}")
    if not loads or any(x <= 0 for x in loads):
        raise ConfigError("--load must be positive")
    if args.duration <= 0 or args.repeat < 1 or args.enclave_requests < 0:
        raise ConfigError("--duration and --repeat must be positive")
    if args.block_interval <= 0 or args.max_block_txs < 1:
        raise ConfigError("block interval and block size must be positive")
    seed = _env_seed() or 0
    cfg = ChainBenchConfig(args.block_interval, args.max_block_txs, seed=seed)
    report = run_bench(loads, args.duration, args.repeat, args.enclave_requests, cfg).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.report:
        _write_json(args.report, report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairdex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a named scenario or a JSON scenario file")
    run.add_argument("--scenario", required=True, help=f"one of {', '.join(BUILTINS)} or a path")
    run.add_argument("--seed", type=int, default=None, help="overrides BDTF_SEED and the file's seed")
    run.add_argument("--trace", help="write the event trace (JSON Lines) here")
    run.add_argument("--report", help="write a JSON report here")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="adversarial schedule sweep")
    sweep.add_argument("--fairness", action="store_true", help="halt-at-every-step matrix plus attack scenarios")
    sweep.add_argument("--seeds-per-cell", type=int, default=20)
    sweep.add_argument("--base-seed", type=int, default=None)
    sweep.add_argument("--parties", default=",".join(PARTIES))
    sweep.add_argument("--steps", default="1-15", help="e.g. 1-15 or 3,11,13")
    sweep.add_argument("--no-specials", action="store_true", help="skip the attack scenarios")
    sweep.add_argument("--report", help="write a JSON summary here")
    sweep.add_argument("--max-report", type=int, default=20, help=argparse.SUPPRESS)
    sweep.add_argument("--disable-release-gating", action="store_true", help=argparse.SUPPRESS)
    sweep.set_defaults(func=cmd_sweep)

    bench = sub.add_parser("bench", help="throughput / latency / enclave timing report")
    bench.add_argument("--load", required=True, help="offered load in tx per simulated second; comma list allowed")
    bench.add_argument("--duration", type=float, default=60.0, help="simulated seconds per repetition")
    bench.add_argument("--repeat", type=int, default=100)
    bench.add_argument("--enclave-requests", type=int, default=1000)
    bench.add_argument("--block-interval", type=int, default=1)
    bench.add_argument("--max-block-txs", type=int, default=300)
    bench.add_argument("--report", help="also write the report JSON here")
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
