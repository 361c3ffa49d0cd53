import random

import pytest

from fairdex.chain import Allocation, ChainState, NetworkConfig
from fairdex.crypto import KeyPair

EASY = 2**256 - 1


def keypair(i: int) -> KeyPair:
    return KeyPair.from_seed(random.Random(f"key-{i}").randbytes(32))


def make_network(n=4, amount=1000, target=EASY, **kw):
    keys = [keypair(i) for i in range(n)]
    cfg = NetworkConfig(
        target=target,
        allocations=[Allocation(k.address, amount, k.public_key) for k in keys],
        **kw,
    )
    return cfg, keys


@pytest.fixture
def net():
    cfg, keys = make_network()
    return cfg, keys, ChainState(cfg)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
