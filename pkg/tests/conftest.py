import numpy as np
import pytest

from slaterl import synth
from slaterl.catalog import Catalog
from slaterl.env import EpisodeConfig


def unlock_oracle(bits, row_size=3):
    """Independent statement of the rule: the set of purchased rows-prefix."""
    rows = [bits[i:i + row_size] for i in range(0, len(bits), row_size)]
    first_incomplete = next((k for k, r in enumerate(rows) if sum(r) < row_size), len(rows))
    return all(sum(r) == 0 for r in rows[first_incomplete + 1:])


@pytest.fixture
def tiny_world():
    """3 items, enumerable."""
    return synth.generate_world(seed=3, n_items=3, n_chains=1, chain_length=2, page_size=2,
                                decoy_coef=0.7, long_term_coef=2.0, chain_bias=-1.0,
                                teaser_bias=0.0, continue_bias=0.0)


@pytest.fixture
def tiny_config():
    return EpisodeConfig(gamma=0.9, page_size=2, max_pages=2, row_size=1)


@pytest.fixture
def small_world():
    return synth.generate_world(seed=1, n_items=20, n_chains=2, chain_length=3)


@pytest.fixture
def flat_catalog():
    return Catalog(np.full(30, 10.0), np.eye(30)[:, :5])


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod and getattr(mod, "RESULTS", None):
        terminalreporter.section("acceptance criteria")
        for n in sorted(mod.RESULTS):
            terminalreporter.write_line(mod.RESULTS[n])
