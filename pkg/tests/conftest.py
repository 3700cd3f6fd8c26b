import numpy as np
import pytest

from elastic_dml.sim import SimConfig, simulate_policy


@pytest.fixture(scope="session")
def small_panel():
    """60 articles x 100 weeks; big enough for training smoke tests."""
    return simulate_policy(SimConfig(n_articles=60, master_seed=123))


@pytest.fixture(scope="session")
def tiny_panel():
    """12 articles x 60 weeks; for fast harness and CLI tests."""
    return simulate_policy(SimConfig(n_articles=12, n_weeks=60, master_seed=5))


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)
