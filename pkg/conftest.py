"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from synthetic_world import TauMode, WorldConfig, make_world


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def small_config():
    return WorldConfig(classes=4, dim=8, kappa=0.1, nu_target=0.8, clusters_per_class=2,
                       db_per_cluster=16, master_seed=7)


@pytest.fixture
def small_world(small_config):
    return make_world(small_config)


@pytest.fixture
def adversarial_world():
    config = WorldConfig(classes=4, dim=8, kappa=0.1, nu_target=0.8, clusters_per_class=2,
                         db_per_cluster=16, tau_mode=TauMode.ADVERSARIAL, master_seed=11)
    return make_world(config)


def random_unit_rows(rng, n, d):
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)
