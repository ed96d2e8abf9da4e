import numpy as np
import pytest

from rcnas.network import NetworkPlan


@pytest.fixture
def rng():
    return np.random.default_rng(np.random.SeedSequence(1234))


@pytest.fixture
def micro_plan():
    """Two cells, no reduction, one intermediate node: 196 architectures."""
    return NetworkPlan(n_cells=2, init_channels=4, n_classes=4, image_hw=(8, 8), n_nodes=4, k_levels=1)


@pytest.fixture
def small_plan():
    """Four cells with two reductions and five-node cells."""
    return NetworkPlan(n_cells=4, init_channels=8, n_classes=4, image_hw=(16, 16), n_nodes=5, k_levels=2)
