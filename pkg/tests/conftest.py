import numpy as np
import pytest

from adiag.graph import BrainGraph, GraphDataset
from adiag.synthgen import GenConfig, generate_dataset


def random_graph(n: int, rng: np.random.Generator, label: int = 0, subject_id: str = "rand") -> BrainGraph:
    """Complete graph with symmetric weights in (0, 1] and zero diagonal."""
    W = rng.uniform(0.05, 1.0, size=(n, n))
    W = np.triu(W, 1)
    W = W + W.T
    x = rng.normal(size=(n, 3))
    return BrainGraph(x, W, label, subject_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset() -> GraphDataset:
    # 12 graphs of 16 nodes: fast enough for training-loop tests
    cfg = GenConfig(nodes_target=16, vertices_per_node=5, n_ad=6, n_nc=6, n_regions=4, seed=3)
    return generate_dataset(cfg)


@pytest.fixture(scope="session")
def desk_dataset() -> GraphDataset:
    return generate_dataset(GenConfig.desk(seed=0))
