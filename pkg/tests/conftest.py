import numpy as np
import pytest

from sharc.core import LevelGraph

ACCEPTANCE_LINES = []


def make_graph(features, neighbors, sims, k=None, level=0):
    """LevelGraph from explicit arrays; origins are singletons."""
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    neighbors = np.asarray(neighbors, dtype=np.int64).reshape(n, -1)
    return LevelGraph(
        level=level,
        node_features=features,
        neighbors=neighbors,
        edge_similarity=np.asarray(sims, dtype=float).reshape(neighbors.shape),
        node_origin=[np.array([i]) for i in range(n)],
        representative=np.arange(n),
        k=k if k is not None else neighbors.shape[1],
    )


def random_graph(rng, n, deg, f=2):
    """Random graph with a valid neighbour table (no self loops, no repeats)."""
    nbrs = np.array([rng.permutation(np.delete(np.arange(n), i))[:deg] for i in range(n)])
    nbrs = nbrs.reshape(n, deg)
    sims = rng.uniform(0, 1, size=(n, deg))
    x = rng.normal(size=(n, f))
    feats = np.concatenate([x, rng.normal(size=(n, f))], axis=1)
    return make_graph(feats, nbrs, sims)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
