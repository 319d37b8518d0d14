import numpy as np
import pytest

from sagad.graph import GraphDataset, SparseAdjacency


def make_dataset(edges, features, labels, num_nodes=None, splits=None, name="test"):
    features = np.asarray(features, dtype=np.float64)
    if num_nodes is None:
        num_nodes = features.shape[0]
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    adj = SparseAdjacency.from_edges(num_nodes, edges)
    return GraphDataset(
        adjacency=adj,
        features=features,
        labels=np.asarray(labels, dtype=np.int8),
        splits=splits or [],
        name=name,
    )


def er_dataset(n, p, d, seed=0, anomaly_frac=0.2):
    """Erdos-Renyi graph with random features and labels."""
    rng = np.random.default_rng(seed)
    mask = np.triu(rng.random((n, n)) < p, 1)
    edges = np.argwhere(mask)
    if len(edges) == 0:
        edges = np.zeros((0, 2), dtype=np.int64)
    adj = SparseAdjacency.from_edges(n, edges)
    features = rng.standard_normal((n, d))
    labels = (rng.random(n) < anomaly_frac).astype(np.int8)
    return GraphDataset(adjacency=adj, features=features, labels=labels)


@pytest.fixture
def path3():
    """Path graph 0-1-2 with labels (1, 1, 0)."""
    return make_dataset([[0, 1], [1, 2]], [[1.0], [2.0], [3.0]], [1, 1, 0])
