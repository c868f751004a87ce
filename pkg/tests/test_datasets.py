import networkx as nx
import numpy as np
import pytest
from networkx.algorithms.community import modularity

from progcl.datasets import generate_sbm
from progcl.probe import linear_probe


def test_complete_blocks():
    g = generate_sbm(2, 3, p_in=1.0, p_out=0.0, feature_dim=2, seed=0)
    assert g.edge_array().tolist() == [[0, 1], [0, 2], [1, 2], [3, 4], [3, 5], [4, 5]]
    assert g.labels.tolist() == [0, 0, 0, 1, 1, 1]


def test_deterministic():
    a, b = generate_sbm(seed=3), generate_sbm(seed=3)
    np.testing.assert_array_equal(a.edge_array(), b.edge_array())
    np.testing.assert_array_equal(a.features, b.features)


def test_uniform_edge_probability_has_no_modularity():
    scores = []
    for seed in range(100):
        g = generate_sbm(3, 20, p_in=0.2, p_out=0.2, feature_dim=2, seed=seed)
        nxg = nx.Graph()
        nxg.add_nodes_from(range(g.n_nodes))
        nxg.add_edges_from(g.edge_array().tolist())
        parts = [set(np.nonzero(g.labels == c)[0].tolist()) for c in range(3)]
        scores.append(modularity(nxg, parts))
    assert abs(np.mean(scores)) < 0.02


def test_zero_separation_is_chance():
    g = generate_sbm(3, 100, class_sep=0.0, seed=0)
    acc = linear_probe(g.features, g.labels, runs=10, seed=0)["acc_mean"]
    assert abs(acc - 1 / 3) < 0.06


def test_validation():
    with pytest.raises(ValueError):
        generate_sbm(0, 5)
    with pytest.warns(UserWarning, match="disassortative"):
        generate_sbm(2, 5, p_in=0.1, p_out=0.5)
