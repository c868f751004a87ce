"""Synthetic stochastic-block-model graphs with class-dependent features."""
from __future__ import annotations

import warnings

import numpy as np

from .graph import Graph, build_graph


def generate_sbm(blocks: int = 3, nodes_per_block: int = 100, p_in: float = 0.1,
                 p_out: float = 0.01, feature_dim: int = 16, class_sep: float = 1.0,
                 seed: int = 0) -> Graph:
    """Stochastic block model graph.

    Each block gets a random unit-vector mean scaled by ``class_sep``; node
    features are that mean plus standard Gaussian noise.  Labels are block ids.
    """
    if blocks < 1 or nodes_per_block < 1:
        raise ValueError("need at least one non-empty block")
    if p_in < p_out:
        warnings.warn("p_in < p_out: generating a disassortative graph", stacklevel=2)
    rng = np.random.default_rng(seed)
    n = blocks * nodes_per_block
    labels = np.repeat(np.arange(blocks), nodes_per_block)
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(iu.size) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)

    means = rng.standard_normal((blocks, feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    features = class_sep * means[labels] + rng.standard_normal((n, feature_dim))
    return build_graph(edges, features, labels)
