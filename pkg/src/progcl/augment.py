"""Stochastic graph views: uniform edge dropping and feature masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph, build_graph


@dataclass(frozen=True)
class AugmentConfig:
    p_edge_drop_1: float = 0.3
    p_edge_drop_2: float = 0.4
    p_feat_mask_1: float = 0.3
    p_feat_mask_2: float = 0.4
    rng_seed: int = 0
    per_entry: bool = False

    def __post_init__(self):
        for name in ("p_edge_drop_1", "p_edge_drop_2", "p_feat_mask_1", "p_feat_mask_2"):
            _check_prob(getattr(self, name), name)


def _check_prob(p: float, name: str) -> None:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"{name} must lie in [0, 1), got {p}")


def augment(g: Graph, p_edge: float, p_feat: float, rng: np.random.Generator,
            per_entry: bool = False) -> Graph:
    """Drop each undirected edge and mask each feature column independently.

    With ``per_entry`` individual feature entries are masked instead of whole
    columns.  The node set and labels are kept.
    """
    _check_prob(p_edge, "p_edge")
    _check_prob(p_feat, "p_feat")
    edges = g.edge_array()
    keep = rng.random(len(edges)) >= p_edge
    x = g.features
    shape = x.shape if per_entry else (1, x.shape[1])
    mask = rng.random(shape) >= p_feat
    if not mask.all():
        x = x * mask
    if keep.all():
        return g.with_features(x)
    return build_graph(edges[keep], x, g.labels, n_nodes=g.n_nodes)
