"""Sparse undirected graphs, normalized propagation and the contraction checker."""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

SYM_NORM = "sym_norm_with_self_loops"
MEAN_AGG = "mean_agg"


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph stored as CSR neighbour lists.

    ``indptr``/``indices`` follow the scipy CSR convention; neighbours of each
    node are sorted ascending.  Self-loops are never stored.
    """

    n_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def n_edges(self) -> int:
        return int(self.indices.size // 2)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def edge_array(self) -> np.ndarray:
        """Undirected edges as an ``(n_edges, 2)`` array with ``i < j``, sorted."""
        rows = np.repeat(np.arange(self.n_nodes), self.degrees)
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)

    def adjacency(self) -> sp.csr_matrix:
        if "adj" not in self._cache:
            data = np.ones(self.indices.size)
            self._cache["adj"] = sp.csr_matrix(
                (data, self.indices, self.indptr), shape=(self.n_nodes, self.n_nodes))
        return self._cache["adj"]

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(self.n_nodes, self.indptr, self.indices, features, self.labels)


def build_graph(edges, features, labels=None, n_nodes: int | None = None) -> Graph:
    """Build a symmetric, deduplicated graph from an undirected edge list.

    Each edge may be listed once or in both directions.  A list that mixes the
    two conventions is mirrored with a warning.  Duplicates and self-loops are
    dropped.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if n_nodes is None:
        n_nodes = features.shape[0]
    if features.shape[0] != n_nodes:
        raise ValueError(
            f"feature matrix has {features.shape[0]} rows but graph has {n_nodes} nodes")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n_nodes):
        raise ValueError(f"edge index out of range for {n_nodes} nodes")
    e = e[e[:, 0] != e[:, 1]]

    if e.size:
        directed = set(map(tuple, e.tolist()))
        missing = sum((j, i) not in directed for i, j in directed)
        if 0 < missing < len(directed):
            warnings.warn(f"{missing} edges were not mirrored; adding reverse direction",
                          stacklevel=2)

    both = np.concatenate([e, e[:, ::-1]]) if e.size else e
    if both.size:
        both = np.unique(both, axis=0)  # lexicographic => sorted neighbour lists
    counts = np.bincount(both[:, 0], minlength=n_nodes) if both.size else np.zeros(n_nodes, int)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indices = both[:, 1].copy() if both.size else np.zeros(0, np.int64)

    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n_nodes,):
            raise ValueError(f"labels must have shape ({n_nodes},), got {labels.shape}")
    return Graph(int(n_nodes), indptr, indices, features, labels)


def subgraph(g: Graph, nodes: np.ndarray, edges: np.ndarray | None = None) -> Graph:
    """Graph on ``nodes`` (relabelled 0..len-1 in the given order).

    Without ``edges`` the induced subgraph is returned; otherwise only the
    given global edges (both endpoints must be in ``nodes``) are kept.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    local = -np.ones(g.n_nodes, dtype=np.int64)
    local[nodes] = np.arange(nodes.size)
    if edges is None:
        edges = g.edge_array()
        edges = edges[(local[edges[:, 0]] >= 0) & (local[edges[:, 1]] >= 0)]
    # edges are undirected here; one orientation per pair avoids the mirror warning
    edges = np.sort(local[np.asarray(edges, dtype=np.int64).reshape(-1, 2)], axis=1)
    labels = None if g.labels is None else g.labels[nodes]
    return build_graph(edges, g.features[nodes], labels, n_nodes=nodes.size)


def load_graph(edge_path, feature_path, label_path=None) -> Graph:
    """Load a graph from an edge-list text file, a feature CSV and optional labels."""
    features = np.loadtxt(feature_path, delimiter=",", ndmin=2)
    text = Path(edge_path).read_text().split()
    if len(text) % 2:
        raise ValueError(f"{edge_path}: odd number of node ids")
    edges = np.array(text, dtype=np.int64).reshape(-1, 2)
    labels = None
    if label_path is not None:
        labels = np.loadtxt(label_path, dtype=np.int64, ndmin=1)
        if labels.shape[0] != features.shape[0]:
            raise ValueError(
                f"{label_path}: {labels.shape[0]} labels for {features.shape[0]} nodes")
    return build_graph(edges, features, labels)


def save_graph(g: Graph, edge_path, feature_path, label_path=None) -> None:
    np.savetxt(edge_path, g.edge_array(), fmt="%d")
    np.savetxt(feature_path, g.features, delimiter=",", fmt="%.17g")
    if label_path is not None and g.labels is not None:
        np.savetxt(label_path, g.labels, fmt="%d")


@dataclass(frozen=True, eq=False)
class PropagationOperator:
    """A normalized adjacency with self-loops, kept as a sparse matrix.

    ``sym_norm_with_self_loops`` realizes D^-1/2 (A+I) D^-1/2 and
    ``mean_agg`` realizes D^-1 (A+I), where D is the degree of A+I.
    """

    kind: str
    scale: np.ndarray
    matrix: sp.csr_matrix

    @classmethod
    def from_graph(cls, g: Graph, kind: str = SYM_NORM) -> "PropagationOperator":
        key = ("op", kind)
        if key in g._cache:
            return g._cache[key]
        a_hat = g.adjacency() + sp.identity(g.n_nodes, format="csr")
        deg = np.asarray(a_hat.sum(axis=1)).ravel()
        if kind == SYM_NORM:
            scale = deg ** -0.5
            m = sp.diags(scale) @ a_hat @ sp.diags(scale)
        elif kind == MEAN_AGG:
            scale = 1.0 / deg
            m = sp.diags(scale) @ a_hat
        else:
            raise ValueError(f"unknown propagation kind {kind!r}")
        op = cls(kind, scale, sp.csr_matrix(m))
        g._cache[key] = op
        return op

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, h):
        return self.matrix @ h


def propagate(g: Graph, h, op: PropagationOperator | str = SYM_NORM, steps: int = 1):
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] != g.n_nodes:
        raise ValueError(f"h has {h.shape[0]} rows, graph has {g.n_nodes} nodes")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if isinstance(op, str):
        op = PropagationOperator.from_graph(g, op)
    for _ in range(steps):
        h = op @ h
    return h


def is_connected(g: Graph) -> bool:
    if g.n_nodes == 0:
        return True
    seen = np.zeros(g.n_nodes, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in g.neighbors(u):
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    return bool(seen.all())


def is_bipartite(g: Graph, self_loops: bool = False) -> bool:
    """BFS 2-colouring.  With ``self_loops`` every node closes an odd walk."""
    if self_loops and g.n_nodes > 0:
        return False
    color = -np.ones(g.n_nodes, dtype=np.int64)
    for start in range(g.n_nodes):
        if color[start] >= 0:
            continue
        color[start] = 0
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in g.neighbors(u):
                if color[v] < 0:
                    color[v] = 1 - color[u]
                    queue.append(v)
                elif color[v] == color[u]:
                    return False
    return True


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    # exact differences for numerically small entries
    d = np.sqrt(np.maximum(d2, 0.0))
    small = d < 1e-6 * max(1.0, float(np.sqrt(sq.max(initial=0.0))))
    if small.any():
        ii, jj = np.nonzero(small)
        d[ii, jj] = np.linalg.norm(x[ii] - x[jj], axis=1)
    return d


def check_contraction(g: Graph, h0, tau: int = 50, tol: float = 1e-8) -> dict:
    """Compare pairwise distances before and after ``tau`` propagation steps.

    Preconditions (connectedness, non-bipartiteness of A and of A+I) are
    reported rather than enforced.  Pairs whose initial and final distances
    are both zero get ratio 1; a pair that starts at distance zero but
    separates gets ratio ``inf``.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    h0 = np.asarray(h0, dtype=np.float64)
    connected = is_connected(g)
    report = {
        "n_nodes": g.n_nodes,
        "tau": int(tau),
        "connected": connected,
        "bipartite": is_bipartite(g),
        "bipartite_with_self_loops": is_bipartite(g, self_loops=True),
    }
    report["preconditions_met"] = connected and not report["bipartite_with_self_loops"]

    ht = propagate(g, h0, SYM_NORM, tau)
    d0 = _pairwise_distances(h0)
    dt = _pairwise_distances(ht)
    iu, ju = np.triu_indices(g.n_nodes, 1)
    before, after = d0[iu, ju], dt[iu, ju]
    ratio = np.ones_like(before)
    pos = before > 0
    ratio[pos] = after[pos] / before[pos]
    ratio[~pos & (after > 0)] = np.inf
    bad = np.nonzero(ratio > 1.0 + tol)[0]
    report["max_pair_ratio"] = float(ratio.max()) if ratio.size else 1.0
    report["violated_pairs"] = [[int(iu[k]), int(ju[k])] for k in bad]
    return report


def stationary_identity_residual(g: Graph) -> float:
    """Max abs residual of P (D^1/2 1) = D^1/2 1 for the symmetric operator."""
    op = PropagationOperator.from_graph(g, SYM_NORM)
    root_deg = 1.0 / op.scale
    return float(np.max(np.abs(op @ root_deg - root_deg)))
