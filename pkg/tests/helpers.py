"""Independent oracles shared by the test modules."""
import math

import numpy as np

from progcl import autodiff as ad
from progcl.autodiff import Tensor
from progcl.graph import build_graph
from progcl.nn import ProjectionParams
from progcl.objectives import (PairSimilarities, loss_infonce, loss_progcl_mix,
                               loss_progcl_weight, mixing_plan, synthetic_similarities)


def dense_sym_norm(g):
    a = np.zeros((g.n_nodes, g.n_nodes))
    for i, j in g.edge_array():
        a[i, j] = a[j, i] = 1.0
    a += np.eye(g.n_nodes)
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def dense_mean_agg(g):
    a = np.zeros((g.n_nodes, g.n_nodes))
    for i, j in g.edge_array():
        a[i, j] = a[j, i] = 1.0
    a += np.eye(g.n_nodes)
    return a / a.sum(axis=1, keepdims=True)


def random_connected_graph(rng, n, p=None, f_dim=3, connected=True, non_bipartite=True):
    """Erdos-Renyi graph; a random spanning tree (and a triangle) is added when asked."""
    p = rng.uniform(0.05, 0.6) if p is None else p
    iu, ju = np.triu_indices(n, 1)
    edges = [tuple(e) for e in np.stack([iu, ju], 1)[rng.random(iu.size) < p]]
    if connected and n > 1:
        order = rng.permutation(n)
        edges += [(int(order[k]), int(order[rng.integers(k)])) for k in range(1, n)]
    if non_bipartite and n >= 3:
        a, b, c = rng.choice(n, 3, replace=False)
        edges += [(a, b), (b, c), (a, c)]
    edges = {tuple(sorted(map(int, e))) for e in edges}
    return build_graph(sorted(edges), rng.standard_normal((n, f_dim)), n_nodes=n)


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def scalar_infonce(inter, intra_u, intra_v, tau, w=None, w_rev=None, synth_u=None, synth_v=None):
    """Loop-by-loop evaluation of the symmetric contrastive objective."""
    n = len(inter)
    total = 0.0
    for i in range(n):
        for direction in (0, 1):
            if direction == 0:
                pos = inter[i][i]
                inter_row = [inter[i][k] for k in range(n)]
                intra_row = intra_u[i]
                weights = w[i] if w is not None else [1.0] * n
                extra = synth_u[i] if synth_u is not None else []
            else:
                pos = inter[i][i]
                inter_row = [inter[k][i] for k in range(n)]
                intra_row = intra_v[i]
                wr = w_rev if w_rev is not None else w
                weights = wr[i] if wr is not None else [1.0] * n
                extra = synth_v[i] if synth_v is not None else []
            denom = math.exp(pos / tau)
            for k in range(n):
                if k == i:
                    continue
                denom += weights[k] * math.exp(inter_row[k] / tau)
                denom += weights[k] * math.exp(intra_row[k] / tau)
            for val in extra:
                denom += math.exp(val / tau)
            total += math.log(math.exp(pos / tau) / denom)
    return -total / (2 * n)


def grad_case(seed, kind):
    """Analytic vs numeric gradients of one loss w.r.t. embeddings and head."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    d = int(rng.integers(2, 6))
    u = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    v = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    head = ProjectionParams.init(d, rng)
    w = rng.uniform(0, 2, (n, n))
    m = int(rng.integers(1, 4))
    pool = min(2, n - 1) if n > 2 else 1
    plan = None
    if kind == "mix" and n > 2:
        plan = mixing_plan(rng.random((n, n)), rng.random((n, n)), pool, m, rng)

    def loss():
        zu, zv = head(u), head(v)
        sims = PairSimilarities.from_projections(zu, zv, 0.5)
        if kind == "base":
            return loss_infonce(sims)
        if kind == "weight":
            return loss_progcl_weight(sims, w, w.T)
        if plan is None:
            return loss_progcl_mix(sims)
        su = synthetic_similarities(zu, v, plan, head)
        sv = synthetic_similarities(zv, u, plan, head)
        return loss_progcl_mix(sims, su, sv)
    leaves = [u, v, head.W1, head.b1, head.W2, head.b2]
    ad.backward(loss())
    return max(rel_error(t.grad, numeric_grad(lambda: loss().item(), t.data), floor=1e-4)
               for t in leaves)
