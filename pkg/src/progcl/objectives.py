"""InfoNCE and its two posterior-aware variants.

All three losses share one per-direction kernel, so the reductions
(unit weights, zero synthetics) reproduce the base loss bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ProjectionParams

UNDERFLOW = 1e-12


@dataclass
class PairSimilarities:
    """Critic values for every node pair; entries may be arrays or tensors."""

    inter: Tensor
    intra_u: Tensor
    intra_v: Tensor
    tau: float

    def __post_init__(self):
        self.inter = ad.as_tensor(self.inter)
        self.intra_u = ad.as_tensor(self.intra_u)
        self.intra_v = ad.as_tensor(self.intra_v)
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    @property
    def n(self) -> int:
        return self.inter.shape[0]

    @classmethod
    def from_projections(cls, zu: Tensor, zv: Tensor, tau: float) -> "PairSimilarities":
        nu, nv = ad.l2_normalize(zu), ad.l2_normalize(zv)
        return cls(nu @ nv.T, nu @ nu.T, nv @ nv.T, tau)


@dataclass
class WeightMatrix:
    w: np.ndarray
    underflow_rows: list = field(default_factory=list)


@dataclass
class SyntheticNegatives:
    vectors: np.ndarray
    alpha: np.ndarray
    p: np.ndarray
    q: np.ndarray
    both_zero: int = 0


@dataclass
class MixingPlan:
    """Parent indices and mixing weights for ``m`` synthetics per anchor."""

    p: np.ndarray
    q: np.ndarray
    alpha: np.ndarray
    both_zero: int = 0

    @property
    def m(self) -> int:
        return self.p.shape[1]

    def matrix(self, n_parents: int) -> sp.csr_matrix:
        """Sparse ``(n*m, n_parents)`` operator mapping parents to synthetics."""
        n, m = self.p.shape
        rows = np.repeat(np.arange(n * m), 2)
        cols = np.stack([self.p.ravel(), self.q.ravel()], axis=1).ravel()
        vals = np.stack([self.alpha.ravel(), 1.0 - self.alpha.ravel()], axis=1).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(n * m, n_parents))


def _offdiag(n: int) -> np.ndarray:
    mask = np.ones((n, n))
    np.fill_diagonal(mask, 0.0)
    return mask


def _direction(inter: Tensor, intra: Tensor, tau: float, w=None, synth: Tensor | None = None):
    """Per-anchor log-ratio for one direction (anchors index rows of ``inter``)."""
    n = inter.shape[0]
    diag = np.arange(n)
    mask = _offdiag(n)
    if w is not None:
        mask = mask * w
    e_inter = ad.exp(inter / tau)
    e_intra = ad.exp(intra / tau)
    denom = ad.take(e_inter, (diag, diag))
    denom = denom + ad.sum(e_inter * mask, axis=1) + ad.sum(e_intra * mask, axis=1)
    if synth is not None and synth.shape[1] > 0:
        denom = denom + ad.sum(ad.exp(synth / tau), axis=1)
    return ad.take(inter, (diag, diag)) / tau - ad.log(denom)


def _weights_array(w) -> np.ndarray | None:
    if w is None:
        return None
    arr = w.w if isinstance(w, WeightMatrix) else np.asarray(w, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("negative weights are not allowed")
    return arr


def _objective(sims: PairSimilarities, w_uv=None, w_vu=None, synth_u=None, synth_v=None):
    n = sims.n
    if n < 2:
        raise ValueError("need at least two nodes")
    forward = _direction(sims.inter, sims.intra_u, sims.tau, w_uv, synth_u)
    reverse = _direction(sims.inter.T, sims.intra_v, sims.tau, w_vu, synth_v)
    return -(ad.sum(forward) + ad.sum(reverse)) / (2.0 * n)


def loss_infonce(sims: PairSimilarities) -> Tensor:
    """Symmetric InfoNCE with inter- and intra-view negatives."""
    return _objective(sims)


def loss_progcl_weight(sims: PairSimilarities, w, w_rev=None) -> Tensor:
    """InfoNCE whose negative terms are scaled by hardness weights.

    ``w[i, k]`` weights the negatives of anchor ``u_i``; ``w_rev`` does the
    same for anchors ``v_i`` and defaults to ``w``.
    """
    w = _weights_array(w)
    w_rev = w if w_rev is None else _weights_array(w_rev)
    return _objective(sims, w, w_rev)


def loss_progcl_mix(sims: PairSimilarities, synth_u=None, synth_v=None) -> Tensor:
    """InfoNCE with extra synthetic negatives.

    ``synth_u[i, k]`` is the critic value between anchor ``u_i`` and its k-th
    synthetic negative; ``synth_v`` is the same for anchors ``v_i``.
    """
    synth_u = None if synth_u is None else ad.as_tensor(synth_u)
    synth_v = None if synth_v is None else ad.as_tensor(synth_v)
    return _objective(sims, synth_u=synth_u, synth_v=synth_v)


def compute_weights(s, posterior) -> WeightMatrix:
    """Row-normalized hardness ``p * s`` over each anchor's negatives.

    ``s`` holds normalized inter-view similarities and ``posterior`` the
    matching true-negative probabilities.  The diagonal is ignored and set
    to zero.  Rows whose normaliser underflows get unit weights.
    """
    s = np.asarray(s, dtype=np.float64)
    p = np.broadcast_to(np.asarray(posterior, dtype=np.float64), s.shape)
    n = s.shape[0]
    prod = p * s * _offdiag(n)
    denom = prod.sum(axis=1, keepdims=True) / (n - 1)
    bad = np.nonzero(denom.ravel() < UNDERFLOW)[0]
    w = prod / np.where(denom < UNDERFLOW, 1.0, denom)
    if bad.size:
        w[bad] = 1.0
    np.fill_diagonal(w, 0.0)
    return WeightMatrix(w, bad.tolist())


def hard_pool(hardness, n_prime: int) -> np.ndarray:
    """Indices of the ``n_prime`` largest off-diagonal scores in each row.

    Ties break toward the lower index.
    """
    h = np.array(hardness, dtype=np.float64)
    n = h.shape[0]
    if not 2 <= n_prime <= n - 1:
        raise ValueError(f"hard pool size must be in [2, {n - 1}], got {n_prime}")
    np.fill_diagonal(h, -np.inf)
    order = np.argsort(-h, axis=1, kind="stable")
    return order[:, :n_prime]


def mixing_plan(hardness, posterior, n_prime: int, m: int,
                rng: np.random.Generator) -> MixingPlan:
    """Draw ``m`` parent pairs per anchor from its hard pool and their weights.

    Pairs are uniform over unordered-distinct pool members.  The weight on the
    first parent is its share of the pair's true-negative probability.
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    post = np.asarray(posterior, dtype=np.float64)
    n = post.shape[0]
    if m == 0:
        empty = np.zeros((n, 0), dtype=np.int64)
        return MixingPlan(empty, empty.copy(), np.zeros((n, 0)))
    pool = hard_pool(hardness, n_prime)
    a = rng.integers(n_prime, size=(n, m))
    b = rng.integers(n_prime - 1, size=(n, m))
    b = b + (b >= a)
    rows = np.arange(n)[:, None]
    p, q = pool[rows, a], pool[rows, b]
    pp, pq = post[rows, p], post[rows, q]
    total = pp + pq
    zero = total <= 0.0
    alpha = np.where(zero, 0.5, pp / np.where(zero, 1.0, total))
    return MixingPlan(p, q, alpha, int(zero.sum()))


def synthesize_negatives(anchor_idx: int, embeddings_v, hardness, posterior,
                         n_prime: int, m: int, rng: np.random.Generator) -> SyntheticNegatives:
    """Synthetic hard negatives for one anchor.

    ``hardness`` and ``posterior`` are the anchor's rows (length n) against the
    other view's nodes; ``embeddings_v`` holds those nodes' embeddings.
    """
    v = np.asarray(embeddings_v, dtype=np.float64)
    n = v.shape[0]
    h = np.asarray(hardness, dtype=np.float64).copy()
    h[anchor_idx] = -np.inf
    if not 2 <= n_prime <= n - 1:
        raise ValueError(f"hard pool size must be in [2, {n - 1}], got {n_prime}")
    pool = np.argsort(-h, kind="stable")[:n_prime]
    a = rng.integers(n_prime, size=m)
    b = rng.integers(n_prime - 1, size=m)
    b = b + (b >= a)
    p, q = pool[a], pool[b]
    post = np.asarray(posterior, dtype=np.float64)
    total = post[p] + post[q]
    zero = total <= 0.0
    alpha = np.where(zero, 0.5, post[p] / np.where(zero, 1.0, total))
    vectors = alpha[:, None] * v[p] + (1.0 - alpha[:, None]) * v[q]
    return SyntheticNegatives(vectors, alpha, p, q, int(zero.sum()))


def synthetic_similarities(anchor_z: Tensor, parents: Tensor, plan: MixingPlan,
                           head: ProjectionParams) -> Tensor:
    """Critic values between each anchor and its synthetics, shape ``(n, m)``.

    ``anchor_z`` are projected anchors; ``parents`` are encoder outputs of the
    other view.  Gradients reach the parents through the convex combination,
    not through the pool selection.
    """
    n, m = plan.p.shape
    if m == 0:
        return Tensor(np.zeros((n, 0)))
    synth = ad.matmul(plan.matrix(parents.shape[0]), parents)
    zs = ad.l2_normalize(head(synth))
    za = ad.l2_normalize(anchor_z)
    za_rep = ad.take(za, np.repeat(np.arange(n), m))
    return ad.reshape(ad.sum(za_rep * zs, axis=1), (n, m))
