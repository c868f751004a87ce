"""Transductive and minibatch training loops with a once-fitted beta mixture.

Before the fitting epoch ``E`` the plain InfoNCE loss is used.  At ``E`` the
inter-view similarities are sub-sampled, Min-Max normalized and a beta
mixture is fitted once; its true-negative posterior is frozen and drives the
``weight`` or ``mix`` objective for the remaining epochs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import augment
from .graph import Graph, subgraph
from .mixture import BmmParams, apply_minmax, em_fit_bmm, normalize_minmax, posterior_true
from .nn import ACTIVATIONS, ENCODERS, Adam, Model
from .objectives import (PairSimilarities, compute_weights, loss_infonce, loss_progcl_mix,
                         loss_progcl_weight, mixing_plan, synthetic_similarities)

log = logging.getLogger(__name__)

MODES = ("base", "weight", "mix")
POSTERIOR_MODES = ("frozen-matrix", "frozen-model")
INDUCTIVE_NEGATIVES = ("seeds-only", "all-subgraph-nodes")
FROZEN_MATRIX_MAX_N = 5000
MAX_FIT_RETRIES = 3

# independent random sub-streams derived from the run seed
STREAMS = {"init": 0, "augment": 1, "sampling": 2, "batching": 3, "neighbors": 4}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


@dataclass
class TrainConfig:
    tau: float = 0.5
    lr: float = 0.01
    weight_decay: float = 1e-5
    epochs: int = 200
    hidden_dim: int = 64
    activation: str = "rrelu"
    encoder: str = "gcn2"
    E: int = 100
    w_init: float = 0.05
    I: int = 10
    M_prime: int = 100
    N_prime: int = 16
    m: int = 32
    mode: str = "base"
    posterior: str = "frozen-matrix"
    p_edge_1: float = 0.3
    p_edge_2: float = 0.4
    p_feat_1: float = 0.3
    p_feat_2: float = 0.4
    feature_mask_per_entry: bool = False
    batch_size: int = 256
    neighbor_fanouts: tuple | None = (10, 10, 25)
    inductive_negatives: str = "seeds-only"
    hist_bins: int = 50
    hist_every: int = 0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.posterior not in POSTERIOR_MODES:
            raise ValueError(f"posterior must be one of {POSTERIOR_MODES}")
        if self.inductive_negatives not in INDUCTIVE_NEGATIVES:
            raise ValueError(f"inductive_negatives must be one of {INDUCTIVE_NEGATIVES}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.E < self.epochs:
            raise ValueError(f"fitting epoch E={self.E} must satisfy 0 <= E < epochs={self.epochs}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 < self.w_init < 1.0:
            raise ValueError("w_init must lie in (0, 1)")
        if self.I < 1:
            raise ValueError("I must be >= 1")
        if self.M_prime < 2:
            raise ValueError("M_prime must be >= 2")
        if self.mode == "mix" and (self.N_prime < 2 or self.m < 0):
            raise ValueError("mix mode needs N_prime >= 2 and m >= 0")
        for name in ("p_edge_1", "p_edge_2", "p_feat_1", "p_feat_2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["neighbor_fanouts"] is not None:
            d["neighbor_fanouts"] = list(d["neighbor_fanouts"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("neighbor_fanouts") is not None:
            d["neighbor_fanouts"] = tuple(int(x) for x in d["neighbor_fanouts"])
        return cls(**d)


@dataclass
class FrozenPosterior:
    """Mixture and normalisation captured at the fitting epoch."""

    bmm: BmmParams
    norm_min: float
    norm_max: float
    matrix: np.ndarray | None
    nodes: np.ndarray | None = None

    def evaluate(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
        """(posterior, normalized similarity, clamped count) for current ``raw``."""
        s, clamped = apply_minmax(raw, self.norm_min, self.norm_max)
        p = self.matrix if self.matrix is not None else posterior_true(self.bmm, s)
        return p, s, clamped

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.bmm.lam, self.bmm.alpha, self.bmm.beta,
                    np.array([self.norm_min, self.norm_max, self.bmm.true_component], float)):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.matrix is not None:
            h.update(np.ascontiguousarray(self.matrix).tobytes())
        return h.hexdigest()


@dataclass
class PosteriorStore:
    """Frozen posteriors indexed by batch position (one entry when transductive)."""

    entries: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frozen_bmm(self) -> BmmParams | None:
        return self.entries[0].bmm if 0 in self.entries else None

    @property
    def matrices(self) -> list:
        return [self.entries[k].matrix for k in sorted(self.entries)]

    def checksum(self) -> str:
        return hashlib.sha256("".join(
            self.entries[k].checksum() for k in sorted(self.entries)).encode()).hexdigest()


@dataclass
class TrainResult:
    model: Model
    config: TrainConfig
    records: list
    store: PosteriorStore
    histograms: list
    fit_calls: int
    fallback: bool = False


def _sample_pairs(n: int, m_prime: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``min(m_prime, n-1)`` distinct non-self partners per anchor."""
    k = min(m_prime, n - 1)
    rows = np.repeat(np.arange(n), k)
    cols = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        c = rng.choice(n - 1, size=k, replace=False)
        cols[i] = c + (c >= i)
    return rows, cols.ravel()


def negative_histogram(raw: np.ndarray, labels: np.ndarray, bins: int) -> dict:
    """Counts of Min-Max-normalized negative similarities split by label agreement."""
    n = raw.shape[0]
    off = ~np.eye(n, dtype=bool)
    vals = raw[off]
    same = (labels[:, None] == labels[None, :])[off]
    lo, hi = float(vals.min()), float(vals.max())
    s = (vals - lo) / (hi - lo) if hi > lo else np.zeros_like(vals)
    edges = np.linspace(0.0, 1.0, bins + 1)
    true_counts, _ = np.histogram(s[~same], bins=edges)
    false_counts, _ = np.histogram(s[same], bins=edges)
    return {"edges": edges, "true": true_counts, "false": false_counts,
            "true_mean": float(vals[~same].mean()) if (~same).any() else float("nan"),
            "false_mean": float(vals[same].mean()) if same.any() else float("nan")}


class Trainer:
    """Runs one training job; owns the model, optimiser and random streams.

    ``hardness_fn(p, s)`` computes the per-pair score that is row-normalized
    into weights; it defaults to ``p * s`` and exists as a test hook.
    """

    def __init__(self, in_dim: int, cfg: TrainConfig, hardness_fn=None):
        self.cfg = cfg.validate()
        self.model = Model.init(cfg.encoder, in_dim, cfg.hidden_dim, cfg.activation,
                                stream(cfg.seed, "init"))
        self.opt = Adam(self.model.parameters(), cfg.lr, cfg.weight_decay)
        self.rng_aug = stream(cfg.seed, "augment")
        self.rng_sampling = stream(cfg.seed, "sampling")
        self.store = PosteriorStore()
        self.fit_calls = 0
        self.fit_attempts: dict = {}
        self.fallback = False
        self.hardness_fn = hardness_fn
        self._checksum = None
        self.fixed_nodes = True
        self.last_raw = None

    def _fit(self, raw: np.ndarray, key, nodes, keep_matrix: bool) -> dict | None:
        cfg = self.cfg
        rows, cols = _sample_pairs(raw.shape[0], cfg.M_prime, self.rng_sampling)
        try:
            sample = normalize_minmax(raw[rows, cols])
        except ValueError as exc:
            tries = self.fit_attempts.get(key, 0) + 1
            self.fit_attempts[key] = tries
            log.warning("posterior fit skipped (%s), attempt %d", exc, tries)
            if tries > MAX_FIT_RETRIES:
                warnings.warn("similarity range stayed degenerate; falling back to base loss",
                              RuntimeWarning, stacklevel=3)
                self.fallback = True
            return {"status": "degenerate", "attempt": tries}
        bmm = em_fit_bmm(sample, cfg.w_init, cfg.I)
        self.fit_calls += 1
        s_all, clamped = apply_minmax(raw, sample.norm_min, sample.norm_max)
        matrix = posterior_true(bmm, s_all) if keep_matrix else None
        self.store.entries[key] = FrozenPosterior(bmm, sample.norm_min, sample.norm_max,
                                                  matrix, None if nodes is None else nodes.copy())
        self._checksum = self.store.checksum()
        return {"status": "fitted", "batch": key, "n_samples": int(sample.values.size),
                "norm": [sample.norm_min, sample.norm_max], "bmm": bmm.to_dict()}

    def step(self, g: Graph, epoch: int, key=0, anchors=None, nodes=None) -> tuple[float, str, dict | None]:
        """One optimisation step on ``g``; returns (loss, objective used, fit event)."""
        cfg = self.cfg
        v1 = augment(g, cfg.p_edge_1, cfg.p_feat_1, self.rng_aug, cfg.feature_mask_per_entry)
        v2 = augment(g, cfg.p_edge_2, cfg.p_feat_2, self.rng_aug, cfg.feature_mask_per_entry)
        u = self.model.embed(v1)
        v = self.model.embed(v2)
        if anchors is not None:
            u, v = ad.take(u, anchors), ad.take(v, anchors)
        zu, zv = self.model.head(u), self.model.head(v)
        sims = PairSimilarities.from_projections(zu, zv, cfg.tau)
        raw = sims.inter.data
        self.last_raw = raw

        event = None
        if cfg.mode != "base" and not self.fallback and epoch >= cfg.E and key not in self.store.entries:
            keep = cfg.posterior == "frozen-matrix" and raw.shape[0] <= FROZEN_MATRIX_MAX_N
            if cfg.posterior == "frozen-matrix" and not keep:
                log.warning("n=%d exceeds %d; using frozen-model posteriors",
                            raw.shape[0], FROZEN_MATRIX_MAX_N)
            keep = keep and self.fixed_nodes
            event = self._fit(raw, key, nodes, keep)

        entry = self.store.entries.get(key)
        if entry is None or epoch < cfg.E:
            loss, used = loss_infonce(sims), "base"
        else:
            if entry.nodes is not None and nodes is not None:
                assert np.array_equal(entry.nodes, nodes), "batch composition drifted"
            p, s, _ = entry.evaluate(raw)
            w_uv = self._weights(p, s)
            w_vu = self._weights(p.T, s.T)
            if cfg.mode == "weight":
                loss = loss_progcl_weight(sims, w_uv, w_vu)
            else:
                n_prime = min(cfg.N_prime, raw.shape[0] - 1)
                plan_u = mixing_plan(w_uv.w, p, n_prime, cfg.m, self.rng_sampling)
                plan_v = mixing_plan(w_vu.w, p.T, n_prime, cfg.m, self.rng_sampling)
                synth_u = synthetic_similarities(zu, v, plan_u, self.model.head)
                synth_v = synthetic_similarities(zv, u, plan_v, self.model.head)
                loss = loss_progcl_mix(sims, synth_u, synth_v)
            used = cfg.mode

        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss {loss.item()} at epoch {epoch} ({used})")
        ad.backward(loss)
        self.opt.step()
        if self._checksum is not None:
            assert self.store.checksum() == self._checksum, "frozen posterior was modified"
        return loss.item(), used, event

    def _weights(self, p, s):
        if self.hardness_fn is None:
            return compute_weights(s, p)
        return compute_weights(self.hardness_fn(p, s), 1.0)


def _record(epoch, loss, used, cfg, event, t0, record_time) -> dict:
    rec = {"epoch": epoch, "loss": loss, "mode": cfg.mode, "objective": used}
    if event is not None:
        rec["fit_event"] = event
    if record_time:
        rec["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
    return rec


def train_transductive(g: Graph, cfg: TrainConfig, record_time: bool = False,
                       hardness_fn=None) -> TrainResult:
    """Full-graph training: one step per epoch on two augmented views of ``g``."""
    trainer = Trainer(g.features.shape[1], cfg, hardness_fn)
    records, hists = [], []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        loss, used, event = trainer.step(g, epoch)
        records.append(_record(epoch, loss, used, cfg, event, t0, record_time))
        if g.labels is not None and _want_hist(cfg, epoch):
            hists.append((epoch, negative_histogram(trainer.last_raw, g.labels, cfg.hist_bins)))
    return TrainResult(trainer.model, cfg, records, trainer.store, hists, trainer.fit_calls,
                       trainer.fallback)


def _want_hist(cfg: TrainConfig, epoch: int) -> bool:
    return epoch == cfg.E or (cfg.hist_every > 0 and epoch % cfg.hist_every == 0)


def fixed_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded partition of the nodes into sorted batches, reused every epoch."""
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + batch_size]) for i in range(0, n, batch_size)]


def sample_neighborhood(g: Graph, seeds: np.ndarray, fanouts, rng: np.random.Generator):
    """Layer-wise neighbour sampling with replacement.

    Returns ``(nodes, edges)``: the seeds first, then the other reached nodes
    in ascending order, plus the sampled global edges.  ``fanouts=None``
    returns every node and the whole edge set.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    if fanouts is None:
        rest = np.setdiff1d(np.arange(g.n_nodes), seeds)
        return np.concatenate([seeds, rest]), g.edge_array()
    frontier = seeds
    reached = set(seeds.tolist())
    edges = []
    for fanout in fanouts:
        nxt = []
        for u in frontier:
            nbrs = g.neighbors(u)
            if nbrs.size == 0:
                continue
            picks = nbrs[rng.integers(nbrs.size, size=fanout)]
            edges.extend((int(u), int(w)) for w in picks)
            nxt.extend(picks.tolist())
        frontier = np.unique(np.asarray(nxt, dtype=np.int64))
        reached.update(frontier.tolist())
    rest = np.array(sorted(reached - set(seeds.tolist())), dtype=np.int64)
    nodes = np.concatenate([seeds, rest])
    return nodes, np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def train_inductive(g: Graph, cfg: TrainConfig, record_time: bool = False,
                    hardness_fn=None) -> TrainResult:
    """Minibatch training on sampled subgraphs with one frozen posterior per batch."""
    trainer = Trainer(g.features.shape[1], cfg, hardness_fn)
    batches = fixed_batches(g.n_nodes, min(cfg.batch_size, g.n_nodes),
                            stream(cfg.seed, "batching"))
    rng_nbr = stream(cfg.seed, "neighbors")
    seeds_only = cfg.inductive_negatives == "seeds-only"
    # with all sampled nodes as negatives the node set changes per epoch, so
    # only the frozen model (not a fixed matrix) can be reused
    trainer.fixed_nodes = seeds_only
    records = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses, used, events = [], "base", []
        for k, seeds in enumerate(batches):
            nodes, edges = sample_neighborhood(g, seeds, cfg.neighbor_fanouts, rng_nbr)
            sub = subgraph(g, nodes, edges)
            anchors = np.arange(seeds.size) if seeds_only else None
            loss, used, event = trainer.step(sub, epoch, key=k, anchors=anchors,
                                             nodes=seeds if seeds_only else None)
            losses.append(loss)
            if event is not None:
                events.append(event)
        rec = _record(epoch, float(np.mean(losses)), used, cfg, None, t0, record_time)
        if events:
            rec["fit_event"] = {"status": "fitted" if len(trainer.store) else "degenerate",
                                "batches": events}
        records.append(rec)
    return TrainResult(trainer.model, cfg, records, trainer.store, [], trainer.fit_calls,
                       trainer.fallback)
