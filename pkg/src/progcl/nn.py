"""Encoders, projection head, cosine critic, Adam and checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import MEAN_AGG, SYM_NORM, Graph, PropagationOperator

ACTIVATIONS = ("prelu", "rrelu", "elu", "relu", "linear")
ENCODERS = ("gcn2", "sage_gcn3")

# RReLU is used in its deterministic form: the mean of its default slope range.
RRELU_SLOPE = (1.0 / 8.0 + 1.0 / 3.0) / 2.0
PRELU_INIT = 0.25
CHECKPOINT_VERSION = 1

critic_stats = {"zero_norm": 0}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def activate(x: Tensor, kind: str, slope: Tensor | None = None) -> Tensor:
    if kind == "prelu":
        return ad.prelu(x, slope)
    if kind == "rrelu":
        return ad.leaky_relu(x, RRELU_SLOPE)
    if kind == "elu":
        return ad.elu(x)
    if kind == "relu":
        return ad.relu(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


@dataclass
class EncoderParams:
    """Layer weights of a graph encoder.

    ``gcn2`` maps ``in_dim -> 2*hidden -> hidden``; ``sage_gcn3`` has three
    layers of width ``hidden``, each consuming ``[mean-aggregate ; self]``.
    """

    kind: str
    activation: str
    weights: list[Tensor]
    slopes: list[Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, kind: str, in_dim: int, hidden: int, activation: str,
             rng: np.random.Generator) -> "EncoderParams":
        if kind == "gcn2":
            dims = [(in_dim, 2 * hidden), (2 * hidden, hidden)]
        elif kind == "sage_gcn3":
            dims = [(2 * in_dim, hidden), (2 * hidden, hidden), (2 * hidden, hidden)]
        else:
            raise ValueError(f"unknown encoder {kind!r}; expected one of {ENCODERS}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        weights = [Tensor(glorot(rng, a, b), requires_grad=True) for a, b in dims]
        slopes = []
        if activation == "prelu":
            slopes = [Tensor(np.full(1, PRELU_INIT), requires_grad=True) for _ in dims]
        return cls(kind, activation, weights, slopes)

    @property
    def in_dim(self) -> int:
        d = self.weights[0].shape[0]
        return d if self.kind == "gcn2" else d // 2

    def named(self) -> dict[str, Tensor]:
        out = {f"encoder.W{i + 1}": w for i, w in enumerate(self.weights)}
        out.update({f"encoder.prelu{i + 1}": s for i, s in enumerate(self.slopes)})
        return out


def forward_encoder(g: Graph, params: EncoderParams, features=None) -> Tensor:
    x = g.features if features is None else features
    x = ad.as_tensor(x)
    if x.shape != (g.n_nodes, params.in_dim):
        raise ValueError(
            f"features of shape {x.shape} do not match encoder input "
            f"({g.n_nodes}, {params.in_dim})")
    slopes = params.slopes or [None] * len(params.weights)
    if params.kind == "gcn2":
        op = PropagationOperator.from_graph(g, SYM_NORM).matrix
        h = x
        for w, a in zip(params.weights, slopes):
            h = activate(ad.matmul(op, h) @ w, params.activation, a)
        return h
    op = PropagationOperator.from_graph(g, MEAN_AGG).matrix
    h = x
    for w, a in zip(params.weights, slopes):
        h = activate(ad.concat([ad.matmul(op, h), h], axis=1) @ w, params.activation, a)
    return h


@dataclass
class ProjectionParams:
    """Two-layer perceptron ``g(h) = W2 elu(W1 h + b1) + b2``."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, hidden: int | None = None,
             out: int | None = None) -> "ProjectionParams":
        hidden = hidden or dim
        out = out or dim
        return cls(Tensor(glorot(rng, dim, hidden), requires_grad=True),
                   Tensor(np.zeros(hidden), requires_grad=True),
                   Tensor(glorot(rng, hidden, out), requires_grad=True),
                   Tensor(np.zeros(out), requires_grad=True))

    @classmethod
    def identity(cls, dim: int) -> "ProjectionParams":
        """Pass-through head, used to evaluate the critic on raw embeddings."""
        return _IdentityProjection(dim)

    def __call__(self, h) -> Tensor:
        h = ad.as_tensor(h)
        return ad.elu(h @ self.W1 + self.b1) @ self.W2 + self.b2

    def named(self) -> dict[str, Tensor]:
        return {"proj.W1": self.W1, "proj.b1": self.b1, "proj.W2": self.W2, "proj.b2": self.b2}


class _IdentityProjection(ProjectionParams):
    def __init__(self, dim: int):
        eye = Tensor(np.eye(dim))
        zero = Tensor(np.zeros(dim))
        super().__init__(eye, zero, eye, zero)

    def __call__(self, h) -> Tensor:
        return ad.as_tensor(h)


def critic(u, v, proj: ProjectionParams) -> float:
    """Cosine similarity of the projected vectors; 0.0 if either projects to zero."""
    zu = proj(np.atleast_2d(np.asarray(u, dtype=np.float64))).data.ravel()
    zv = proj(np.atleast_2d(np.asarray(v, dtype=np.float64))).data.ravel()
    nu, nv = np.linalg.norm(zu), np.linalg.norm(zv)
    if nu < 1e-12 or nv < 1e-12:
        critic_stats["zero_norm"] += 1
        return 0.0
    return float(np.clip(zu @ zv / (nu * nv), -1.0, 1.0))


def cosine_matrix(za: Tensor, zb: Tensor) -> Tensor:
    """All-pairs cosine similarity between rows of two projected matrices."""
    return ad.l2_normalize(za) @ ad.l2_normalize(zb).T


class Model:
    """Encoder ``f`` plus projection head ``g``."""

    def __init__(self, encoder: EncoderParams, head: ProjectionParams):
        self.encoder = encoder
        self.head = head

    @classmethod
    def init(cls, kind: str, in_dim: int, hidden: int, activation: str,
             rng: np.random.Generator) -> "Model":
        enc = EncoderParams.init(kind, in_dim, hidden, activation, rng)
        return cls(enc, ProjectionParams.init(hidden, rng))

    def embed(self, g: Graph, features=None) -> Tensor:
        return forward_encoder(g, self.encoder, features)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.named(), **self.head.named()}


def adam_step(params: dict, grads: dict, state: dict, lr: float, weight_decay: float = 0.0,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update with the L2 penalty folded into the gradient.

    ``params`` and ``grads`` map names to arrays.  Returns new ``(params, state)``;
    inputs are not modified.
    """
    b1, b2 = betas
    t = state.get("t", 0) + 1
    m_old, v_old = state.get("m", {}), state.get("v", {})
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            if name in m_old:
                m_new[name], v_new[name] = m_old[name], v_old[name]
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        g = g + weight_decay * p
        m = b1 * m_old.get(name, 0.0) + (1 - b1) * g
        v = b2 * v_old.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, {"t": t, "m": m_new, "v": v_new}


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.state: dict = {}

    def step(self) -> None:
        values = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        new, self.state = adam_step(values, grads, self.state, self.lr, self.weight_decay,
                                    self.betas, self.eps)
        for k, t in self.params.items():
            t.data = new[k]
            t.grad = None


def save_checkpoint(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {k: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
                   for k, t in params.items()},
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    params = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
              for k, v in payload["params"].items()}
    return params, payload.get("meta", {})
