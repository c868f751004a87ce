"""Scikit-learn style wrapper around the training loops."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .graph import Graph
from .training import TrainConfig, train_inductive, train_transductive


class ProGCL(TransformerMixin, BaseEstimator):
    """Contrastive node-embedding estimator.

    ``fit`` takes a :class:`~progcl.graph.Graph` and trains the encoder;
    ``transform`` embeds a graph with the trained encoder.  Hyperparameters
    mirror :class:`~progcl.training.TrainConfig`; ``inductive`` selects the
    minibatch loop with neighbour sampling.

    Attributes
    ----------
    model_ : Model
    records_ : list of dict
        One metrics record per epoch.
    store_ : PosteriorStore
    histograms_ : list of (epoch, dict)
    fit_calls_ : int
    fallback_ : bool
        True if the mixture fit failed repeatedly and training fell back to
        the base loss.
    """

    def __init__(self, mode="base", tau=0.5, lr=0.01, weight_decay=1e-5, epochs=200,
                 hidden_dim=64, activation="rrelu", encoder="gcn2", E=100, w_init=0.05,
                 I=10, M_prime=100, N_prime=16, m=32, posterior="frozen-matrix",
                 p_edge_1=0.3, p_edge_2=0.4, p_feat_1=0.3, p_feat_2=0.4,
                 feature_mask_per_entry=False, batch_size=256, neighbor_fanouts=(10, 10, 25),
                 inductive_negatives="seeds-only", hist_bins=50, hist_every=0, seed=0,
                 inductive=False):
        self.mode = mode
        self.tau = tau
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.hidden_dim = hidden_dim
        self.activation = activation
        self.encoder = encoder
        self.E = E
        self.w_init = w_init
        self.I = I
        self.M_prime = M_prime
        self.N_prime = N_prime
        self.m = m
        self.posterior = posterior
        self.p_edge_1 = p_edge_1
        self.p_edge_2 = p_edge_2
        self.p_feat_1 = p_feat_1
        self.p_feat_2 = p_feat_2
        self.feature_mask_per_entry = feature_mask_per_entry
        self.batch_size = batch_size
        self.neighbor_fanouts = neighbor_fanouts
        self.inductive_negatives = inductive_negatives
        self.hist_bins = hist_bins
        self.hist_every = hist_every
        self.seed = seed
        self.inductive = inductive

    def config(self) -> TrainConfig:
        params = self.get_params()
        params.pop("inductive")
        return TrainConfig.from_dict(params).validate()

    def fit(self, X: Graph, y=None):
        if not isinstance(X, Graph):
            raise TypeError(f"ProGCL.fit expects a Graph, got {type(X).__name__}")
        run = train_inductive if self.inductive else train_transductive
        res = run(X, self.config())
        self.model_ = res.model
        self.records_ = res.records
        self.store_ = res.store
        self.histograms_ = res.histograms
        self.fit_calls_ = res.fit_calls
        self.fallback_ = res.fallback
        self.n_features_in_ = X.features.shape[1]
        return self

    def transform(self, X: Graph) -> np.ndarray:
        check_is_fitted(self, "model_")
        if X.features.shape[1] != self.n_features_in_:
            raise ValueError(f"graph has {X.features.shape[1]} features, "
                             f"encoder expects {self.n_features_in_}")
        return self.model_.embed(X).data.copy()
