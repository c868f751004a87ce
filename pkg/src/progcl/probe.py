"""Linear-probe evaluation of frozen embeddings."""
from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import accuracy_score, f1_score
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted, validate_data


MAX_REDRAWS = 100


class LinearProbe(ClassifierMixin, BaseEstimator):
    """L2-regularized multinomial logistic regression.

    Minimises mean cross-entropy plus ``0.5 * l2 * ||W||^2`` (bias not
    penalised) with full-batch L-BFGS until the gradient norm drops below
    ``gtol`` or ``max_iter`` steps.

    Parameters
    ----------
    l2 : float
        Ridge penalty on the weight matrix.
    normalize : bool
        Unit-normalize embedding rows before fitting and predicting.
    """

    def __init__(self, l2: float = 1e-3, normalize: bool = True, gtol: float = 1e-5,
                 max_iter: int = 10_000):
        self.l2 = l2
        self.normalize = normalize
        self.gtol = gtol
        self.max_iter = max_iter

    def _prep(self, X):
        if not self.normalize:
            return X
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        return X / np.where(norms > 0, norms, 1.0)

    def fit(self, X, y):
        X, y = validate_data(self, X, y)
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise ValueError("training split contains only one class")
        X = self._prep(X)
        n, d = X.shape
        k = self.classes_.size
        onehot = (y[:, None] == self.classes_[None, :]).astype(np.float64)

        def objective(theta):
            W = theta[:d * k].reshape(d, k)
            b = theta[d * k:]
            logp = log_softmax(X @ W + b, axis=1)
            loss = -np.sum(onehot * logp) / n + 0.5 * self.l2 * np.sum(W * W)
            diff = (np.exp(logp) - onehot) / n
            gW = X.T @ diff + self.l2 * W
            return loss, np.concatenate([gW.ravel(), diff.sum(axis=0)])

        res = minimize(objective, np.zeros(d * k + k), jac=True, method="L-BFGS-B",
                       options={"gtol": self.gtol, "maxiter": self.max_iter})
        self.coef_ = res.x[:d * k].reshape(d, k)
        self.intercept_ = res.x[d * k:]
        self.n_iter_ = int(res.nit)
        return self

    def _scores(self, X):
        check_is_fitted(self, "coef_")
        X = self._prep(validate_data(self, X, reset=False))
        return X @ self.coef_ + self.intercept_

    def decision_function(self, X):
        scores = self._scores(X)
        # binary convention: positive margin favours classes_[1]
        return scores[:, 1] - scores[:, 0] if scores.shape[1] == 2 else scores

    def predict_proba(self, X):
        return np.exp(log_softmax(self._scores(X), axis=1))

    def predict(self, X):
        scores = self._scores(X)
        return self.classes_[np.argmax(scores, axis=1)]


def random_split(n: int, train_frac: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_train = max(2, int(round(train_frac * n)))
    train = np.zeros(n, dtype=bool)
    train[perm[:n_train]] = True
    return train, ~train


def linear_probe(embeddings, labels, split=None, l2: float = 1e-3, runs: int = 20,
                 train_frac: float = 0.1, seed: int = 0, normalize: bool = True) -> dict:
    """Accuracy and micro-F1 of a linear probe, mean and std over ``runs``.

    ``split`` is an optional ``(train_mask, test_mask)`` pair reused for every
    run; otherwise each run draws a fresh random split.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    accs, f1s = [], []
    for _ in range(runs):
        if split is not None:
            train, test = split
        else:
            # tiny training fractions can miss a class; redraw a bounded number of times
            for _ in range(MAX_REDRAWS):
                train, test = random_split(len(y), train_frac, rng)
                if np.unique(y[train]).size > 1:
                    break
        clf = LinearProbe(l2=l2, normalize=normalize).fit(X[train], y[train])
        pred = clf.predict(X[test])
        accs.append(accuracy_score(y[test], pred))
        f1s.append(f1_score(y[test], pred, average="micro"))
    return {"acc_mean": float(np.mean(accs)), "acc_std": float(np.std(accs)),
            "f1_mean": float(np.mean(f1s)), "f1_std": float(np.std(f1s)),
            "runs": int(runs)}
