"""Two-component beta and Gaussian mixtures over normalized similarities.

The beta mixture is fitted by EM whose M-step uses the method of moments on
responsibility-weighted means and variances.  That M-step is not a true
likelihood maximiser, so the fit stops (and keeps the previous parameters) as
soon as an iteration fails to improve the log-likelihood by ``tol``; the
recorded trace is therefore non-decreasing.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp, xlog1py, xlogy
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_is_fitted

log = logging.getLogger(__name__)

EPS = 1e-4
VAR_FLOOR = 1e-6
SHAPE_MIN, SHAPE_MAX = 0.1, 100.0
TIE_TOL = 1e-6
MIN_PER_COMPONENT = 2


@dataclass
class SimilaritySample:
    values: np.ndarray
    norm_min: float
    norm_max: float
    eps: float = EPS
    source: str = "inter_view"

    def transform(self, raw) -> tuple[np.ndarray, int]:
        """Map later similarities through the frozen affine map; returns (s, n_clamped)."""
        return apply_minmax(raw, self.norm_min, self.norm_max, self.eps)


def apply_minmax(raw, lo: float, hi: float, eps: float = EPS) -> tuple[np.ndarray, int]:
    s = (np.asarray(raw, dtype=np.float64) - lo) / (hi - lo)
    outside = int(np.count_nonzero((s < 0.0) | (s > 1.0)))
    return np.clip(s, eps, 1.0 - eps), outside


def normalize_minmax(raw, eps: float = EPS) -> SimilaritySample:
    raw = np.asarray(raw, dtype=np.float64).ravel()
    if raw.size < 2:
        raise ValueError("need at least two similarities to normalize")
    lo, hi = float(raw.min()), float(raw.max())
    if not hi > lo:
        raise ValueError("all similarities are equal; Min-Max range is degenerate")
    s, _ = apply_minmax(raw, lo, hi, eps)
    return SimilaritySample(s, lo, hi, eps)


def beta_logpdf(s, a, b):
    s = np.asarray(s, dtype=np.float64)
    return (gammaln(a + b) - gammaln(a) - gammaln(b)
            + xlogy(a - 1.0, s) + xlog1py(b - 1.0, -s))


def beta_pdf(s, alpha: float, beta: float):
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any((s_arr <= 0.0) | (s_arr >= 1.0)):
        raise ValueError("beta_pdf is evaluated on the open interval (0, 1)")
    if alpha <= 0 or beta <= 0:
        raise ValueError("beta shape parameters must be positive")
    out = np.exp(beta_logpdf(s_arr, alpha, beta))
    return float(out) if np.ndim(out) == 0 else out


def gauss_logpdf(s, mu, var):
    s = np.asarray(s, dtype=np.float64)
    return -0.5 * (np.log(2.0 * np.pi * var) + (s - mu) ** 2 / var)


@dataclass
class BmmParams:
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    true_component: int = 0
    loglik_trace: list = field(default_factory=list)
    degenerate: bool = False
    rule_disagreement: bool = False

    @property
    def means(self) -> np.ndarray:
        return self.alpha / (self.alpha + self.beta)

    def component_logpdf(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)[..., None]
        return beta_logpdf(s, self.alpha, self.beta)

    def to_dict(self) -> dict:
        return {"lambda": self.lam.tolist(), "alpha": self.alpha.tolist(),
                "beta": self.beta.tolist(), "true_component": int(self.true_component),
                "loglik_trace": [float(x) for x in self.loglik_trace],
                "degenerate": bool(self.degenerate),
                "rule_disagreement": bool(self.rule_disagreement)}

    @classmethod
    def from_dict(cls, d: dict) -> "BmmParams":
        return cls(np.asarray(d["lambda"], float), np.asarray(d["alpha"], float),
                   np.asarray(d["beta"], float), int(d.get("true_component", 0)),
                   list(d.get("loglik_trace", [])), bool(d.get("degenerate", False)),
                   bool(d.get("rule_disagreement", False)))


@dataclass
class GmmParams:
    lam: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    true_component: int = 0
    loglik_trace: list = field(default_factory=list)
    degenerate: bool = False
    rule_disagreement: bool = False

    @property
    def means(self) -> np.ndarray:
        return self.mu

    def component_logpdf(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)[..., None]
        return gauss_logpdf(s, self.mu, self.sigma2)

    def to_dict(self) -> dict:
        return {"lambda": self.lam.tolist(), "mu": self.mu.tolist(),
                "sigma2": self.sigma2.tolist(), "true_component": int(self.true_component),
                "loglik_trace": [float(x) for x in self.loglik_trace],
                "degenerate": bool(self.degenerate),
                "rule_disagreement": bool(self.rule_disagreement)}


def _joint_log(params, s) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(params.lam) + params.component_logpdf(s)


def log_likelihood(params, s) -> float:
    return float(np.sum(logsumexp(_joint_log(params, s), axis=-1)))


def responsibilities(params, s) -> np.ndarray:
    """Posterior p(c | s) for both components, shape ``s.shape + (2,)``."""
    joint = _joint_log(params, s)
    return np.exp(joint - logsumexp(joint, axis=-1, keepdims=True))


def posterior_true(params, s):
    """Probability that a pair with normalized similarity ``s`` is a true negative."""
    post = responsibilities(params, s)[..., params.true_component]
    return float(post) if np.ndim(post) == 0 else post


def _beta_from_moments(mean: float, var: float) -> tuple[float, float, bool]:
    degenerate = False
    if not var >= VAR_FLOOR:
        var, degenerate = VAR_FLOOR, True
    mean = min(max(mean, EPS), 1.0 - EPS)
    a = mean * (mean * (1.0 - mean) / var - 1.0)
    b = a * (1.0 - mean) / mean
    if not (SHAPE_MIN <= a <= SHAPE_MAX and SHAPE_MIN <= b <= SHAPE_MAX):
        degenerate = True
        a = min(max(a, SHAPE_MIN), SHAPE_MAX)
        b = min(max(b, SHAPE_MIN), SHAPE_MAX)
    return a, b, degenerate


def _weighted_moments(s: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Per-component (weight, mean, variance) from responsibilities ``r``."""
    w = r.sum(axis=0)
    safe = np.where(w > 0, w, 1.0)
    mean = (r * s[:, None]).sum(axis=0) / safe
    var = (r * (s[:, None] - mean) ** 2).sum(axis=0) / safe
    return w, mean, var


def _split_init(s: np.ndarray, w_init: float) -> np.ndarray:
    """Hard responsibilities: below the (1 - w_init)-quantile -> component 0."""
    cut = np.quantile(s, 1.0 - w_init)
    upper = s > cut
    if upper.sum() < MIN_PER_COMPONENT or (~upper).sum() < MIN_PER_COMPONENT:
        order = np.argsort(s, kind="stable")
        k = min(max(int(round(w_init * s.size)), MIN_PER_COMPONENT),
                s.size - MIN_PER_COMPONENT)
        upper = np.zeros(s.size, dtype=bool)
        upper[order[s.size - k:]] = True
    r = np.zeros((s.size, 2))
    r[~upper, 0] = 1.0
    r[upper, 1] = 1.0
    return r


def _check_fit_inputs(sample, w_init: float, iters: int) -> np.ndarray:
    s = sample.values if isinstance(sample, SimilaritySample) else np.asarray(sample, float)
    s = np.ravel(s)
    if s.size < 2 * MIN_PER_COMPONENT:
        raise ValueError(f"need at least {2 * MIN_PER_COMPONENT} similarities, got {s.size}")
    if not 0.0 < w_init < 1.0:
        raise ValueError("w_init must lie in (0, 1)")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    return s


def _bmm_m_step(s, r, prev: BmmParams | None) -> BmmParams:
    w, mean, var = _weighted_moments(s, r)
    alpha, beta = np.empty(2), np.empty(2)
    degenerate = False
    for c in range(2):
        if w[c] < 1e-8:
            degenerate = True
            if prev is not None:
                alpha[c], beta[c] = prev.alpha[c], prev.beta[c]
            else:
                alpha[c] = beta[c] = 1.0
            continue
        alpha[c], beta[c], deg = _beta_from_moments(mean[c], var[c])
        degenerate |= deg
    lam = w / s.size
    if lam.min() < 1e-6:
        degenerate = True
        lam = np.maximum(lam, 1e-6)
        lam /= lam.sum()
    return BmmParams(lam, alpha, beta, degenerate=degenerate)


def _gmm_m_step(s, r, prev: GmmParams | None) -> GmmParams:
    w, mean, var = _weighted_moments(s, r)
    degenerate = False
    for c in range(2):
        if w[c] < 1e-8:
            degenerate = True
            mean[c] = prev.mu[c] if prev is not None else float(np.mean(s))
            var[c] = prev.sigma2[c] if prev is not None else float(np.var(s))
    if np.any(var < VAR_FLOOR):
        degenerate = True
        var = np.maximum(var, VAR_FLOOR)
    lam = w / s.size
    if lam.min() < 1e-6:
        degenerate = True
        lam = np.maximum(lam, 1e-6)
        lam /= lam.sum()
    return GmmParams(lam, mean, var, degenerate=degenerate)


def _run_em(s, w_init, iters, tol, m_step):
    params = m_step(s, _split_init(s, w_init), None)
    ll = log_likelihood(params, s)
    trace = [ll]
    degenerate = params.degenerate
    for _ in range(iters):
        new = m_step(s, responsibilities(params, s), params)
        new_ll = log_likelihood(new, s)
        if not new_ll >= ll:
            log.debug("EM step lowered log-likelihood (%.6g -> %.6g); stopping", ll, new_ll)
            break
        degenerate |= new.degenerate
        params, improvement, ll = new, new_ll - ll, new_ll
        trace.append(ll)
        if improvement < tol:
            break
    params.loglik_trace = trace
    params.degenerate = degenerate
    return identify_true_component(params)


def em_fit_bmm(sample, w_init: float = 0.05, iters: int = 10, tol: float = 1e-6) -> BmmParams:
    """Fit a two-component beta mixture.

    Component 1 starts on the top ``w_init`` fraction of the sample (the
    putative false negatives) with mixing weight ``w_init``; component 0 takes
    the rest.  ``true_component`` is set on the returned parameters.
    """
    s = _check_fit_inputs(sample, w_init, iters)
    if s.min() <= 0.0 or s.max() >= 1.0:
        raise ValueError("beta mixture needs similarities inside (0, 1); normalize first")
    return _run_em(s, w_init, iters, tol, _bmm_m_step)


def em_fit_gmm(sample, w_init: float = 0.05, iters: int = 10, tol: float = 1e-6) -> GmmParams:
    """Two-component Gaussian EM with the same initialisation as :func:`em_fit_bmm`."""
    s = _check_fit_inputs(sample, w_init, iters)
    return _run_em(s, w_init, iters, tol, _gmm_m_step)


def identify_true_component(params):
    """Return a copy with ``true_component`` set.

    The component with the smaller mean is the true-negative one.  When the
    means tie, the larger mixing weight decides, then index 0.  The verdict of
    the larger-weight rule is compared and disagreement is flagged.
    """
    out = copy.copy(params)
    means = np.asarray(params.means)
    lam = np.asarray(params.lam)
    mean_rule = None if abs(means[0] - means[1]) <= TIE_TOL else int(np.argmin(means))
    lam_rule = None if abs(lam[0] - lam[1]) <= 1e-12 else int(np.argmax(lam))
    if mean_rule is not None:
        out.true_component = mean_rule
    elif lam_rule is not None:
        out.true_component = lam_rule
    else:
        out.true_component = 0
    out.rule_disagreement = (mean_rule is not None and lam_rule is not None
                             and mean_rule != lam_rule)
    log.debug("true component: mean rule=%s, weight rule=%s", mean_rule, lam_rule)
    return out


class _MixtureBase(DensityMixin, BaseEstimator):
    _fit_fn = None

    def __init__(self, w_init: float = 0.05, max_iter: int = 10, tol: float = 1e-6,
                 eps: float = EPS):
        self.w_init = w_init
        self.max_iter = max_iter
        self.tol = tol
        self.eps = eps

    def fit(self, X, y=None):
        """Min-Max normalize the raw similarities ``X`` and fit the mixture."""
        raw = np.asarray(X, dtype=np.float64).ravel()
        self.sample_ = normalize_minmax(raw, self.eps)
        self.params_ = type(self)._fit_fn(self.sample_, self.w_init, self.max_iter, self.tol)
        self.true_component_ = self.params_.true_component
        self.n_clamped_ = 0
        return self

    def _normalize(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        s, outside = self.sample_.transform(X)
        self.n_clamped_ += outside
        return s

    def predict_proba(self, X) -> np.ndarray:
        """Responsibilities for both components (columns in component order)."""
        s = self._normalize(np.ravel(X))
        return responsibilities(self.params_, s)

    def predict(self, X) -> np.ndarray:
        """1 for pairs more likely to be true negatives, 0 otherwise."""
        return (self.posterior_true(X) >= 0.5).astype(np.int64)

    def posterior_true(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, self.true_component_]

    def score_samples(self, X) -> np.ndarray:
        """Log density in normalized-similarity coordinates."""
        s = self._normalize(np.ravel(X))
        return logsumexp(_joint_log(self.params_, s), axis=-1)

    def score(self, X, y=None) -> float:
        return float(np.mean(self.score_samples(X)))


class BetaMixture(_MixtureBase):
    """Two-component beta mixture with a frozen Min-Max normalisation frame."""

    _fit_fn = staticmethod(em_fit_bmm)


class GaussianMixture(_MixtureBase):
    """Gaussian counterpart of :class:`BetaMixture`, for ablations."""

    _fit_fn = staticmethod(em_fit_gmm)
