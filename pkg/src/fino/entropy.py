"""Policy entropy via Gaussian-mixture EM fits on sampled actions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .nn import ContractError

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class EmConfig:
    max_iterations: int = 100
    tol: float = 1e-6
    jitter: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1 or self.tol <= 0 or self.jitter <= 0:
            raise ContractError("EM config values must be positive")


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)
    log_likelihoods: list = field(default_factory=list)  # mean per-sample, one per E-step
    n_iter: int = 0

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_prob(self, x):
        x = np.atleast_2d(x)
        comp = _component_log_pdf(x[None], self.means[None], self.covariances[None])[0]
        with np.errstate(divide="ignore"):
            return logsumexp(comp + np.log(self.weights)[:, None], axis=0)

    def responsibilities(self, x):
        x = np.atleast_2d(x)
        comp = _component_log_pdf(x[None], self.means[None], self.covariances[None])[0]
        with np.errstate(divide="ignore"):
            joint = comp + np.log(self.weights)[:, None]
        return np.exp(joint - logsumexp(joint, axis=0)).T  # (N, K)


def _component_log_pdf(x, means, covs):
    """log N(x_n | mu_k, Sigma_k) for stacked problems: (S,N,d),(S,K,d),(S,K,d,d) -> (S,K,N)."""
    d = x.shape[-1]
    chol = np.linalg.cholesky(covs)  # (S,K,d,d)
    diff = x[:, None, :, :] - means[:, :, None, :]  # (S,K,N,d)
    # L y = diff^T  ->  maha = |y|^2
    y = np.linalg.solve(chol, np.swapaxes(diff, -1, -2))  # (S,K,d,N)
    maha = np.sum(y * y, axis=-2)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)  # (S,K)
    return -0.5 * (d * _LOG_2PI + logdet[..., None] + maha)


def _kmeanspp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
    return np.asarray(centers)


def fit_em_batch(samples, k: int, config: EmConfig | None = None) -> list[GmmModel]:
    """Independent EM fits for a stack of sample sets of shape (S, N, d)."""
    config = config or EmConfig()
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 3:
        raise ContractError("expected samples of shape (S, N, d)")
    s_count, n, d = x.shape
    if d < 1 or k < 1:
        raise ContractError("need d >= 1 and K >= 1")
    if n < k:
        raise ContractError(f"need at least K={k} samples, got {n}")
    rng = np.random.default_rng(config.seed)
    eye = np.eye(d)

    means = np.stack([_kmeanspp(x[i], k, rng) for i in range(s_count)])
    centred = x - x.mean(axis=1, keepdims=True)
    pooled = np.einsum("snd,sne->sde", centred, centred) / n + config.jitter * eye
    covs = np.repeat(pooled[:, None], k, axis=1)
    log_w = np.full((s_count, k), -np.log(k))

    active = np.ones(s_count, dtype=bool)
    traces = [[] for _ in range(s_count)]
    iters = np.zeros(s_count, dtype=int)
    for _ in range(config.max_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = x[idx]
        # E-step
        joint = _component_log_pdf(xa, means[idx], covs[idx]) + log_w[idx][..., None]
        norm = logsumexp(joint, axis=1)  # (S,N)
        resp = np.exp(joint - norm[:, None, :])  # (S,K,N)
        ll = norm.mean(axis=1)
        # M-step
        nk = resp.sum(axis=2)  # (S,K)
        safe = np.maximum(nk, 1e-300)
        mu = np.einsum("skn,snd->skd", resp, xa) / safe[..., None]
        diff = xa[:, None] - mu[:, :, None]
        cov = np.einsum("skn,sknd,skne->skde", resp, diff, diff) / safe[..., None, None]
        cov = cov + config.jitter * eye
        # components that lost all mass keep their previous parameters
        dead = nk <= 1e-12
        mu = np.where(dead[..., None], means[idx], mu)
        cov = np.where(dead[..., None, None], covs[idx], cov)
        means[idx], covs[idx] = mu, cov
        with np.errstate(divide="ignore"):
            log_w[idx] = np.log(nk / n)
        for j, i in enumerate(idx):
            traces[i].append(float(ll[j]))
            iters[i] += 1
            if len(traces[i]) > 1 and abs(traces[i][-1] - traces[i][-2]) < config.tol:
                active[i] = False
    return [
        GmmModel(np.exp(log_w[i]), means[i].copy(), covs[i].copy(), traces[i], int(iters[i]))
        for i in range(s_count)
    ]


def fit_em(samples, k: int = 3, config: EmConfig | None = None) -> GmmModel:
    """Fit a K-component full-covariance GMM to an (N, d) sample set by EM.

    Means are seeded k-means++ style, covariances start at the pooled sample
    covariance and every M-step adds ``config.jitter`` to the diagonal, so
    identical samples give a valid (jitter * I) fit instead of an error.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return fit_em_batch(x[None], k, config)[0]


def gmm_entropy(model: GmmModel) -> float:
    """Mixture entropy surrogate: sum_k pi_k (-log pi_k + 0.5 log((2 pi e)^d |Sigma_k|))."""
    d = model.dim
    total = 0.0
    for w, cov in zip(model.weights, model.covariances):
        if w <= 0:
            continue
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0 or np.min(np.linalg.eigvalsh(0.5 * (cov + cov.T))) <= 0:
            raise ContractError("covariance is not positive definite")
        total += w * (-np.log(w) + 0.5 * (d * np.log(2.0 * np.pi * np.e) + logdet))
    return float(total)


def estimate_policy_entropy(policy, states, actions_per_state: int = 200, k: int = 3,
                            config: EmConfig | None = None, rng=None) -> float:
    """Average GMM entropy of ``policy(s, z)`` over a batch of states.

    ``policy`` is any callable mapping (states, base noise) rows to actions,
    e.g. a OneStepPolicy. Fresh noise is drawn for every action.
    """
    config = config or EmConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if len(states) == 0:
        raise ContractError("empty state batch")
    if actions_per_state < k:
        raise ContractError("actions_per_state must be >= K")
    m = actions_per_state
    action_dim = getattr(policy, "action_dim", None)
    s_rep = np.repeat(states, m, axis=0)
    if action_dim is None:
        raise ContractError("policy must expose action_dim")
    z = rng.standard_normal((len(s_rep), action_dim))
    actions = np.asarray(policy(s_rep, z)).reshape(len(states), m, action_dim)
    models = fit_em_batch(actions, k, config)
    return float(np.mean([gmm_entropy(g) for g in models]))
