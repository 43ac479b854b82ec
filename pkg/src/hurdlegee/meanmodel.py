"""Mean functions, cell probabilities, variances and Jacobians of both pieces.

Presence: ``mu = P(Y = 0 | x) = logistic(alpha + x'beta)``, so a positive
coefficient raises the probability of a zero score.

Severity (cumulative logit, ``L`` levels, ``L - 1`` increasing cutpoints):
``mu_l = P(W_S <= l | x) = logistic(alpha_l + gamma * x'beta)`` and cell
probabilities ``pi_l = mu_l - mu_{l-1}`` with ``mu_0 = 0``, ``mu_L = 1``.
Severity rows are stacked observation-major: the ``L`` indicator rows of an
observation are contiguous.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, NonmonotoneCutpoints


def logistic(u):
    """Overflow-safe ``exp(u) / (1 + exp(u))``."""
    return expit(u)


@dataclass(frozen=True)
class PresenceParams:
    alpha: float
    beta: np.ndarray

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "beta", beta)
        if not (np.isfinite(self.alpha) and np.all(np.isfinite(beta))):
            raise ValueError("presence parameters must be finite")

    @property
    def theta(self) -> np.ndarray:
        return np.r_[self.alpha, self.beta]

    @classmethod
    def from_theta(cls, theta) -> "PresenceParams":
        return cls(float(theta[0]), np.asarray(theta[1:], dtype=float))


@dataclass(frozen=True)
class SeverityParams:
    cutpoints: np.ndarray
    beta: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        cut = np.atleast_1d(np.asarray(self.cutpoints, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "cutpoints", cut)
        object.__setattr__(self, "beta", beta)
        if np.any(np.diff(cut) <= 0):
            raise NonmonotoneCutpoints(f"cutpoints must be strictly increasing, got {cut}")

    @property
    def n_levels(self) -> int:
        return len(self.cutpoints) + 1

    @property
    def theta(self) -> np.ndarray:
        return np.r_[self.cutpoints, self.beta]

    @classmethod
    def from_theta(cls, theta, n_cut: int, gamma: float = 1.0) -> "SeverityParams":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:n_cut], theta[n_cut:], gamma)


@dataclass(frozen=True)
class CellProbabilities:
    """Cumulative probabilities ``mu`` (n, L-1) and cell probabilities ``pi`` (n, L)."""

    mu: np.ndarray
    pi: np.ndarray


def _design(x, q: int) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != q:
        raise DimensionMismatch(f"covariate vector has {X.shape[1]} entries, expected {q}")
    return X, single


def presence_mean(p: PresenceParams, x):
    """``P(Y = 0 | x)`` for one covariate vector or a design matrix."""
    X, single = _design(x, len(p.beta))
    mu = logistic(p.alpha + X @ p.beta)
    return float(mu[0]) if single else mu


def presence_jacobian(p: PresenceParams, X) -> np.ndarray:
    """Rows ``mu (1 - mu) (1, x')``, shape (n, 1 + q)."""
    X, _ = _design(X, len(p.beta))
    mu = logistic(p.alpha + X @ p.beta)
    return (mu * (1.0 - mu))[:, None] * np.hstack([np.ones((len(X), 1)), X])


def presence_variance(mu) -> np.ndarray:
    """Diagonal matrix ``diag(mu (1 - mu))``."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    return np.diag(mu * (1.0 - mu))


def _cumulative(s: SeverityParams, X: np.ndarray) -> np.ndarray:
    eta = s.gamma * (X @ s.beta)
    return logistic(s.cutpoints[None, :] + eta[:, None])


def _cells(mu: np.ndarray) -> np.ndarray:
    n = mu.shape[0]
    full = np.hstack([np.zeros((n, 1)), mu, np.ones((n, 1))])
    return np.diff(full, axis=1)


def severity_cell_probs(s: SeverityParams, x) -> CellProbabilities:
    """Cumulative and cell probabilities for one vector or a design matrix."""
    X, single = _design(x, len(s.beta))
    mu = _cumulative(s, X)
    pi = np.clip(_cells(mu), 0.0, 1.0)
    if single:
        return CellProbabilities(mu[0], pi[0])
    return CellProbabilities(mu, pi)


def severity_jacobian_blocks(s: SeverityParams, X, appendix_form: bool = False) -> np.ndarray:
    """Per-observation ``d pi_l / d theta`` blocks, shape (n, L, (L-1) + q).

    ``theta = (cutpoints, beta)``.  The beta columns carry the chain-rule
    factor ``gamma``; ``appendix_form=True`` drops it (identical when
    ``gamma == 1``).
    """
    X, _ = _design(X, len(s.beta))
    n, q = X.shape
    L = s.n_levels
    mu = _cumulative(s, X)
    f = mu * (1.0 - mu)  # (n, L-1)
    # pad so that f_0 = f_L = 0
    fpad = np.hstack([np.zeros((n, 1)), f, np.zeros((n, 1))])
    J = np.zeros((n, L, (L - 1) + q))
    for m in range(L - 1):
        J[:, m, m] = f[:, m]  # pi_{m+1} uses mu_{m+1} = logistic(alpha_{m+1} ...)
        J[:, m + 1, m] = -f[:, m]
    scale = 1.0 if appendix_form else s.gamma
    dpi_deta = fpad[:, 1:] - fpad[:, :-1]  # (n, L)
    J[:, :, L - 1:] = scale * dpi_deta[:, :, None] * X[:, None, :]
    return J


def severity_jacobian(s: SeverityParams, X, appendix_form: bool = False) -> np.ndarray:
    """Stacked Jacobian, shape (L n, (L-1) + q), observation-major rows."""
    J = severity_jacobian_blocks(s, X, appendix_form)
    return J.reshape(-1, J.shape[2])


def multinomial_cov_blocks(pi) -> np.ndarray:
    """One-trial multinomial covariance blocks ``diag(pi) - pi pi'``, shape (n, L, L)."""
    pi = np.atleast_2d(np.asarray(pi, dtype=float))
    return np.einsum("nl,lm->nlm", pi, np.eye(pi.shape[1])) - pi[:, :, None] * pi[:, None, :]


def severity_variance(pi) -> np.ndarray:
    """Block-diagonal covariance of the stacked indicators, shape (L n, L n)."""
    blocks = multinomial_cov_blocks(pi)
    n, L, _ = blocks.shape
    out = np.zeros((n * L, n * L))
    for i in range(n):
        out[i * L:(i + 1) * L, i * L:(i + 1) * L] = blocks[i]
    return out
