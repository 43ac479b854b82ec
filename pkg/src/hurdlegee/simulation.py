"""Synthetic zero-inflated clustered ordinal data with known truth, and
independence-model maximum-likelihood oracles.

Each (cluster, time) draws two latent Gaussian vectors over its tooth/zone
positions, both with the between-observation correlation of the requested
structure.  The first is mapped to uniforms and decides presence (zero score
when ``U <= P(Y = 0 | x)``); the second decides the severity level through
the cumulative probabilities.  The induced binary/ordinal correlation is not
equal to ``rho`` itself; it is only monotone in it.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .correlation import CorrelationStructure, between_obs_corr
from .data import (
    DEFAULT_COVARIATES,
    LOCATION_COLUMNS,
    TOOTH_LEVELS,
    ZONE_LEVELS,
    Dataset,
    PresenceView,
    SeverityView,
)
from .errors import InfeasibleCorrelation, MissingLevel, NonmonotoneCutpoints, Separation


@dataclass(frozen=True)
class TimeTruth:
    """True parameters at one time point.

    ``beta`` covers the continuous covariates, optionally followed by the six
    tooth/zone dummies (missing dummy effects are zero).  Severity slopes are
    ``gamma * beta`` when ``gamma`` is set, else ``severity_beta`` (zero when
    neither is given).
    """

    alpha: float
    beta: tuple[float, ...]
    cutpoints: tuple[float, ...] = (0.0, 2.0)
    severity_beta: tuple[float, ...] | None = None
    gamma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "cutpoints", tuple(float(c) for c in self.cutpoints))
        if self.severity_beta is not None:
            object.__setattr__(self, "severity_beta", tuple(float(b) for b in self.severity_beta))
        if np.any(np.diff(self.cutpoints) <= 0):
            raise NonmonotoneCutpoints(f"cutpoints must increase, got {self.cutpoints}")

    def presence_slopes(self) -> np.ndarray:
        return np.asarray(self.beta, dtype=float)

    def severity_slopes(self) -> np.ndarray:
        if self.gamma is not None:
            return self.gamma * self.presence_slopes()
        if self.severity_beta is not None:
            return np.asarray(self.severity_beta, dtype=float)
        return np.zeros(len(self.beta))


@dataclass(frozen=True)
class TruthSpec:
    """Everything needed to generate a synthetic dataset.

    Parameters
    ----------
    n_clusters : int
    times : dict
        Time index -> :class:`TimeTruth`.
    correlation : {"independence", "exchangeable", "ar1"}
        Structure of the Gaussian copula, with parameter ``rho``.
    severity_rho : float, optional
        Copula parameter of the severity draw (defaults to ``rho``).
    teeth, zones : sequence
        Positions observed in every cluster-time before missingness.
    covariate_sd : float
        Covariates are cluster-level draws from N(0, sd^2), constant over time.
    visit_prob : float
        Chance a cluster is examined at a given time (each cluster keeps at
        least one visit).
    missing_rate : float
        Chance an individual cell is absent (each visit keeps at least one).
    ar1_form : {"separable", "literal"}
        AR(1) copula entries (see :class:`CorrelationStructure`).
    """

    n_clusters: int
    times: dict
    correlation: str = "independence"
    rho: float = 0.0
    severity_rho: float | None = None
    teeth: tuple[int, ...] = TOOTH_LEVELS
    zones: tuple[str, ...] = ZONE_LEVELS
    covariate_names: tuple[str, ...] = DEFAULT_COVARIATES
    covariate_sd: float = 1.0
    visit_prob: float = 1.0
    missing_rate: float = 0.0
    ar1_form: str = "separable"

    def __post_init__(self):
        times = {int(k): (v if isinstance(v, TimeTruth) else TimeTruth(**v)) for k, v in dict(self.times).items()}
        object.__setattr__(self, "times", dict(sorted(times.items())))
        object.__setattr__(self, "teeth", tuple(int(t) for t in self.teeth))
        object.__setattr__(self, "zones", tuple(str(z) for z in self.zones))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be positive")
        if not self.times:
            raise ValueError("at least one time point is required")
        if not set(self.teeth) <= set(TOOTH_LEVELS) or not set(self.zones) <= set(ZONE_LEVELS):
            raise ValueError("teeth/zones outside the admissible levels")
        q_full = len(self.covariate_names) + len(LOCATION_COLUMNS)
        for t, tt in self.times.items():
            if len(tt.beta) not in (len(self.covariate_names), q_full):
                raise ValueError(f"time {t}: beta has {len(tt.beta)} entries")
            if len(tt.cutpoints) < 1:
                raise ValueError("need at least one cutpoint")
        if self.correlation not in ("independence", "exchangeable", "ar1"):
            raise ValueError(f"unsupported copula structure {self.correlation!r}")
        for r in (self.rho, self.rho if self.severity_rho is None else self.severity_rho):
            _check_feasible(self.correlation, r, self.cluster_size)
        if not (0.0 < self.visit_prob <= 1.0 and 0.0 <= self.missing_rate < 1.0):
            raise ValueError("visit_prob must be in (0, 1] and missing_rate in [0, 1)")

    @property
    def cluster_size(self) -> int:
        return len(self.teeth) * len(self.zones)

    def to_json(self) -> str:
        d = asdict(self)
        d["times"] = {str(k): asdict(v) for k, v in self.times.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TruthSpec":
        d = json.loads(text)
        for key in ("teeth", "zones", "covariate_names"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TruthSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _check_feasible(kind: str, rho: float, n: int) -> None:
    if kind == "independence":
        return
    if not -1.0 < rho < 1.0:
        raise InfeasibleCorrelation(f"rho={rho} outside (-1, 1)")
    if kind == "exchangeable" and n > 1 and rho <= -1.0 / (n - 1):
        raise InfeasibleCorrelation(f"exchangeable rho={rho} <= -1/(n-1) for cluster size {n}")
    if kind == "ar1":
        # tooth-level AR(1) with identical same-tooth latents is singular but PSD;
        # the copula uses it through a symmetric square root
        return


def _sqrt_corr(R: np.ndarray) -> np.ndarray:
    lam, Q = np.linalg.eigh(R)
    if lam.min() < -1e-10:
        raise InfeasibleCorrelation("copula correlation matrix is not positive semidefinite")
    return Q * np.sqrt(np.clip(lam, 0.0, None))


def generate_dataset(spec: TruthSpec, seed: int) -> Dataset:
    """Draw one dataset; a pure function of ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    N = spec.n_clusters
    p = len(spec.covariate_names)
    tooth = np.repeat(np.array(spec.teeth), len(spec.zones))
    zone = np.tile(np.array(spec.zones, dtype=object), len(spec.teeth))
    zone_code = np.array([ZONE_LEVELS.index(z) for z in zone])
    n = len(tooth)

    loc = np.zeros((n, len(LOCATION_COLUMNS)))
    tcode = np.searchsorted(TOOTH_LEVELS, tooth)
    for j in (1, 2, 3):
        loc[:, j - 1] = tcode == j
        loc[:, 2 + j] = zone_code == j

    sev_rho = spec.rho if spec.severity_rho is None else spec.severity_rho
    kind = spec.correlation
    S_p = _sqrt_corr(between_obs_corr(CorrelationStructure(kind, spec.rho, form=spec.ar1_form), tooth, zone_code))
    S_s = _sqrt_corr(between_obs_corr(CorrelationStructure(kind, sev_rho, form=spec.ar1_form), tooth, zone_code))

    cov = rng.normal(0.0, spec.covariate_sd, size=(N, p))
    times = list(spec.times)
    visit = rng.random((N, len(times))) < spec.visit_prob
    # every cluster keeps at least one visit
    none = ~visit.any(axis=1)
    visit[none, rng.integers(0, len(times), size=int(none.sum()))] = True

    cols = {k: [] for k in ("cid", "time", "tooth", "zone", "fri", "cov")}
    for ti, t in enumerate(times):
        tt = spec.times[t]
        bP = tt.presence_slopes()
        bS = tt.severity_slopes()
        Xfull = np.concatenate([np.repeat(cov[:, None, :], n, axis=1), np.broadcast_to(loc, (N, n, loc.shape[1]))], axis=2)
        Xuse = Xfull[:, :, : len(bP)]
        mu0 = expit(tt.alpha + Xuse @ bP)
        cum = expit(np.asarray(tt.cutpoints)[None, None, :] + (Xuse @ bS)[:, :, None])
        U1 = norm.cdf(rng.standard_normal((N, n)) @ S_p.T)
        U2 = norm.cdf(rng.standard_normal((N, n)) @ S_s.T)
        level = 1 + np.sum(U2[:, :, None] > cum, axis=2)
        fri = np.where(U1 <= mu0, 0, level)
        keep = rng.random((N, n)) >= spec.missing_rate
        empty = ~keep.any(axis=1)
        keep[empty, rng.integers(0, n, size=int(empty.sum()))] = True
        keep &= visit[:, ti][:, None]
        ci, ji = np.nonzero(keep)
        cols["cid"].append(ci + 1)
        cols["time"].append(np.full(len(ci), t))
        cols["tooth"].append(tooth[ji])
        cols["zone"].append(zone[ji])
        cols["fri"].append(fri[ci, ji])
        cols["cov"].append(cov[ci])
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    return Dataset(cat["cid"], cat["time"], cat["tooth"], cat["zone"], cat["fri"], cat["cov"], spec.covariate_names)


# --- oracles ----------------------------------------------------------------


def oracle_logistic_fit(view: PresenceView, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Maximum-likelihood logistic fit of the zero indicator by IRLS.

    Returns ``(alpha, beta)`` over all columns of ``view.X``.  Raises
    :class:`Separation` when the fit drives probabilities to 0/1.
    """
    X = np.hstack([np.ones((view.n_obs, 1)), view.X])
    y = view.y_zero
    theta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        mu = expit(X @ theta)
        w = mu * (1.0 - mu)
        if np.any(w < 1e-12):
            raise Separation("fitted probabilities reached 0 or 1")
        z = X @ theta + (y - mu) / w
        sw = np.sqrt(w)
        new, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > 30:
            raise Separation("coefficients diverge")
        done = np.max(np.abs(new - theta)) <= tol
        theta = new
        if done:
            return theta
    raise Separation("IRLS did not converge (quasi-separation)")


def _po_parts(theta, X, level, n_cut):
    """Log-likelihood, gradient and observed Hessian of the cumulative-logit model."""
    n, q = X.shape
    a = theta[:n_cut]
    eta = X @ theta[n_cut:]
    k = n_cut + q
    # u = a_l + eta (upper), v = a_{l-1} + eta (lower); boundaries are +-inf
    up = level - 1  # index of a_l, or n_cut meaning +inf
    lo = level - 2  # index of a_{l-1}, or -1 meaning -inf
    has_up = up < n_cut
    has_lo = lo >= 0
    u = np.where(has_up, a[np.minimum(up, n_cut - 1)] + eta, np.inf)
    v = np.where(has_lo, a[np.maximum(lo, 0)] + eta, -np.inf)
    Fu, Fv = expit(u), expit(v)
    fu, fv = Fu * (1 - Fu), Fv * (1 - Fv)
    pi = Fu - Fv
    if np.any(pi <= 0):
        return -np.inf, None, None
    ll = float(np.sum(np.log(pi)))
    gu = np.zeros((n, k))
    gv = np.zeros((n, k))
    rows = np.arange(n)
    gu[rows[has_up], up[has_up]] = 1.0
    gv[rows[has_lo], lo[has_lo]] = 1.0
    gu[:, n_cut:] = X
    gv[:, n_cut:] = X
    gu[~has_up] = 0.0
    gv[~has_lo] = 0.0
    du = fu / pi
    dv = -fv / pi
    grad = gu.T @ du + gv.T @ dv
    huu = fu * (1 - 2 * Fu) / pi - du**2
    hvv = -fv * (1 - 2 * Fv) / pi - dv**2
    huv = -du * dv
    H = (gu * huu[:, None]).T @ gu + (gv * hvv[:, None]).T @ gv
    C = (gu * huv[:, None]).T @ gv
    H += C + C.T
    return ll, grad, H


def oracle_proportional_odds_fit(view: SeverityView, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Maximum-likelihood cumulative-logit fit by damped Newton.

    Returns ``(cutpoints, beta)`` over all columns of ``view.X``.
    """
    L = view.n_levels
    counts = np.bincount(view.level, minlength=L + 1)[1:]
    if np.any(counts == 0):
        raise MissingLevel("every severity level must occur")
    n_cut = L - 1
    X = view.X
    cum = np.cumsum(counts)[:n_cut] / counts.sum()
    theta = np.r_[logit(cum), np.zeros(X.shape[1])]
    ll, g, H = _po_parts(theta, X, view.level, n_cut)
    for _ in range(max_iter):
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = g
        if g @ step <= 0:  # not an ascent direction
            step = g
        for _h in range(60):
            cand = theta + step
            ll_c, g_c, H_c = _po_parts(cand, X, view.level, n_cut)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        else:
            break
        done = np.max(np.abs(cand - theta)) <= tol
        theta, ll, g, H = cand, ll_c, g_c, H_c
        if done:
            break
    return theta


def log_likelihood_proportional_odds(theta, view: SeverityView) -> float:
    """Cumulative-logit log-likelihood (exposed for optimizer cross-checks)."""
    return _po_parts(np.asarray(theta, dtype=float), view.X, view.level, view.n_levels - 1)[0]
