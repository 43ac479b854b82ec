"""Fisher-scoring solver for the presence and severity estimating equations.

Both pieces solve ``sum_i D_i' V_i^{-1} (y_i - mu_i) = 0`` with
``V_i = S_i R_i S_i``, ``S_i`` the diagonal of response standard deviations
and ``R_i`` the working correlation.  For the severity piece the last
indicator category is dropped so that ``V_i`` is invertible; ``R_i`` then
carries the within-observation multinomial correlations on its diagonal
blocks.

Every outer iteration makes one scoring update with the current working
correlation, recomputes Pearson residuals and re-estimates ``phi`` and the
correlation parameters.  Convergence is declared on the coefficients alone.

Per-cluster contributions are whitened through an eigendecomposition of the
(repaired) working correlation and reduced in a fixed order, clusters
grouped by size so each group is one batched linear-algebra call.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit, logit

from .correlation import (
    CorrelationStructure,
    JACKKNIFE_VARIANTS,
    KINDS,
    SCALINGS,
    SEVERITY_FORMS,
    between_obs_corr,
    compose_severity,
    estimate_structure,
    pearson_residuals_presence,
    pearson_residuals_severity,
    repair_psd,
    sqrt_blocks,
)
from .data import PresenceView, SeverityView
from .errors import (
    ConvergenceWarning,
    DimensionMismatch,
    MissingLevel,
    RankDeficientDesign,
    SingularSystem,
)
from .meanmodel import PresenceParams, SeverityParams, severity_jacobian_blocks


@dataclass(frozen=True)
class FitSettings:
    """Solver controls.

    ``rho_fixed`` holds an exchangeable/AR(1) parameter constant instead of
    re-estimating it.  ``appendix_form`` drops the ``gamma`` chain-rule factor
    from the severity slope derivatives.
    """

    max_iter: int = 50
    tol: float = 1e-6
    step_halving: int = 5
    correlation: str = "independence"
    scaling: str = "liang-zeger"
    jackknife_variant: str = "within-cluster"
    rho_fixed: float | None = None
    ar1_form: str = "separable"
    ar1_method: str = "anchored"
    severity_form: str = "congruence"
    appendix_form: bool = False
    variance_floor: float = 1e-10
    eig_floor: float = 1e-8
    ar1_min_pairs: int = 10
    divergence_bound: float = 50.0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.correlation not in KINDS:
            raise ValueError(f"unknown correlation structure {self.correlation!r}")
        if self.scaling not in SCALINGS:
            raise ValueError(f"unknown scaling {self.scaling!r}")
        if self.severity_form not in SEVERITY_FORMS:
            raise ValueError(f"unknown severity form {self.severity_form!r}")
        if self.jackknife_variant not in JACKKNIFE_VARIANTS:
            raise ValueError(f"unknown jackknife variant {self.jackknife_variant!r}")


@dataclass(frozen=True)
class DispersionEstimate:
    phi: float
    piece: str
    time: int


@dataclass(eq=False)
class FitResult:
    """Outcome of one separate-piece fit.

    ``params`` covers the active design columns only; :meth:`coefficients`
    expands the slopes to the full design with NaN for dropped columns.
    """

    piece: str
    time: int
    params: PresenceParams | SeverityParams
    design_names: tuple[str, ...]
    active_names: tuple[str, ...]
    structure: CorrelationStructure
    phi: DispersionEstimate
    converged: bool
    iterations: int
    trace: list[float]
    psi: np.ndarray
    residuals: np.ndarray
    cluster_offsets: np.ndarray
    n_clusters: int
    n_obs: int
    dropped: tuple[str, ...] = ()
    notes: list[str] = field(default_factory=list)

    def coefficients(self) -> np.ndarray:
        out = np.full(len(self.design_names), np.nan)
        idx = [self.design_names.index(n) for n in self.active_names]
        out[idx] = self.params.beta
        return out

    @property
    def intercepts(self) -> np.ndarray:
        if isinstance(self.params, PresenceParams):
            return np.array([self.params.alpha])
        return self.params.cutpoints

    def to_dict(self) -> dict:
        return {
            "piece": self.piece,
            "time": self.time,
            "intercepts": self.intercepts.tolist(),
            "coefficients": dict(zip(self.design_names, _json_floats(self.coefficients()))),
            "structure": self.structure.to_dict(),
            "phi": self.phi.phi,
            "converged": self.converged,
            "iterations": self.iterations,
            "trace": [float(v) for v in self.trace],
            "psi_max_abs": float(np.max(np.abs(self.psi))) if self.psi.size else 0.0,
            "n_clusters": self.n_clusters,
            "n_obs": self.n_obs,
            "dropped": list(self.dropped),
            "notes": list(self.notes),
        }


def _json_floats(a) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]


# --- per-observation blocks -------------------------------------------------


@dataclass
class Blocks:
    """Whitened per-observation pieces of the estimating equation.

    ``Dw`` is ``D / sd`` with shape (n, m, p), ``ew`` is ``(y - mu) / sd``
    with shape (n, m); ``B`` is the (n, m, m) within-observation correlation
    still to be composed with the between-observation part, or None when the
    rows are already decorrelated within observations.
    """

    Dw: np.ndarray
    ew: np.ndarray
    B: np.ndarray | None


class _PresenceProblem:
    piece = "presence"
    m = 1

    def __init__(self, view: PresenceView, cols: Sequence[int], settings: FitSettings):
        self.X1 = np.hstack([np.ones((view.n_obs, 1)), view.X[:, cols]])
        self.y = view.y_zero
        self.floor = settings.variance_floor

    @property
    def n_params(self) -> int:
        return self.X1.shape[1]

    def start(self) -> np.ndarray:
        p0 = np.clip(self.y.mean(), 1e-4, 1 - 1e-4)
        return np.r_[logit(p0), np.zeros(self.n_params - 1)]

    def valid(self, theta) -> bool:
        return bool(np.all(np.isfinite(theta)))

    def mean(self, theta) -> np.ndarray:
        return expit(self.X1 @ theta)

    def blocks(self, theta) -> Blocks:
        mu = self.mean(theta)
        v = mu * (1.0 - mu)
        sd = np.sqrt(np.maximum(v, self.floor))
        Dw = (v / sd)[:, None] * self.X1
        ew = (self.y - mu) / sd
        return Blocks(Dw[:, None, :], ew[:, None], None)

    def residuals(self, theta) -> tuple[np.ndarray, np.ndarray]:
        r = pearson_residuals_presence(self.y, self.mean(theta))[:, None]
        return r, r

    def to_params(self, theta):
        return PresenceParams.from_theta(theta)


class _SeverityProblem:
    piece = "severity"

    def __init__(self, view: SeverityView, cols: Sequence[int], settings: FitSettings, gamma: float = 1.0):
        self.X = view.X[:, cols]
        self.Z = view.Z
        self.L = view.n_levels
        self.m = self.L - 1
        self.gamma = gamma
        self.appendix_form = settings.appendix_form
        self.floor = settings.variance_floor
        self.eig_floor = settings.eig_floor
        self.form = settings.severity_form

    @property
    def n_params(self) -> int:
        return self.m + self.X.shape[1]

    def start(self) -> np.ndarray:
        cum = np.cumsum(self.Z.mean(axis=0))[: self.m]
        return np.r_[logit(np.clip(cum, 1e-4, 1 - 1e-4)), np.zeros(self.X.shape[1])]

    def valid(self, theta) -> bool:
        return bool(np.all(np.isfinite(theta)) and np.all(np.diff(theta[: self.m]) > 0))

    def params(self, theta) -> SeverityParams:
        return SeverityParams.from_theta(theta, self.m, self.gamma)

    def cells(self, theta) -> np.ndarray:
        s = self.params(theta)
        mu = expit(s.cutpoints[None, :] + (s.gamma * (self.X @ s.beta))[:, None])
        full = np.hstack([np.zeros((len(mu), 1)), mu, np.ones((len(mu), 1))])
        return np.clip(np.diff(full, axis=1), 0.0, 1.0)

    def _standardized(self, theta):
        s = self.params(theta)
        pi = self.cells(theta)[:, : self.m]
        J = severity_jacobian_blocks(s, self.X, self.appendix_form)[:, : self.m, :]
        sd = np.sqrt(np.maximum(pi * (1.0 - pi), self.floor))
        B = -(pi[:, :, None] * pi[:, None, :]) / (sd[:, :, None] * sd[:, None, :])
        idx = np.arange(self.m)
        B[:, idx, idx] = 1.0
        return J / sd[:, :, None], (self.Z[:, : self.m] - pi) / sd, B

    def blocks(self, theta) -> Blocks:
        Dw, ew, B = self._standardized(theta)
        if self.form == "kronecker":
            return Blocks(Dw, ew, B)
        _, Bi = sqrt_blocks(B, self.eig_floor)
        return Blocks(Bi @ Dw, np.einsum("nij,nj->ni", Bi, ew), None)

    def residuals(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Full Pearson residuals (for phi) and the rows the correlation is estimated from.

        Under the congruence form the latter are decorrelated within each
        observation, so only same-category products carry the
        between-observation correlation.
        """
        r = pearson_residuals_severity(self.Z, self.cells(theta))
        if self.form == "kronecker":
            return r, r[:, : self.m]
        _, ew, B = self._standardized(theta)
        _, Bi = sqrt_blocks(B, self.eig_floor)
        return r, np.einsum("nij,nj->ni", Bi, ew)

    def to_params(self, theta):
        return self.params(theta)


# --- accumulation -----------------------------------------------------------


def cluster_groups(offsets: np.ndarray, per_observation: bool = False) -> list[np.ndarray]:
    """Row-index arrays (G, k), one per distinct cluster size, in a fixed order."""
    offsets = np.asarray(offsets)
    if per_observation:
        return [np.arange(int(offsets[-1]))[:, None]]
    sizes = np.diff(offsets)
    out = []
    for k in np.unique(sizes):
        starts = offsets[:-1][sizes == k]
        out.append(starts[:, None] + np.arange(k)[None, :])
    return out


def accumulate(
    blocks: Blocks,
    groups: list[np.ndarray],
    structure: CorrelationStructure,
    tooth: np.ndarray,
    zone: np.ndarray,
    eig_floor: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray]:
    """``(sum D'V^-1 D, sum D'V^-1 (y - mu))`` over clusters."""
    n, m, p = blocks.Dw.shape
    H = np.zeros((p, p))
    psi = np.zeros(p)
    for idx in groups:
        G, k = idx.shape
        Dw = blocks.Dw[idx]  # (G, k, m, p)
        ew = blocks.ew[idx]  # (G, k, m)
        if k == 1 and blocks.B is None or structure.kind == "independence" and blocks.B is None:
            M, f = Dw.reshape(G, k * m, p), ew.reshape(G, k * m)
        elif blocks.B is None:
            # R = Phi (x) I_m: rotate observations by the eigenvectors of Phi
            shared = structure.kind == "exchangeable"
            Phi = between_obs_corr(structure, tooth[idx[:1] if shared else idx], zone[idx[:1] if shared else idx])
            _, lam, Q = repair_psd(Phi, eig_floor)
            Q = np.broadcast_to(Q, (G, k, k))
            s = 1.0 / np.sqrt(np.broadcast_to(lam, (G, k)))
            M = (np.einsum("gji,gjlp->gilp", Q, Dw) * s[:, :, None, None]).reshape(G, k * m, p)
            f = (np.einsum("gji,gjl->gil", Q, ew) * s[:, :, None]).reshape(G, k * m)
        else:
            Phi = between_obs_corr(structure, tooth[idx], zone[idx])
            R = compose_severity(Phi, blocks.B[idx], "kronecker")
            _, lam, Q = repair_psd(R, eig_floor)
            QT = np.swapaxes(Q, 1, 2)
            s = 1.0 / np.sqrt(lam)
            M = (QT @ Dw.reshape(G, k * m, p)) * s[:, :, None]
            f = np.einsum("gij,gj->gi", QT, ew.reshape(G, k * m)) * s
        H += np.einsum("gip,giq->pq", M, M)
        psi += np.einsum("gip,gi->p", M, f)
    return H, psi


def _solve_spd(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(rhs))):
        raise SingularSystem("non-finite scoring system")
    try:
        c = scipy.linalg.cho_factor(H, check_finite=False)
    except np.linalg.LinAlgError:
        raise SingularSystem("information matrix is not positive definite") from None
    out = scipy.linalg.cho_solve(c, rhs, check_finite=False)
    if not np.all(np.isfinite(out)):
        raise SingularSystem("scoring step is not finite")
    return out


def solve_step(D, V, residual) -> np.ndarray:
    """Gauss-Newton increment ``(sum D'V^-1 D)^-1 sum D'V^-1 r``.

    Accepts one cluster (arrays) or sequences of per-cluster arrays; each
    ``V`` is Cholesky-factored, never inverted.
    """
    if isinstance(D, np.ndarray):
        D, V, residual = [D], [V], [residual]
    H = None
    g = None
    for Di, Vi, ri in zip(D, V, residual):
        Di = np.atleast_2d(np.asarray(Di, dtype=float))
        Vi = np.atleast_2d(np.asarray(Vi, dtype=float))
        ri = np.asarray(ri, dtype=float).ravel()
        if Vi.shape != (len(Di), len(Di)) or len(ri) != len(Di):
            raise DimensionMismatch("D, V and residual sizes disagree")
        try:
            c = scipy.linalg.cho_factor(Vi)
        except np.linalg.LinAlgError:
            raise SingularSystem("working covariance is not positive definite") from None
        VD = scipy.linalg.cho_solve(c, Di)
        Hi = Di.T @ VD
        gi = VD.T @ ri
        H = Hi if H is None else H + Hi
        g = gi if g is None else g + gi
    if H is None:
        raise DimensionMismatch("no clusters")
    return _solve_spd(H, g)


# --- the fitting loop -------------------------------------------------------


def active_columns(X: np.ndarray, names: Sequence[str]) -> tuple[list[int], tuple[str, ...]]:
    """Indices of columns that vary at this time, and names of those dropped."""
    if len(X) == 0:
        return [], tuple(names)
    spread = np.ptp(X, axis=0) if X.shape[1] else np.zeros(0)
    keep = [j for j in range(X.shape[1]) if spread[j] > 0]
    dropped = tuple(names[j] for j in range(X.shape[1]) if spread[j] <= 0)
    X1 = np.hstack([np.ones((len(X), 1)), X[:, keep]])
    _, Rq, _ = scipy.linalg.qr(X1, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rq))
    rank = int(np.sum(diag > diag[0] * max(X1.shape) * np.finfo(float).eps)) if diag.size else 0
    if rank < X1.shape[1]:
        raise RankDeficientDesign(f"design has rank {rank} < {X1.shape[1]} columns after dropping constants")
    return keep, dropped


def _split(a: np.ndarray, offsets: np.ndarray) -> list[np.ndarray]:
    return np.split(a, offsets[1:-1])


class _Fitter:
    def __init__(self, problem, view, settings: FitSettings, fixed: CorrelationStructure | None):
        self.problem = problem
        self.view = view
        self.settings = settings
        self.fixed = fixed
        kind = settings.correlation if fixed is None else fixed.kind
        self.groups = cluster_groups(view.offsets, per_observation=(kind == "independence"))
        self.tooth = view.tooth
        self.zone = view.zone
        self.notes: list[str] = []

    def system(self, theta, structure):
        return accumulate(self.problem.blocks(theta), self.groups, structure, self.tooth, self.zone, self.settings.eig_floor)

    def reestimate(self, theta) -> tuple[CorrelationStructure, float, np.ndarray]:
        full, reduced = self.problem.residuals(theta)
        finite = full[np.isfinite(full)]
        phi = float(np.mean(finite**2)) if finite.size else 1.0
        if self.fixed is not None:
            return self.fixed, phi, full
        s = self.settings
        if s.correlation in ("exchangeable", "ar1") and s.rho_fixed is not None:
            return self._fixed_structure(), phi, full
        offs = self.view.offsets
        structure, note = estimate_structure(
            s.correlation,
            _split(reduced, offs),
            _split(self.view.tooth, offs),
            _split(self.view.positions, offs),
            phi,
            scaling=s.scaling,
            variant=s.jackknife_variant,
            phi_residuals=_split(full, offs),
            min_pairs=s.ar1_min_pairs,
            ar1_form=s.ar1_form,
            ar1_method=s.ar1_method,
            pairs="all" if s.severity_form == "kronecker" else "same",
        )
        if note and note not in self.notes:
            self.notes.append(note)
        return structure, phi, full

    def _fixed_structure(self) -> CorrelationStructure:
        s = self.settings
        return CorrelationStructure(s.correlation, s.rho_fixed, form=s.ar1_form)

    def initial_structure(self) -> CorrelationStructure:
        if self.fixed is not None:
            return self.fixed
        s = self.settings
        if s.correlation in ("exchangeable", "ar1") and s.rho_fixed is not None:
            return self._fixed_structure()
        return CorrelationStructure("independence")

    def run(self, theta0, structure0=None):
        s = self.settings
        theta = np.asarray(theta0, dtype=float).copy()
        structure = structure0 or self.initial_structure()
        static = self.fixed is not None or s.correlation == "independence" or (
            s.rho_fixed is not None and s.correlation in ("exchangeable", "ar1")
        )
        trace: list[float] = []
        converged = False
        it = 0
        phi = 1.0
        cached = None
        for it in range(1, s.max_iter + 1):
            H, psi = cached if cached is not None else self.system(theta, structure)
            cached = None
            try:
                step = _solve_spd(H, psi)
            except SingularSystem:
                if it == 1:
                    raise
                # fitted means saturated on the way out (separation)
                self.notes.append(f"divergence guard at iteration {it}: scoring system singular, fitted means saturated")
                break
            new = theta + step
            if np.max(np.abs(step)) > s.tol or not self.problem.valid(new):
                new, cached = self._halve(theta, step, psi, structure)
                if new is None:
                    self.notes.append(f"no admissible step at iteration {it}: cutpoints stay non-monotone after halving")
                    break
            change = float(np.max(np.abs(new - theta)))
            theta = new
            trace.append(change)
            if not static:
                cached = None
                structure, phi, _ = self.reestimate(theta)
            if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) > s.divergence_bound:
                self.notes.append(f"divergence guard at iteration {it}: |coefficient| > {s.divergence_bound}")
                break
            if change <= s.tol:
                converged = True
                break
        structure, phi, residuals = self.reestimate(theta) if static else (structure, phi, self.problem.residuals(theta)[0])
        _, psi = self.system(theta, structure)
        if not converged:
            warnings.warn(
                f"{self.problem.piece} fit at time {self.view.time} did not converge in {it} iterations",
                ConvergenceWarning,
                stacklevel=3,
            )
        return theta, structure, phi, residuals, converged, it, trace, psi

    def _halve(self, theta, step, psi, structure):
        """Step halving on an increased estimating-function norm or invalid cutpoints.

        Without any decrease the admissible candidate with the smallest norm
        is taken.
        """
        norm0 = np.max(np.abs(psi))
        best = None
        for h in range(self.settings.step_halving + 1):
            cand = theta + step / (2**h)
            if not self.problem.valid(cand):
                continue
            sysn = self.system(cand, structure)
            norm = np.max(np.abs(sysn[1]))
            if norm <= norm0:
                return cand, sysn
            if best is None or norm < best[2]:
                best = (cand, sysn, norm)
        if best is None:
            return None, None
        return best[0], best[1]


def _resolve_columns(view, columns):
    if columns is None:
        return view
    return view.select_columns(columns)


def fit_presence(
    view: PresenceView,
    settings: FitSettings | None = None,
    start: PresenceParams | np.ndarray | None = None,
    structure: CorrelationStructure | None = None,
) -> FitResult:
    """Solve the presence estimating equations at one time point.

    Parameters
    ----------
    view : PresenceView
    settings : FitSettings, optional
    start : PresenceParams or array, optional
        Warm start (active columns).  Defaults to the marginal log-odds of a
        zero score with zero slopes.
    structure : CorrelationStructure, optional
        Hold the working correlation fixed at this value.

    Returns
    -------
    FitResult
        ``converged`` is False when the iteration cap or divergence guard
        is hit; the last iterate is returned.
    """
    settings = settings or FitSettings()
    cols, dropped = active_columns(view.X, view.design_names)
    problem = _PresenceProblem(view, cols, settings)
    theta0 = problem.start() if start is None else np.asarray(getattr(start, "theta", start), dtype=float)
    fitter = _Fitter(problem, view, settings, structure)
    theta, struct, phi, resid, conv, it, trace, psi = fitter.run(theta0)
    return FitResult(
        "presence",
        view.time,
        problem.to_params(theta),
        view.design_names,
        tuple(view.design_names[j] for j in cols),
        struct,
        DispersionEstimate(phi, "presence", view.time),
        conv,
        it,
        trace,
        psi,
        resid,
        view.offsets,
        view.n_clusters,
        view.n_obs,
        dropped,
        fitter.notes,
    )


def fit_severity(
    view: SeverityView,
    settings: FitSettings | None = None,
    start: SeverityParams | np.ndarray | None = None,
    structure: CorrelationStructure | None = None,
) -> FitResult:
    """Solve the proportional-odds severity estimating equations at one time point.

    ``gamma`` is fixed at 1.  Raises :class:`MissingLevel` unless every
    severity level occurs at least once.
    """
    settings = settings or FitSettings()
    counts = np.bincount(view.level, minlength=view.n_levels + 1)[1:]
    if np.any(counts == 0):
        missing = [l + 1 for l in np.flatnonzero(counts == 0)]
        raise MissingLevel(f"severity level(s) {missing} absent at time {view.time}")
    cols, dropped = active_columns(view.X, view.design_names)
    problem = _SeverityProblem(view, cols, settings)
    theta0 = problem.start() if start is None else np.asarray(getattr(start, "theta", start), dtype=float)
    fitter = _Fitter(problem, view, settings, structure)
    theta, struct, phi, resid, conv, it, trace, psi = fitter.run(theta0)
    return FitResult(
        "severity",
        view.time,
        problem.to_params(theta),
        view.design_names,
        tuple(view.design_names[j] for j in cols),
        struct,
        DispersionEstimate(phi, "severity", view.time),
        conv,
        it,
        trace,
        psi,
        resid,
        view.offsets,
        view.n_clusters,
        view.n_obs,
        dropped,
        fitter.notes,
    )
