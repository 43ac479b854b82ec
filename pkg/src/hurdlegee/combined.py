"""Combined estimation with shared slopes ``beta_S = gamma * beta_P``.

Two steps: ``gamma`` is the ratio of summed slopes of the separate fits, then
the presence slopes solve the summed estimating equation ``psi_P + psi_S``
with intercepts, cutpoints, ``gamma`` and both working correlations held at
their separate-fit values.  The update is the modified Newton-Raphson step

    beta <- beta + (H_P + H_S + psi psi')^{-1} psi

with ``H`` the Fisher information pieces and ``psi`` the current summed
estimating function.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import PresenceView, SeverityView
from .errors import ConvergenceWarning, DimensionMismatch, SingularSystem, ZeroDenominator
from .meanmodel import PresenceParams, SeverityParams
from .solver import (
    FitResult,
    FitSettings,
    _PresenceProblem,
    _SeverityProblem,
    _json_floats,
    _solve_spd,
    accumulate,
    cluster_groups,
)

GAMMA_EPS = 1e-10


def _slopes(fit) -> np.ndarray:
    return fit.params.beta if isinstance(fit, FitResult) else np.asarray(fit, dtype=float)


def estimate_gamma(sep_presence: FitResult, sep_severity: FitResult) -> float:
    """``sum(beta_S) / sum(beta_P)`` over the shared active columns.

    Also accepts two plain slope vectors.
    """
    if isinstance(sep_presence, FitResult) and isinstance(sep_severity, FitResult):
        if sep_presence.active_names != sep_severity.active_names:
            raise DimensionMismatch(
                f"presence and severity fits use different columns: {sep_presence.active_names} vs {sep_severity.active_names}"
            )
    bP, bS = _slopes(sep_presence), _slopes(sep_severity)
    if bP.shape != bS.shape:
        raise DimensionMismatch(f"slope vectors differ in length: {bP.shape} vs {bS.shape}")
    den = float(np.sum(bP))
    if abs(den) < GAMMA_EPS:
        raise ZeroDenominator(f"sum of presence slopes is {den:.3g}")
    return float(np.sum(bS)) / den


@dataclass(eq=False)
class CombinedFit:
    """Shared-slope fit at one time point.

    ``presence.beta`` and :attr:`severity_beta` cover the active columns
    (``active_names``).
    """

    time: int
    gamma: float
    presence: PresenceParams
    cutpoints: np.ndarray
    design_names: tuple[str, ...]
    active_names: tuple[str, ...]
    converged: bool
    iterations: int
    trace: list[float]
    psi: np.ndarray
    n_obs: int
    notes: list[str] = field(default_factory=list)

    @property
    def severity_beta(self) -> np.ndarray:
        return self.gamma * self.presence.beta

    @property
    def severity(self) -> SeverityParams:
        return SeverityParams(self.cutpoints, self.severity_beta)

    @property
    def intercepts(self) -> np.ndarray:
        return np.r_[self.presence.alpha, self.cutpoints]

    def _expand(self, b) -> np.ndarray:
        out = np.full(len(self.design_names), np.nan)
        out[[self.design_names.index(n) for n in self.active_names]] = b
        return out

    def coefficients(self) -> np.ndarray:
        return self._expand(self.presence.beta)

    def severity_coefficients(self) -> np.ndarray:
        return self._expand(self.severity_beta)

    def to_dict(self) -> dict:
        return {
            "piece": "combined",
            "time": self.time,
            "gamma": self.gamma,
            "presence_intercept": self.presence.alpha,
            "cutpoints": self.cutpoints.tolist(),
            "presence_coefficients": dict(zip(self.design_names, _json_floats(self.coefficients()))),
            "severity_coefficients": dict(zip(self.design_names, _json_floats(self.severity_coefficients()))),
            "converged": self.converged,
            "iterations": self.iterations,
            "trace": [float(v) for v in self.trace],
            "psi_max_abs": float(np.max(np.abs(self.psi))) if self.psi.size else 0.0,
            "n_obs": self.n_obs,
            "notes": list(self.notes),
        }


def _combined_system(pp, sp, beta, alpha, cut, gamma, gP, gS, pv, sv, sep_p, sep_s, floor):
    thP = np.r_[alpha, beta]
    thS = np.r_[cut, beta]
    bp = pp.blocks(thP)
    bp.Dw = bp.Dw[:, :, 1:]
    HP, psiP = accumulate(bp, gP, sep_p.structure, pv.tooth, pv.zone, floor)
    if gamma == 0.0:
        return HP, psiP, psiP, np.zeros_like(psiP)
    bs = sp.blocks(thS)
    bs.Dw = bs.Dw[:, :, len(cut):]
    HS, psiS = accumulate(bs, gS, sep_s.structure, sv.tooth, sv.zone, floor)
    return HP + HS, psiP + psiS, psiP, psiS


def _merit(H, psi) -> float:
    # psi' H^{-1} psi; unlike max|psi| it grows when the fitted means saturate
    try:
        return float(psi @ _solve_spd(H, psi))
    except SingularSystem:
        return np.inf


def _warm_start(pp, sp, starts, alpha, cut, g, gP, gS, pv, sv, sep_p, sep_s, settings):
    """Fisher steps on the summed equation, halved until the scaled norm shrinks.

    Only a starting value: the damped update in :func:`fit_combined` is slow
    far from the root (its step is ``H^{-1} psi / (1 + psi' H^{-1} psi)``) but
    it alone decides convergence. The best of ``starts`` is used.
    """
    def system(b):
        H, psi, _, _ = _combined_system(pp, sp, b, alpha, cut, g, gP, gS, pv, sv, sep_p, sep_s, settings.eig_floor)
        return H, psi, _merit(H, psi)

    best = None
    for b in starts:
        if not np.all(np.isfinite(b)):
            continue
        try:
            cand = (b,) + system(b)
        except SingularSystem:
            continue
        if best is None or cand[3] < best[3]:
            best = cand
    if best is None:
        return starts[0]
    beta, H, psi, merit = best
    for _ in range(settings.max_iter):
        try:
            step = _solve_spd(H, psi)
        except SingularSystem:
            break
        accepted = None
        for _h in range(settings.step_halving + 1):
            cand = beta + step
            if np.all(np.isfinite(cand)) and np.max(np.abs(cand)) <= settings.divergence_bound:
                try:
                    Hc, psic, mc = system(cand)
                except SingularSystem:
                    mc = np.inf
                if mc < merit:
                    accepted = (cand, Hc, psic, mc)
                    break
            step = step / 2.0
        if accepted is None:
            break
        done = float(np.max(np.abs(accepted[0] - beta))) <= settings.tol
        beta, H, psi, merit = accepted
        if done:
            break
    return beta


def fit_combined(
    presence_view: PresenceView,
    severity_view: SeverityView,
    sep_presence: FitResult,
    sep_severity: FitResult,
    settings: FitSettings | None = None,
    gamma: float | None = None,
) -> CombinedFit:
    """Shared presence/severity slopes at one time point.

    Parameters
    ----------
    presence_view, severity_view : views at the same time point
    sep_presence, sep_severity : FitResult
        Separate fits providing the frozen intercepts, cutpoints, working
        correlations and the starting slopes.
    settings : FitSettings, optional
        Only ``max_iter``, ``tol`` and the severity options are used.
    gamma : float, optional
        Override the ratio estimate (mainly for checks).

    Returns
    -------
    CombinedFit
    """
    settings = settings or FitSettings()
    if sep_presence.active_names != sep_severity.active_names:
        raise DimensionMismatch(
            f"presence and severity fits use different columns: {sep_presence.active_names} vs {sep_severity.active_names}"
        )
    if not (sep_presence.converged and sep_severity.converged):
        warnings.warn("combined fit started from non-converged separate fits", ConvergenceWarning, stacklevel=2)
    g = estimate_gamma(sep_presence, sep_severity) if gamma is None else float(gamma)
    if not np.isfinite(g):
        raise ZeroDenominator("gamma estimate is not finite")

    cols = [presence_view.design_names.index(n) for n in sep_presence.active_names]
    scols = [severity_view.design_names.index(n) for n in sep_severity.active_names]
    pp = _PresenceProblem(presence_view, cols, settings)
    sp = _SeverityProblem(severity_view, scols, settings, gamma=g)
    alpha = sep_presence.params.alpha
    cut = sep_severity.params.cutpoints.copy()
    gP = cluster_groups(presence_view.offsets, sep_presence.structure.kind == "independence")
    gS = cluster_groups(severity_view.offsets, sep_severity.structure.kind == "independence")

    b0 = sep_presence.params.beta.copy()
    starts = [b0, np.zeros_like(b0)]
    if g != 0.0:
        starts.insert(1, sep_severity.params.beta / g)
    beta = _warm_start(pp, sp, starts, alpha, cut, g, gP, gS, presence_view, severity_view,
                       sep_presence, sep_severity, settings)
    trace: list[float] = []
    converged = False
    notes: list[str] = []
    it = 0
    for it in range(1, settings.max_iter + 1):
        H, psi, _, _ = _combined_system(pp, sp, beta, alpha, cut, g, gP, gS, presence_view, severity_view,
                                        sep_presence, sep_severity, settings.eig_floor)
        step = _solve_spd(H + np.outer(psi, psi), psi)
        beta = beta + step
        change = float(np.max(np.abs(step)))
        trace.append(change)
        if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > settings.divergence_bound:
            notes.append(f"divergence guard at iteration {it}")
            break
        if change <= settings.tol:
            converged = True
            break
    _, psi, _, _ = _combined_system(pp, sp, beta, alpha, cut, g, gP, gS, presence_view, severity_view,
                                    sep_presence, sep_severity, settings.eig_floor)
    if not converged:
        warnings.warn(f"combined fit at time {presence_view.time} did not converge in {it} iterations",
                      ConvergenceWarning, stacklevel=2)
    return CombinedFit(
        presence_view.time,
        g,
        PresenceParams(alpha, beta) if np.all(np.isfinite(beta)) else PresenceParams(alpha, np.zeros_like(beta)),
        cut,
        presence_view.design_names,
        sep_presence.active_names,
        converged,
        it,
        trace,
        psi,
        presence_view.n_obs + severity_view.n_obs,
        notes,
    )


def combined_system(presence_view, severity_view, sep_presence, sep_severity, fit: CombinedFit, settings=None):
    """``(H_P + H_S, psi_P + psi_S, psi_P, psi_S)`` at the combined slopes (for diagnostics)."""
    settings = settings or FitSettings()
    cols = [presence_view.design_names.index(n) for n in fit.active_names]
    pp = _PresenceProblem(presence_view, cols, settings)
    sp = _SeverityProblem(severity_view, cols, settings, gamma=fit.gamma)
    gP = cluster_groups(presence_view.offsets, sep_presence.structure.kind == "independence")
    gS = cluster_groups(severity_view.offsets, sep_severity.structure.kind == "independence")
    return _combined_system(pp, sp, fit.presence.beta, fit.presence.alpha, fit.cutpoints, fit.gamma, gP, gS,
                            presence_view, severity_view, sep_presence, sep_severity, settings.eig_floor)
