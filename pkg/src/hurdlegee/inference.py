"""Model specifications, the per-time fitting pipeline, jackknife standard
errors, James-Stein shrinkage across time points and the cluster bootstrap.

Model names follow ``A.c.t`` (separate presence), ``B.c.t`` (separate
severity) and ``C.cP.cS.t`` (combined), with correlation codes 1 =
independence, 2 = exchangeable, 3 = AR(1), 4 = jackknife and ``t`` the
time index.
"""
from __future__ import annotations

import dataclasses
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .combined import CombinedFit, fit_combined
from .correlation import CODES
from .data import AGES, Dataset, PresenceView, SeverityView, presence_view, severity_view
from .errors import (
    ConvergenceWarning,
    EmptyTime,
    EstimationWarning,
    HurdleGEEError,
    JackknifeUnstable,
    TooFewClusters,
    TooManyFailures,
)
from .solver import FitResult, FitSettings, fit_presence, fit_severity

FAMILIES = ("A", "B", "C")
JS_VARIANTS = ("paper", "centered")
JACKKNIFE_MAX_DROP = 0.05
BOOTSTRAP_MAX_FAIL = 0.20
THREADS_ENV = "HURDLEGEE_THREADS"


@dataclass(frozen=True)
class ModelSpec:
    """Which model family, structures, times and solver settings to run.

    ``corr`` holds one code for families A/B and ``(cP, cS)`` for C.
    ``columns`` restricts the design to a subset of its columns.
    """

    family: str = "A"
    corr: tuple[int, ...] = (1,)
    times: tuple[int, ...] = (1, 2, 3, 4)
    settings: FitSettings = field(default_factory=FitSettings)
    columns: tuple[str, ...] | None = None
    js_variant: str = "paper"

    def __post_init__(self):
        corr = tuple(int(c) for c in (self.corr if isinstance(self.corr, (tuple, list)) else (self.corr,)))
        object.__setattr__(self, "corr", corr)
        object.__setattr__(self, "times", tuple(int(t) for t in self.times))
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(self.columns))
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        need = 2 if self.family == "C" else 1
        if len(corr) != need or any(c not in CODES for c in corr):
            raise ValueError(f"family {self.family} needs {need} correlation code(s) in 1..4, got {corr}")
        if not self.times or any(t not in AGES for t in self.times):
            raise ValueError(f"time indices must be in {tuple(AGES)}")
        if self.js_variant not in JS_VARIANTS:
            raise ValueError(f"js_variant must be one of {JS_VARIANTS}")

    @property
    def pieces(self) -> tuple[str, ...]:
        return {"A": ("presence",), "B": ("severity",), "C": ("presence", "severity")}[self.family]

    def name(self, t: int) -> str:
        return ".".join([self.family, *map(str, self.corr), str(t)])

    def piece_settings(self, piece: str) -> FitSettings:
        code = self.corr[0] if piece == "presence" or self.family != "C" else self.corr[1]
        return dataclasses.replace(self.settings, correlation=CODES[code])


# --- per-time fits ----------------------------------------------------------


@dataclass(eq=False)
class TimeFit:
    """All fits behind one model name at one time point."""

    name: str
    time: int
    presence: FitResult | None = None
    severity: FitResult | None = None
    combined: CombinedFit | None = None

    @property
    def converged(self) -> bool:
        parts = [self.presence, self.severity, self.combined]
        return all(p.converged for p in parts if p is not None)

    @property
    def gamma(self) -> float | None:
        return None if self.combined is None else self.combined.gamma

    def estimates(self) -> dict[str, np.ndarray]:
        """Slope vectors over the full design, NaN for dropped columns."""
        if self.combined is not None:
            return {"presence": self.combined.coefficients(), "severity": self.combined.severity_coefficients()}
        out = {}
        if self.presence is not None:
            out["presence"] = self.presence.coefficients()
        if self.severity is not None:
            out["severity"] = self.severity.coefficients()
        return out


@dataclass(frozen=True, eq=False)
class TimeViews:
    time: int
    presence: PresenceView | None
    severity: SeverityView | None

    def drop(self, cluster_id) -> "TimeViews":
        def _drop(v):
            if v is None:
                return None
            i = v.index_of(cluster_id)
            return v if i is None else v.drop_cluster(i)

        return TimeViews(self.time, _drop(self.presence), _drop(self.severity))

    def cluster_ids(self) -> np.ndarray:
        v = self.presence if self.presence is not None else self.severity
        return v.cluster_ids


def build_views(dataset: Dataset, spec: ModelSpec, t: int) -> TimeViews:
    cols = spec.columns
    pv = presence_view(dataset, t, cols) if "presence" in spec.pieces else None
    sv = severity_view(dataset, t, cols) if "severity" in spec.pieces else None
    return TimeViews(t, pv, sv)


def _start(base: FitResult | None, active) -> np.ndarray | None:
    if base is None or base.active_names != active:
        return None
    return base.params.theta


def fit_views(spec: ModelSpec, views: TimeViews, base: TimeFit | None = None) -> TimeFit:
    """Fit the model pieces at one time; ``base`` supplies warm starts."""
    t = views.time
    out = TimeFit(spec.name(t), t)
    if views.presence is not None:
        st = spec.piece_settings("presence")
        start = None if base is None or base.presence is None else base.presence.params.theta
        try:
            out.presence = fit_presence(views.presence, st, start=start)
        except ValueError:
            if start is None:
                raise
            out.presence = fit_presence(views.presence, st)
    if views.severity is not None:
        st = spec.piece_settings("severity")
        start = None if base is None or base.severity is None else base.severity.params.theta
        try:
            out.severity = fit_severity(views.severity, st, start=start)
        except ValueError:
            if start is None:
                raise
            out.severity = fit_severity(views.severity, st)
    if spec.family == "C":
        out.combined = fit_combined(views.presence, views.severity, out.presence, out.severity, spec.settings)
    return out


def fit_spec(dataset: Dataset, spec: ModelSpec) -> dict[int, TimeFit]:
    """Fit every requested time point of a specification."""
    return {t: fit_views(spec, build_views(dataset, spec, t)) for t in spec.times}


# --- jackknife --------------------------------------------------------------


@dataclass(eq=False)
class JackknifeResult:
    """Leave-one-cluster-out standard errors for each piece (full design order)."""

    se: dict[str, np.ndarray]
    replicates: dict[str, np.ndarray]
    n_clusters: int
    dropped: int


def _jackknife_se_from(reps: np.ndarray) -> np.ndarray:
    n = reps.shape[0]
    dev = reps - reps.mean(axis=0)
    return np.sqrt((n - 1) / n * np.sum(dev**2, axis=0))


def jackknife_views(spec: ModelSpec, views: TimeViews, base: TimeFit) -> JackknifeResult:
    """Refit leaving out each cluster of the time point's views.

    ``SE = sqrt((N - 1) / N * sum_i (b_(-i) - mean b_(-i))^2)`` over the kept
    replicates.  Non-converged or failing refits are dropped; more than 5%
    dropped raises :class:`JackknifeUnstable`.
    """
    ids = views.cluster_ids()
    N = len(ids)
    if N < 2:
        raise TooFewClusters("the jackknife needs at least two clusters")
    reps: dict[str, list] = {p: [] for p in spec.pieces}
    dropped = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        warnings.simplefilter("ignore", EstimationWarning)
        for cid in ids:
            try:
                f = fit_views(spec, views.drop(cid), base)
            except HurdleGEEError:
                dropped += 1
                continue
            if not f.converged:
                dropped += 1
                continue
            for p, v in f.estimates().items():
                reps[p].append(v)
    if dropped > JACKKNIFE_MAX_DROP * N:
        raise JackknifeUnstable(f"{dropped} of {N} leave-one-out refits failed at time {views.time}")
    arrays = {p: np.array(v) for p, v in reps.items()}
    return JackknifeResult({p: _jackknife_se_from(a) for p, a in arrays.items()}, arrays, N, dropped)


def jackknife_se(dataset: Dataset, spec: ModelSpec, t: int, base: TimeFit | None = None) -> JackknifeResult:
    """Jackknife SEs for the model at time ``t`` of a dataset."""
    views = build_views(dataset, spec, t)
    if base is None:
        base = fit_views(spec, views)
    return jackknife_views(spec, views, base)


# --- James-Stein ------------------------------------------------------------


@dataclass(frozen=True)
class ShrinkageResult:
    js_values: np.ndarray
    shrink_factor: float


def james_stein(values, variant: str = "paper") -> ShrinkageResult:
    """Positive-part James-Stein shrinkage of ``T >= 3`` standardized estimates toward their mean.

    ``variant="paper"`` uses ``max(0, 1 - (T - 2) / ||b||^2)`` with the
    uncentered norm; ``"centered"`` uses ``sum (b - mean)^2`` instead.  The
    shrunken values are ``mean + factor * (b - mean)``.
    """
    b = np.asarray(getattr(values, "standardized", values), dtype=float)
    T = b.size
    if T < 3:
        raise ValueError("James-Stein shrinkage needs at least three values")
    if variant not in JS_VARIANTS:
        raise ValueError(f"variant must be one of {JS_VARIANTS}")
    mean = b.mean()
    norm2 = float(np.sum(b**2)) if variant == "paper" else float(np.sum((b - mean) ** 2))
    factor = 0.0 if norm2 <= T - 2 else max(0.0, 1.0 - (T - 2) / norm2)
    return ShrinkageResult(mean + factor * (b - mean), factor)


@dataclass(frozen=True)
class CoefficientTrack:
    """One covariate's estimates and SEs over the time points of a piece."""

    covariate: str
    piece: str
    values: np.ndarray
    ses: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        s = np.asarray(self.ses, dtype=float)
        if v.shape != s.shape:
            raise ValueError("values and ses must have the same length")
        if np.any(s <= 0):
            raise ValueError("standard errors must be positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "ses", s)

    @property
    def standardized(self) -> np.ndarray:
        return self.values / self.ses

    def shrink(self, variant: str = "paper") -> ShrinkageResult:
        return james_stein(self.standardized, variant)


def _standardize(est: np.ndarray, se: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        z = est / se
    z[~np.isfinite(z)] = np.nan
    return z


def shrink_matrix(z: np.ndarray, variant: str = "paper") -> np.ndarray:
    """Row-wise James-Stein over times: ``z`` is (T, q); NaN columns stay NaN."""
    out = np.full_like(z, np.nan)
    if z.shape[0] < 3:
        return out
    for g in range(z.shape[1]):
        col = z[:, g]
        if np.all(np.isfinite(col)):
            out[:, g] = james_stein(col, variant).js_values
    return out


# --- whole-model analysis ---------------------------------------------------


@dataclass(eq=False)
class Analysis:
    """Point estimates, SEs, standardized and shrunken values per piece.

    Arrays are (T, q) in ``spec.times`` order and full design-column order.
    """

    spec: ModelSpec
    design_names: tuple[str, ...]
    fits: dict[int, TimeFit]
    estimate: dict[str, np.ndarray]
    se: dict[str, np.ndarray]
    standardized: dict[str, np.ndarray]
    js: dict[str, np.ndarray]
    jackknife_dropped: dict[int, int] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return all(f.converged for f in self.fits.values())


def analyze_views(spec: ModelSpec, views: dict[int, TimeViews], with_se: bool = True,
                  se_override: dict[str, np.ndarray] | None = None) -> Analysis:
    """Fit, jackknife, standardize and shrink across the requested times.

    ``with_se=False`` skips the jackknife; the standardized values then use
    ``se_override`` when given (NaN otherwise).  A time point whose fit did
    not converge gets NaN SEs and a :class:`ConvergenceWarning`.
    """
    fits: dict[int, TimeFit] = {}
    est = {p: [] for p in spec.pieces}
    ses = {p: [] for p in spec.pieces}
    dropped = {}
    names = None
    for t in spec.times:
        v = views[t]
        f = fit_views(spec, v)
        fits[t] = f
        names = (v.presence or v.severity).design_names
        for p, b in f.estimates().items():
            est[p].append(b)
        if with_se and not f.converged:
            # the jackknife presumes a converged base fit; report NA rather than abort
            warnings.warn(f"{f.name}: point fit did not converge, jackknife skipped", ConvergenceWarning,
                          stacklevel=2)
            for p in spec.pieces:
                ses[p].append(np.full(len(est[p][-1]), np.nan))
        elif with_se:
            jk = jackknife_views(spec, v, f)
            dropped[t] = jk.dropped
            for p in spec.pieces:
                ses[p].append(jk.se[p])
    estimate = {p: np.array(est[p]) for p in spec.pieces}
    if with_se:
        se = {p: np.array(ses[p]) for p in spec.pieces}
    elif se_override is not None:
        se = se_override
    else:
        se = {p: np.full_like(estimate[p], np.nan) for p in spec.pieces}
    standardized = {p: _standardize(estimate[p], se[p]) for p in spec.pieces}
    js = {p: shrink_matrix(standardized[p], spec.js_variant) for p in spec.pieces}
    return Analysis(spec, names, fits, estimate, se, standardized, js, dropped)


def analyze(dataset: Dataset, spec: ModelSpec, with_se: bool = True) -> Analysis:
    views = {t: build_views(dataset, spec, t) for t in spec.times}
    return analyze_views(spec, views, with_se)


# --- cluster bootstrap ------------------------------------------------------


@dataclass(eq=False)
class BootstrapResult:
    """Percentile intervals from whole-cluster resampling.

    ``intervals[kind][piece]`` has shape (T, q, 2) for ``kind`` in
    ``estimate``, ``standardized`` and ``js``.
    """

    B: int
    seeds: list[int]
    failures: int
    intervals: dict[str, dict[str, np.ndarray]]
    replicates: dict[str, dict[str, np.ndarray]]
    mode: str

    def interval(self, kind: str, piece: str) -> np.ndarray:
        return self.intervals[kind][piece]


def resample_views(views: dict[int, TimeViews], clusters: np.ndarray, draw: np.ndarray) -> dict[int, TimeViews]:
    """Views made of the drawn clusters; draw ``k`` of cluster ``c`` is labeled ``"k:c"``."""
    out = {}
    for t, v in views.items():
        parts = []
        for view in (v.presence, v.severity):
            if view is None:
                parts.append(None)
                continue
            idx, labels = [], []
            for k, c in enumerate(clusters[draw]):
                i = view.index_of(c)
                if i is not None:
                    idx.append(i)
                    labels.append(f"{k}:{c}")
            parts.append(view.take(idx, labels))
        out[t] = TimeViews(t, *parts)
    return out


def _replicate(args):
    spec, views, clusters, seed, mode, se_outer = args
    rng = np.random.default_rng(seed)
    draw = rng.integers(0, len(clusters), size=len(clusters))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        warnings.simplefilter("ignore", EstimationWarning)
        try:
            a = analyze_views(spec, resample_views(views, clusters, draw), with_se=(mode == "full"),
                              se_override=se_outer)
        except HurdleGEEError:
            return None
    if not a.converged:
        return None
    return a.estimate, a.standardized, a.js


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def cluster_bootstrap(
    dataset: Dataset | dict[int, TimeViews],
    spec: ModelSpec,
    B: int = 100,
    seed: int = 0,
    mode: str = "full",
    se_outer: dict[str, np.ndarray] | None = None,
    jobs: int | None = None,
) -> BootstrapResult:
    """Percentile cluster bootstrap of the whole pipeline.

    Parameters
    ----------
    dataset : Dataset or dict of TimeViews
    spec : ModelSpec
    B : int
        Replicates; replicate ``r`` draws with ``numpy.random.default_rng(seed + r)``.
    mode : {"full", "estimates"}
        ``full`` reruns fit, jackknife, standardization and shrinkage in every
        replicate; ``estimates`` only refits and standardizes by ``se_outer``
        (the outer fit's SEs) when given.
    jobs : int, optional
        Worker processes (default from the ``HURDLEGEE_THREADS`` variable).
        Results do not depend on it.

    Raises
    ------
    TooManyFailures
        More than 20% of the replicates failed or did not converge.
    """
    if B < 2:
        raise ValueError("the bootstrap needs B >= 2")
    if mode not in ("full", "estimates"):
        raise ValueError("mode must be 'full' or 'estimates'")
    views = dataset if isinstance(dataset, dict) else {t: build_views(dataset, spec, t) for t in spec.times}
    ids = [v.cluster_ids() for v in views.values()]
    clusters = ids[0] if len(ids) == 1 else np.array(sorted(set().union(*map(set, ids)), key=_id_key), dtype=object)
    seeds = [seed + r for r in range(B)]
    tasks = [(spec, views, clusters, s, mode, se_outer) for s in seeds]
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_replicate, tasks))
    else:
        results = [_replicate(a) for a in tasks]
    ok = [r for r in results if r is not None]
    failures = B - len(ok)
    if failures > BOOTSTRAP_MAX_FAIL * B:
        raise TooManyFailures(f"{failures} of {B} bootstrap replicates failed")
    if len(ok) < 2:
        raise TooManyFailures("fewer than two usable bootstrap replicates")
    kinds = ("estimate", "standardized", "js")
    reps = {k: {p: np.array([r[i][p] for r in ok]) for p in spec.pieces} for i, k in enumerate(kinds)}
    intervals = {k: {p: percentile_interval(a) for p, a in reps[k].items()} for k in kinds}
    return BootstrapResult(B, seeds, failures, intervals, reps, mode)


def _id_key(c):
    s = str(c)
    return (0, int(s), "") if s.lstrip("-").isdigit() else (1, 0, s)


def percentile_interval(reps: np.ndarray, level: float = 0.95) -> np.ndarray:
    """(2.5%, 97.5%) quantiles along the first axis, stacked on a new last axis."""
    a = (1.0 - level) / 2.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lo = np.quantile(reps, a, axis=0)
        hi = np.quantile(reps, 1.0 - a, axis=0)
    return np.stack([lo, hi], axis=-1)


def significance_flags(intervals) -> list[str]:
    """``"*+"`` when the lower bound is positive, ``"*−"`` when the upper bound is negative."""
    arr = np.asarray(intervals, dtype=float).reshape(-1, 2)
    out = []
    for lo, hi in arr:
        if lo > 0:
            out.append("*+")
        elif hi < 0:
            out.append("*−")
        else:
            out.append("")
    return out
