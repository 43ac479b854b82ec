"""Working correlation structures and their moment estimators.

Four structures are supported for either piece: ``independence``,
``exchangeable``, ``ar1`` and ``jackknife`` (a free matrix over the 16
tooth/zone positions, estimated by leave-one-cluster-out averaging).

AR(1) distance is measured on the tooth number only: observations on the
same tooth are assigned correlation 1 whatever their zones.

Residual inputs to the estimators are per-cluster arrays of shape
``(n_i, m)`` (``m = 1`` for presence, ``m = L - 1`` reduced indicator
categories for severity); a 1-D array is read as ``m = 1``.  Non-finite
residuals mark observations to skip.

Two scalings of the correlation estimates are available.  ``liang-zeger``
divides the mean cross-product by the dispersion ``phi``; ``paper`` multiplies
by it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import N_POSITIONS, TOOTH_LEVELS, ZONE_LEVELS
from .errors import (
    DegenerateCategory,
    DimensionMismatch,
    EmptyResiduals,
    EstimationWarning,
    InsufficientPairs,
    NoPairs,
    TooFewClusters,
)

KINDS = ("independence", "exchangeable", "ar1", "jackknife")
CODES = {1: "independence", 2: "exchangeable", 3: "ar1", 4: "jackknife"}
SCALINGS = ("liang-zeger", "paper")
JACKKNIFE_VARIANTS = ("within-cluster", "pooled")
AR1_FORMS = ("separable", "literal")
SEVERITY_FORMS = ("congruence", "kronecker")
AR1_METHODS = ("anchored", "binned", "pairwise")
PAIRINGS = ("same", "all")
RHO_BOUND = 0.99
EIG_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class CorrelationStructure:
    """Structure tag and its parameter.

    ``rho`` is used by ``exchangeable`` and ``ar1``; ``matrix`` (16 x 16 over
    tooth-major/zone-minor positions) by ``jackknife``.

    ``form`` selects the AR(1) entries.  ``"literal"`` gives
    ``rho^|j - j'|`` between teeth and 1 between zones of one tooth, a
    matrix of rank equal to the number of distinct teeth.  ``"separable"``
    (default) counts a zone change as one more lag,
    ``rho^(|j - j'| + I[k != k'])``, the Kronecker product of a tooth
    AR(1) and a zone exchangeable matrix sharing ``rho``; it is positive
    definite for ``-1/3 < rho < 1``.
    """

    kind: str = "independence"
    rho: float = 0.0
    matrix: np.ndarray | None = None
    form: str = "separable"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown correlation structure {self.kind!r}; expected one of {KINDS}")
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.form not in AR1_FORMS:
            raise ValueError(f"unknown AR(1) form {self.form!r}; expected one of {AR1_FORMS}")
        if self.kind == "jackknife":
            m = np.eye(N_POSITIONS) if self.matrix is None else np.asarray(self.matrix, dtype=float)
            if m.shape != (N_POSITIONS, N_POSITIONS):
                raise DimensionMismatch(f"jackknife matrix must be {N_POSITIONS}x{N_POSITIONS}")
            if not np.allclose(m, m.T) or not np.allclose(np.diag(m), 1.0):
                raise ValueError("jackknife matrix must be symmetric with unit diagonal")
            object.__setattr__(self, "matrix", m)

    @classmethod
    def from_code(cls, code: int) -> "CorrelationStructure":
        return cls(CODES[int(code)])

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "rho": float(self.rho)}
        if self.kind == "ar1":
            out["form"] = self.form
        if self.matrix is not None:
            out["matrix"] = np.asarray(self.matrix).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationStructure":
        m = d.get("matrix")
        return cls(d["kind"], float(d.get("rho", 0.0)), None if m is None else np.array(m), d.get("form", "separable"))


def position_index(tooth, zone) -> np.ndarray:
    """Position 0..15 from tooth numbers and zone codes (0..3) or letters."""
    tooth = np.asarray(tooth)
    zone = np.asarray(zone)
    if zone.dtype.kind in "OUS":
        zone = np.array([ZONE_LEVELS.index(z) for z in zone.ravel()]).reshape(zone.shape)
    return np.searchsorted(TOOTH_LEVELS, tooth) * len(ZONE_LEVELS) + zone


# --- assembly -------------------------------------------------------------


def between_obs_corr(structure: CorrelationStructure, tooth, zone) -> np.ndarray:
    """Between-observation correlation for one cluster (n, n) or a batch (G, n, n)."""
    tooth = np.asarray(tooth)
    batch = tooth.ndim == 2
    tooth = np.atleast_2d(tooth)
    zone = np.atleast_2d(np.asarray(zone))
    G, n = tooth.shape
    eye = np.broadcast_to(np.eye(n), (G, n, n))
    kind = structure.kind
    if kind == "independence":
        R = eye.copy()
    elif kind == "exchangeable":
        R = np.where(eye > 0, 1.0, structure.rho)
    elif kind == "ar1":
        d = np.abs(tooth[:, :, None] - tooth[:, None, :])
        if structure.form == "separable":
            d = d + (zone[:, :, None] != zone[:, None, :])
        R = np.where(eye > 0, 1.0, float(structure.rho) ** d)
    else:
        pos = position_index(tooth, zone)
        R = structure.matrix[pos[:, :, None], pos[:, None, :]]
        R = np.where(eye > 0, 1.0, R)
    return R if batch else R[0]


def assemble_R_presence(structure: CorrelationStructure, tooth, zone) -> np.ndarray:
    """Working correlation of a presence cluster whose rows are at (tooth, zone)."""
    return between_obs_corr(structure, tooth, zone)


def within_obs_corr(pi) -> np.ndarray:
    """Correlation matrix of one-trial multinomial indicators.

    ``pi`` of shape (L,) gives an (L, L) matrix; shape (n, L) gives (n, L, L).
    """
    pi = np.asarray(pi, dtype=float)
    single = pi.ndim == 1
    pi = np.atleast_2d(pi)
    if np.any(pi <= 0.0):
        raise DegenerateCategory("every category probability must be positive")
    sd = np.sqrt(pi * (1.0 - pi))
    if np.any(sd <= 0.0):
        raise DegenerateCategory("a category has probability one")
    B = -(pi[:, :, None] * pi[:, None, :]) / (sd[:, :, None] * sd[:, None, :])
    idx = np.arange(pi.shape[1])
    B[:, idx, idx] = 1.0
    return B[0] if single else B


def _kron_expand(Phi: np.ndarray, m: int) -> np.ndarray:
    """``Phi (x) J_m`` for a batch of (n, n) matrices."""
    G, n, _ = Phi.shape
    out = np.broadcast_to(Phi[:, :, None, :, None], (G, n, m, n, m))
    return out.reshape(G, n * m, n * m)


def sqrt_blocks(B: np.ndarray, floor: float = EIG_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric square roots and inverse square roots of a stack of (m, m) blocks."""
    lam, Q = np.linalg.eigh(B)
    lam = np.maximum(lam, floor)
    root = np.einsum("...ij,...j,...kj->...ik", Q, np.sqrt(lam), Q)
    with np.errstate(divide="ignore"):  # only the root is used when floor is 0
        inv_root = np.einsum("...ij,...j,...kj->...ik", Q, 1.0 / np.sqrt(lam), Q)
    return root, inv_root


def compose_severity(Phi: np.ndarray, B: np.ndarray, form: str = "congruence") -> np.ndarray:
    """Severity working correlation from between- and within-observation parts.

    ``Phi`` is (G, n, n) and ``B`` is (G, n, m, m); returns (G, n m, n m).

    ``form="kronecker"`` is ``(Phi (x) J_m) o B~`` with ``B~`` holding the
    ``B`` blocks on its diagonal and ones elsewhere: every category pair of
    two observations gets ``Phi_ab``.  That matrix is indefinite as soon as
    ``Phi_ab`` is sizable relative to ``1 + B_12``.

    ``form="congruence"`` (default) is ``B^1/2 (Phi (x) I_m) B^1/2`` with
    block-diagonal ``B^1/2``: diagonal blocks are still ``B``, the cross
    blocks are ``Phi_ab B_a^1/2 B_b^1/2`` and the result is positive
    semidefinite whenever ``Phi`` is.
    """
    G, n, m, _ = B.shape
    if form == "kronecker":
        R = _kron_expand(Phi, m).copy()
        Rv = R.reshape(G, n, m, n, m)
        a = np.arange(n)
        Rv[:, a, :, a, :] = np.transpose(Phi[:, a, a][:, :, None, None] * B, (1, 0, 2, 3))
        return R
    if form != "congruence":
        raise ValueError(f"unknown severity form {form!r}; expected one of {SEVERITY_FORMS}")
    root, _ = sqrt_blocks(B, 0.0)
    R = np.einsum("gab,gaij,gbjk->gaibk", Phi, root, root).reshape(G, n * m, n * m)
    return 0.5 * (R + np.swapaxes(R, 1, 2))


def assemble_R_severity(structure: CorrelationStructure, B, tooth, zone, form: str = "congruence") -> np.ndarray:
    """Working correlation of one severity cluster.

    Parameters
    ----------
    structure : CorrelationStructure
    B : array_like, shape (n, m, m)
        Within-observation indicator correlations.
    tooth, zone : array_like, shape (n,)
    form : {"congruence", "kronecker"}
        See :func:`compose_severity`.

    Returns
    -------
    ndarray, shape (n m, n m)
        Diagonal blocks equal ``B``.
    """
    B = np.asarray(B, dtype=float)
    if B.ndim != 3 or B.shape[0] != len(np.atleast_1d(tooth)):
        raise DimensionMismatch("B must hold one (m, m) block per observation")
    Phi = between_obs_corr(structure, np.atleast_1d(tooth), np.atleast_1d(zone))
    return compose_severity(Phi[None], B[None], form)[0]


def repair_psd(R: np.ndarray, floor: float = EIG_FLOOR) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigen-clip a (batch of) correlation matrices.

    Eigenvalues are floored at ``floor`` and the result re-normalized to unit
    diagonal.  Returns ``(R_repaired, eigvals, eigvecs)`` where the eigen pair
    factors the repaired matrix with eigenvalues already floored, so it can
    be inverted directly.
    """
    R = np.asarray(R, dtype=float)
    single = R.ndim == 2
    Rb = R[None] if single else R
    lam, Q = np.linalg.eigh(Rb)
    bad = lam[:, 0] < floor
    if np.any(bad):
        lb = np.maximum(lam[bad], floor)
        Rr = np.einsum("gij,gj,gkj->gik", Q[bad], lb, Q[bad])
        d = np.sqrt(np.einsum("gii->gi", Rr))
        Rr = Rr / (d[:, :, None] * d[:, None, :])
        Rr = 0.5 * (Rr + np.swapaxes(Rr, 1, 2))
        lam2, Q2 = np.linalg.eigh(Rr)
        Rb = Rb.copy()
        Rb[bad] = Rr
        lam = lam.copy()
        Q = Q.copy()
        lam[bad] = lam2
        Q[bad] = Q2
    lam = np.maximum(lam, floor)
    if single:
        return Rb[0], lam[0], Q[0]
    return Rb, lam, Q


# --- residuals and moment estimators --------------------------------------


def pearson_residuals_presence(y_zero, mu) -> np.ndarray:
    """``(y - mu) / sqrt(mu (1 - mu))``; zero-variance entries come back as NaN."""
    y_zero = np.asarray(y_zero, dtype=float)
    mu = np.asarray(mu, dtype=float)
    var = mu * (1.0 - mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (y_zero - mu) / np.sqrt(var)
    r[var <= 0.0] = np.nan
    return r


def pearson_residuals_severity(Z, pi) -> np.ndarray:
    """Standardized indicator residuals, shape (n, L); zero-variance entries NaN."""
    Z = np.asarray(Z, dtype=float)
    pi = np.asarray(pi, dtype=float)
    var = pi * (1.0 - pi)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (Z - pi) / np.sqrt(var)
    r[var <= 0.0] = np.nan
    return r


def _as_cluster_arrays(residuals) -> list[np.ndarray]:
    out = []
    for r in residuals:
        r = np.asarray(r, dtype=float)
        out.append(r[:, None] if r.ndim == 1 else r)
    return out


def estimate_phi(residuals) -> float:
    """Mean squared residual over all finite entries.

    Accepts a flat array or a sequence of per-cluster arrays.
    """
    if isinstance(residuals, np.ndarray):
        flat = residuals.ravel()
    else:
        parts = [np.asarray(r, dtype=float).ravel() for r in residuals]
        flat = np.concatenate(parts) if parts else np.zeros(0)
    flat = flat[np.isfinite(flat)]
    if flat.size == 0:
        raise EmptyResiduals("no residuals to estimate the dispersion from")
    return float(np.mean(flat**2))


def _scale(mean_product: float | np.ndarray, phi, scaling: str):
    if scaling == "liang-zeger":
        return mean_product / phi
    if scaling == "paper":
        return mean_product * phi
    raise ValueError(f"unknown scaling {scaling!r}; expected one of {SCALINGS}")


def _clamp(rho):
    return np.clip(rho, -RHO_BOUND, RHO_BOUND)


def exchangeable_moments(residuals, pairs: str = "all") -> tuple[float, float]:
    """Sum of cross-observation residual products and their count.

    With ``pairs="all"`` every category pair of two distinct observations of
    a cluster counts, with ``"same"`` only matching categories do.
    Observations with any non-finite residual are skipped.
    """
    if pairs not in PAIRINGS:
        raise ValueError(f"unknown pairing {pairs!r}")
    total = 0.0
    count = 0.0
    for r in _as_cluster_arrays(residuals):
        ok = np.all(np.isfinite(r), axis=1)
        r = r[ok]
        n, m = r.shape
        if n < 2:
            continue
        if pairs == "all":
            s = r.sum(axis=1)
            total += s.sum() ** 2 - np.sum(s**2)
            count += n * (n - 1) * m * m
        else:
            total += float(np.sum(r.sum(axis=0) ** 2) - np.sum(r**2))
            count += n * (n - 1) * m
    return float(total), float(count)


def estimate_rho_exchangeable(residuals, phi: float, scaling: str = "liang-zeger", pairs: str = "all") -> float:
    """Exchangeable correlation from within-cluster cross-products.

    The average runs over ordered pairs of distinct observations
    ``(j, k) != (j', k')``, then is scaled by the dispersion.
    """
    total, count = exchangeable_moments(residuals, pairs)
    if count == 0:
        raise NoPairs("no cluster has two or more usable observations")
    return float(_clamp(_scale(total / count, phi, scaling)))


def estimate_rho_ar1(
    residuals,
    teeth,
    min_pairs: int = 10,
    method: str = "anchored",
    zones=None,
    phi: float = 1.0,
    scaling: str = "liang-zeger",
) -> float:
    """AR(1) parameter as ``exp(slope)`` of log cross-products regressed on distance.

    Pairs are distinct observations of a cluster, same indicator category,
    at positive distance.

    ``method="pairwise"`` regresses ``log(r r')`` of every pair with a
    positive product on tooth distance.  For binary residuals the
    conditional mean of those logs barely moves with the distance, so the
    estimate sits near 1 whatever the correlation.  ``method="binned"`` first
    averages the products at each tooth distance and regresses the log of the
    positive averages, weighting each distance by its pair count.  Both keep
    a free intercept, so a flat profile (exchangeable-like data) gives a
    slope near 0 and ``rho`` near 1 regardless of the level.

    ``method="anchored"`` (default) bins the dispersion-scaled products and
    fits ``log(mean) = d log(rho)`` through the origin, so the fit respects
    the level as well as the decay.  When ``zones`` are given the distance is
    the separable one, ``|j - j'| + 1[k != k']``, and same-tooth pairs count.

    Raises
    ------
    InsufficientPairs
        Too few usable pairs, or a single usable distance for the
        free-intercept methods.
    """
    if method not in AR1_METHODS:
        raise ValueError(f"unknown AR(1) method {method!r}; expected one of {AR1_METHODS}")
    anchored = method == "anchored"
    zones = [None] * len(teeth) if zones is None or not anchored else zones
    prods, dists = [], []
    for r, t, z in zip(_as_cluster_arrays(residuals), teeth, zones):
        t = np.asarray(t)
        n = len(t)
        if n < 2:
            continue
        a, b = np.triu_indices(n, k=1)
        d = np.abs(t[a] - t[b])
        if z is not None:
            z = np.asarray(z)
            d = d + (z[a] != z[b])
        prod = r[a] * r[b]  # (pairs, m), same category
        use = (d[:, None] > 0) & np.isfinite(prod)
        if np.any(use):
            prods.append(prod[use])
            dists.append(np.broadcast_to(d[:, None], prod.shape)[use])
    prod = np.concatenate(prods) if prods else np.zeros(0)
    dist = np.concatenate(dists).astype(float) if dists else np.zeros(0)
    if method == "pairwise":
        keep = prod > 0
        y, x, w = np.log(prod[keep]), dist[keep], np.ones(int(keep.sum()))
        n_used = len(y)
    else:
        levels, inv, counts = np.unique(dist, return_inverse=True, return_counts=True)
        means = np.bincount(inv, weights=prod, minlength=len(levels)) / np.maximum(counts, 1)
        if anchored:
            means = _scale(means, phi, scaling)
        keep = means > 0
        y, x, w = np.log(means[keep]), levels[keep], counts[keep].astype(float)
        n_used = int(w.sum())
    if n_used == 0:
        raise InsufficientPairs("no residual pair with positive product at positive distance")
    if n_used < max(min_pairs, 2) or (not anchored and np.unique(x).size < 2):
        raise InsufficientPairs(f"{n_used} usable pairs over {np.unique(x).size} distinct distance(s)")
    if anchored:
        slope = float(np.sum(w * x * y) / np.sum(w * x**2))
    else:
        xm = np.average(x, weights=w)
        ym = np.average(y, weights=w)
        slope = float(np.sum(w * (x - xm) * (y - ym)) / np.sum(w * (x - xm) ** 2))
    return float(_clamp(np.exp(slope)))


def estimate_rho_jackknife(
    residuals,
    positions,
    phi_residuals=None,
    scaling: str = "liang-zeger",
    variant: str = "within-cluster",
    n_positions: int = N_POSITIONS,
    pairs: str = "all",
) -> np.ndarray:
    """Position-pair correlation matrix averaged over leave-one-cluster-out estimates.

    Parameters
    ----------
    residuals : sequence of (n_i, m) arrays
        Residuals used in the cross-products.
    positions : sequence of (n_i,) int arrays
        Position index 0..n_positions-1 of every row.
    phi_residuals : sequence of arrays, optional
        Residuals defining the leave-one-out dispersion (default: ``residuals``).
    scaling : {"liang-zeger", "paper"}
    variant : {"within-cluster", "pooled"}
        ``within-cluster`` averages products of two positions inside the same
        cluster; ``pooled`` pairs residuals from two different clusters.
    pairs : {"all", "same"}
        Category pairs entering a product (see :func:`exchangeable_moments`).

    Returns
    -------
    ndarray, shape (n_positions, n_positions)
        Symmetric, unit diagonal, off-diagonal entries clamped to +-0.99.
    """
    if variant not in JACKKNIFE_VARIANTS:
        raise ValueError(f"unknown jackknife variant {variant!r}")
    res = _as_cluster_arrays(residuals)
    N = len(res)
    if N < 2:
        raise TooFewClusters("the jackknife needs at least two clusters")
    P = n_positions
    m = res[0].shape[1] if N else 1

    if pairs not in PAIRINGS:
        raise ValueError(f"unknown pairing {pairs!r}")
    # per-position residual sums, one channel per category (or one summed channel)
    nch = 1 if pairs == "all" else m
    U = np.zeros((nch, N, P))
    H = np.zeros((N, P))  # has-position indicator
    for i, (r, pos) in enumerate(zip(res, positions)):
        pos = np.asarray(pos, dtype=np.int64)
        ok = np.all(np.isfinite(r), axis=1)
        U[:, i, pos[ok]] = r[ok].sum(axis=1)[None] if pairs == "all" else r[ok].T
        H[i, pos[ok]] = 1.0

    phi_src = res if phi_residuals is None else _as_cluster_arrays(phi_residuals)
    ss = np.array([np.nansum(r**2) for r in phi_src])
    cnt = np.array([np.isfinite(r).sum() for r in phi_src], dtype=float)
    phi_loo = (ss.sum() - ss) / np.maximum(cnt.sum() - cnt, 1.0)

    C = np.einsum("cip,ciq->pq", U, U)
    K = H.T @ H
    # leave-one-out numerators and counts, shape (N, P, P)
    own_c = np.einsum("cip,ciq->ipq", U, U)
    own_k = H[:, :, None] * H[:, None, :]
    if variant == "within-cluster":
        num = C[None] - own_c
        den = K[None] - own_k
    else:
        Ul = U.sum(axis=1)[:, None, :] - U
        Hl = H.sum(axis=0)[None] - H
        num = np.einsum("cip,ciq->ipq", Ul, Ul) - (C[None] - own_c)
        den = Hl[:, :, None] * Hl[:, None, :] - (K[None] - own_k)
    den = den * (m * m if pairs == "all" else m)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    loo = _scale(mean, phi_loo[:, None, None], scaling)
    est = _clamp(loo.mean(axis=0))
    est = 0.5 * (est + est.T)
    np.fill_diagonal(est, 1.0)
    return est


def estimate_structure(
    kind: str,
    residuals,
    teeth,
    positions,
    phi: float,
    scaling: str = "liang-zeger",
    variant: str = "within-cluster",
    phi_residuals=None,
    min_pairs: int = 10,
    ar1_form: str = "separable",
    pairs: str = "all",
    ar1_method: str = "anchored",
) -> tuple[CorrelationStructure, str | None]:
    """Re-estimate a structure of the given kind; returns (structure, note).

    An AR(1) estimate without enough usable pairs falls back to the
    exchangeable estimator and says so in the note.
    """
    if kind == "independence":
        return CorrelationStructure("independence"), None
    if kind == "exchangeable":
        try:
            return CorrelationStructure("exchangeable", estimate_rho_exchangeable(residuals, phi, scaling, pairs)), None
        except NoPairs:
            return CorrelationStructure("exchangeable", 0.0), "no within-cluster pairs; rho set to 0"
    if kind == "ar1":
        try:
            zones = None
            if ar1_form == "separable" and positions is not None:
                zones = [np.asarray(p) % len(ZONE_LEVELS) for p in positions]
            rho = estimate_rho_ar1(residuals, teeth, min_pairs, ar1_method, zones, phi, scaling)
            return CorrelationStructure("ar1", rho, form=ar1_form), None
        except InsufficientPairs as exc:
            msg = f"AR(1) estimation fell back to exchangeable: {exc}"
            warnings.warn(msg, EstimationWarning, stacklevel=3)
            try:
                rho = estimate_rho_exchangeable(residuals, phi, scaling, pairs)
            except NoPairs:
                rho = 0.0
            return CorrelationStructure("exchangeable", rho), msg
    if kind == "jackknife":
        try:
            mat = estimate_rho_jackknife(residuals, positions, phi_residuals, scaling, variant, pairs=pairs)
        except TooFewClusters:
            return CorrelationStructure("jackknife"), "fewer than two clusters; identity used"
        return CorrelationStructure("jackknife", matrix=mat), None
    raise ValueError(f"unknown correlation structure {kind!r}")
