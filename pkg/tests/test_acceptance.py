"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one ``ACCEPTANCE Cn: PASS|FAIL`` line (visible under
``pytest -v``) before asserting.
"""
import time
import warnings

import numpy as np
from scipy.stats import multivariate_normal, norm
from scipy.special import expit

from hurdlegee.cli import main
from hurdlegee.correlation import (
    CorrelationStructure,
    assemble_R_presence,
    assemble_R_severity,
    repair_psd,
    within_obs_corr,
)
from hurdlegee.combined import fit_combined
from hurdlegee.data import ZONE_LEVELS, presence_view, severity_view
from hurdlegee.inference import ModelSpec, cluster_bootstrap, james_stein
from hurdlegee.meanmodel import (
    PresenceParams,
    SeverityParams,
    multinomial_cov_blocks,
    presence_jacobian,
    presence_mean,
    severity_cell_probs,
    severity_jacobian,
)
from hurdlegee.simulation import oracle_logistic_fit, oracle_proportional_odds_fit
from hurdlegee.solver import FitSettings, fit_presence, fit_severity

from conftest import GOLDEN, small_dataset
from test_report import write_artifacts

COLS = ("dental_age", "Total_mgF")
EXCH = FitSettings(correlation="exchangeable")


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE C{n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# --- C1 / C2: independence equivalence --------------------------------------


def test_c1_presence_independence_equivalence(fixture200, capsys):
    view = presence_view(fixture200, 1)
    t0 = time.perf_counter()
    fit = fit_presence(view)
    elapsed = time.perf_counter() - t0
    err = np.max(np.abs(np.r_[fit.params.alpha, fit.params.beta] - oracle_logistic_fit(view)))
    verdict(capsys, 1, fit.converged and err <= 1e-6 and elapsed < 5.0,
            f"max|theta - IRLS| = {err:.2e} (tol 1e-6), {elapsed:.2f} s (limit 5 s)")


def test_c2_severity_independence_equivalence(fixture200, capsys):
    view = severity_view(fixture200, 1)
    levels = {int(v) for v in np.unique(view.level)}
    t0 = time.perf_counter()
    fit = fit_severity(view)
    elapsed = time.perf_counter() - t0
    err = np.max(np.abs(np.r_[fit.params.cutpoints, fit.params.beta] - oracle_proportional_odds_fit(view)))
    verdict(capsys, 2, levels == {1, 2, 3} and fit.converged and err <= 1e-4 and elapsed < 10.0,
            f"levels {sorted(levels)}, max|theta - ML| = {err:.2e} (tol 1e-4), {elapsed:.2f} s (limit 10 s)")


# --- C3: Jacobians ------------------------------------------------------------


def _central(f, theta, h=1e-6):
    cols = []
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        cols.append((f(theta + e) - f(theta - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def test_c3_jacobians_match_central_differences(capsys):
    rng = np.random.default_rng(2024)
    worst_p = worst_s = 0.0
    for _ in range(100):
        X = rng.normal(size=(8, 4))
        theta = rng.normal(size=5)
        J = presence_jacobian(PresenceParams.from_theta(theta), X)
        fd = _central(lambda th: presence_mean(PresenceParams.from_theta(th), X), theta)
        worst_p = max(worst_p, _rel(J, fd))

        X = rng.normal(size=(6, 3))
        cut = np.cumsum(np.r_[rng.normal(), rng.uniform(0.2, 2.0)])
        beta = rng.normal(size=3)
        gamma = rng.uniform(0.2, 2.0)
        J = severity_jacobian(SeverityParams(cut, beta, gamma), X)
        fd = _central(lambda th: severity_cell_probs(SeverityParams(th[:2], th[2:], gamma), X).pi.ravel(),
                      np.r_[cut, beta])
        worst_s = max(worst_s, _rel(J, fd))
    verdict(capsys, 3, worst_p <= 1e-6 and worst_s <= 1e-6,
            f"worst relative error presence {worst_p:.1e}, severity {worst_s:.1e} (tol 1e-6, 100 draws)")


# --- C4: correlation recovery ---------------------------------------------------


def test_c4_exchangeable_correlation_recovery(capsys, quiet):
    rho0, alpha = 0.4, 0.3
    mu = expit(alpha)
    # the binary correlation the copula induces, measured on a large independent sample
    big = presence_view(small_dataset(n=20000, seed=99, rho=rho0, beta=(0.0, 0.0)), 1)
    y = big.y_zero.reshape(-1, 16)
    c = np.corrcoef(y.T)
    induced = float(np.mean(c[~np.eye(16, dtype=bool)]))
    # closed form from the bivariate normal, as a check on the measurement
    z = norm.ppf(mu)
    p00 = multivariate_normal(mean=[0, 0], cov=[[1, rho0], [rho0, 1]]).cdf([z, z])
    exact = (p00 - mu**2) / (mu * (1 - mu))
    assert abs(induced - exact) < 0.01

    est = []
    for r in range(20):
        d = small_dataset(n=500, seed=400 + r, rho=rho0, beta=(0.0, 0.0))
        fit = fit_presence(presence_view(d, 1, columns=COLS), FitSettings(correlation="exchangeable",
                                                                            scaling="liang-zeger"))
        est.append(fit.structure.rho)
    gap = abs(np.mean(est) - induced)
    verdict(capsys, 4, gap <= 0.05,
            f"mean rho_hat {np.mean(est):.4f} vs induced {induced:.4f} (exact {exact:.4f}), gap {gap:.4f} (tol 0.05)")


# --- C5: robustness to the working structure ----------------------------------------


def test_c5_misspecified_working_correlation(capsys, quiet):
    beta = np.array([0.6, -0.5])
    gamma = 0.7
    bp, bs = [], []
    for r in range(100):
        d = small_dataset(n=500, seed=500 + r, corr="ar1", rho=0.5, beta=tuple(beta), gamma=gamma)
        bp.append(fit_presence(presence_view(d, 1, columns=COLS), EXCH).params.beta)
        bs.append(fit_severity(severity_view(d, 1, columns=COLS), EXCH).params.beta)
    lines, ok = [], True
    for piece, reps, truth in (("presence", np.array(bp), beta), ("severity", np.array(bs), gamma * beta)):
        bias = reps.mean(axis=0) - truth
        mcse = reps.std(axis=0, ddof=1) / np.sqrt(len(reps))
        ok &= bool(np.all(np.abs(bias) < 2 * mcse))
        lines.append(f"{piece} |bias|/MC-SE = {np.round(np.abs(bias) / mcse, 2).tolist()}")
    verdict(capsys, 5, ok, "; ".join(lines) + " (limit 2)")


# --- C6: combined model ---------------------------------------------------------------


def test_c6_combined_model_recovery(capsys, quiet):
    gammas, worst, all_conv = [], 0.0, True
    for r in range(100):
        d = small_dataset(n=500, seed=600 + r, beta=(0.8, 0.5), gamma=0.7)
        pv = presence_view(d, 1, columns=COLS)
        sv = severity_view(d, 1, columns=COLS)
        fit = fit_combined(pv, sv, fit_presence(pv, EXCH), fit_severity(sv, EXCH), EXCH)
        gammas.append(fit.gamma)
        all_conv &= fit.converged
        worst = max(worst, float(np.max(np.abs(fit.psi))) / fit.n_obs)
    g = float(np.mean(gammas))
    verdict(capsys, 6, 0.6 <= g <= 0.8 and all_conv and worst <= 1e-5,
            f"mean gamma_hat {g:.4f} (range [0.6, 0.8]), all converged {all_conv}, "
            f"max |psi|/n {worst:.1e} (tol 1e-5)")


# --- C7: James-Stein ------------------------------------------------------------------------


def test_c7_james_stein_clamp_and_dominance(capsys):
    rng = np.random.default_rng(7)
    clamp_ok = True
    for _ in range(2000):
        b = rng.normal(scale=rng.uniform(0.1, 3.0), size=4)
        r = james_stein(b)
        if np.sum(b**2) <= 2:
            clamp_ok &= bool(r.shrink_factor == 0.0 and np.all(r.js_values == b.mean()))
    truth = 0.8
    raw = truth + rng.normal(size=(1000, 4))
    js = np.array([james_stein(b).js_values for b in raw])
    ratio = float(np.sum((js - truth) ** 2) / np.sum((raw - truth) ** 2))
    verdict(capsys, 7, clamp_ok and ratio <= 0.95,
            f"clamp exact {clamp_ok}, JS/raw squared error {ratio:.3f} (limit 0.95, 1000 draws)")


# --- C8: bootstrap ---------------------------------------------------------------------------


def test_c8_bootstrap_determinism_and_coverage(capsys, quiet):
    beta = np.array([0.6, -0.5])
    spec = ModelSpec("A", (1,), (1,), columns=COLS)

    def data(seed):
        return small_dataset(n=100, seed=seed, corr="independence", rho=0.0, beta=tuple(beta), teeth=(7,))

    a = cluster_bootstrap(data(1), spec, B=20, seed=3, mode="full", jobs=1)
    b = cluster_bootstrap(data(1), spec, B=20, seed=3, mode="full", jobs=1)
    same = all(np.array_equal(a.interval(k, "presence"), b.interval(k, "presence"), equal_nan=True)
               for k in ("estimate", "standardized", "js"))

    hits = np.zeros(2)
    for r in range(200):
        iv = cluster_bootstrap(data(8000 + r), spec, B=100, seed=r * 1000, mode="estimates", jobs=1)
        lo, hi = iv.interval("estimate", "presence")[0, :2].T
        hits += (lo <= beta) & (beta <= hi)
    cover = hits / 200
    verdict(capsys, 8, same and bool(np.all((cover >= 0.88) & (cover <= 0.99))),
            f"bit-exact rerun {same}, coverage {cover.tolist()} (range [0.88, 0.99], 200 x B=100)")


# --- C9: table fidelity ------------------------------------------------------------------------


def test_c9_report_matches_golden(tmp_path, capsys):
    write_artifacts(tmp_path)
    ok = True
    for latex, golden in ((False, "report_A.1.1.md"), (True, "report_A.1.1.tex")):
        out = tmp_path / golden
        rc = main(["report", "--dir", str(tmp_path), "--output", str(out)] + (["--latex"] if latex else []))
        ok &= rc == 0 and out.read_bytes() == (GOLDEN / golden).read_bytes()
    row = [line for line in (tmp_path / "report_A.1.1.md").read_text(encoding="utf-8").splitlines()
           if line.startswith("| Avg_homeppm")]
    verdict(capsys, 9, ok, f"byte-exact markdown and LaTeX; {row[0] if row else 'row missing'}")


# --- C10: structural invariants ------------------------------------------------------------------


def test_c10_structural_invariants(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    teeth = np.repeat([7, 8, 9, 10], 4)
    zones = np.tile(np.arange(len(ZONE_LEVELS)), 4)
    checked = 0
    failures = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(300):
            k = int(rng.integers(1, 17))
            idx = np.sort(rng.choice(16, size=k, replace=False))
            rho = float(rng.uniform(-0.3, 0.95))
            pi = rng.dirichlet(np.full(3, rng.uniform(0.3, 3.0)), size=k)
            B = within_obs_corr(pi)[:, :2, :2]
            mats = [assemble_R_presence(CorrelationStructure(kind, rho), teeth[idx], zones[idx])
                    for kind in ("independence", "exchangeable", "ar1")]
            mats += [assemble_R_severity(CorrelationStructure(kind, rho), B, teeth[idx], zones[idx], form)
                     for kind in ("exchangeable", "ar1") for form in ("congruence", "kronecker")]
            for R in mats:
                Rr, lam, _ = repair_psd(R)
                if not (np.allclose(Rr, Rr.T, atol=1e-12) and np.allclose(np.diag(Rr), 1.0, atol=1e-10)
                        and np.min(np.linalg.eigvalsh(Rr)) >= -1e-10 and lam.min() > 0):
                    failures.append(("R", rho, k))
                checked += 1
            V = multinomial_cov_blocks(pi)
            if not np.allclose(V.sum(axis=2), 0.0, atol=1e-15):
                failures.append(("V", rho, k))
        # indicator triples of real severity views
        d = small_dataset(n=200, seed=10)
        Z = severity_view(d, 1).Z
        triples = bool(np.all(Z.sum(axis=1) == 1.0) and np.all((Z == 0) | (Z == 1)))
    elapsed = time.perf_counter() - t0
    verdict(capsys, 10, not failures and triples and elapsed < 60.0,
            f"{checked} matrices symmetric/unit-diagonal/PSD, variance rows sum to 0, indicators sum to 1 "
            f"({triples}); {elapsed:.1f} s (limit 60 s)")
