import numpy as np
import pytest
import scipy.optimize
from scipy.special import expit, logit

from hurdlegee.correlation import estimate_phi, estimate_rho_exchangeable
from hurdlegee.data import PresenceView, SeverityView, presence_view
from hurdlegee.errors import InfeasibleCorrelation, MissingLevel, NonmonotoneCutpoints, Separation
from hurdlegee.simulation import (
    TimeTruth,
    TruthSpec,
    generate_dataset,
    log_likelihood_proportional_odds,
    oracle_logistic_fit,
    oracle_proportional_odds_fit,
)

COV = ("x1", "x2")


def spec_for(n=100, alpha=0.0, beta=(0.0, 0.0), cut=(-0.5, 1.0), **kw):
    return TruthSpec(n, {1: TimeTruth(alpha, beta, cut)}, covariate_names=COV, **kw)


def flat_presence(X, w):
    X = np.asarray(X, dtype=float).reshape(len(w), -1)
    n = len(w)
    return PresenceView(1, np.array(["1"], dtype=object), np.array([0, n]), X, np.full(n, 7), np.zeros(n, int),
                        tuple(f"c{j}" for j in range(X.shape[1])), w=np.asarray(w, dtype=float))


def flat_severity(X, level):
    X = np.asarray(X, dtype=float).reshape(len(level), -1)
    n = len(level)
    return SeverityView(1, np.array(["1"], dtype=object), np.array([0, n]), X, np.full(n, 7), np.zeros(n, int),
                        tuple(f"c{j}" for j in range(X.shape[1])), level=np.asarray(level))


# --- generator ----------------------------------------------------------------------


def test_zero_rate_matches_alpha():
    d = generate_dataset(spec_for(6250, alpha=float(logit(0.8))), 1)
    assert len(d) == 100_000
    assert np.mean(d.fri == 0) == pytest.approx(0.8, abs=0.01)


def test_cell_frequencies_within_three_se():
    mu0 = 0.4
    cut = np.array([-0.5, 1.0])
    d = generate_dataset(spec_for(6250, alpha=float(logit(mu0)), cut=tuple(cut), correlation="exchangeable",
                                  rho=0.3), 2)
    cum = np.r_[0.0, expit(cut), 1.0]
    p = np.r_[mu0, (1 - mu0) * np.diff(cum)]
    freq = np.bincount(d.fri, minlength=4) / len(d)
    # clustering inflates the variance, so the SE uses the number of clusters as a floor
    se = np.sqrt(p * (1 - p) / 6250)
    assert np.all(np.abs(freq - p) <= 3 * se), (freq, p)


def test_independent_copula_gives_uncorrelated_residuals():
    alpha = 0.2
    d = generate_dataset(spec_for(2000, alpha=alpha), 3)
    v = presence_view(d, 1)
    r = (v.y_zero - expit(alpha)) / np.sqrt(expit(alpha) * (1 - expit(alpha)))
    res = np.split(r, v.offsets[1:-1])
    assert abs(estimate_rho_exchangeable(res, estimate_phi(res))) < 0.02


def test_copula_monotone_in_rho():
    corr = []
    for rho in (0.0, 0.3, 0.6):
        d = generate_dataset(spec_for(1500, correlation="exchangeable", rho=rho), 4)
        v = presence_view(d, 1)
        y = v.y_zero.reshape(1500, 16)
        c = np.corrcoef(y.T)
        corr.append(np.mean(c[~np.eye(16, dtype=bool)]))
    assert corr[0] < corr[1] < corr[2]


def test_same_seed_same_bytes():
    s = spec_for(50, beta=(0.5, -0.3), correlation="ar1", rho=0.4, missing_rate=0.2, visit_prob=0.8)
    assert generate_dataset(s, 9).to_csv() == generate_dataset(s, 9).to_csv()
    assert generate_dataset(s, 9).to_csv() != generate_dataset(s, 10).to_csv()


def test_gamma_truth_links_slopes():
    tt = TimeTruth(0.0, (1.0, -2.0), gamma=0.5)
    np.testing.assert_array_equal(tt.severity_slopes(), [0.5, -1.0])
    assert np.all(TimeTruth(0.0, (1.0, 2.0)).severity_slopes() == 0)


def test_spec_validation():
    with pytest.raises(InfeasibleCorrelation):
        spec_for(correlation="exchangeable", rho=-0.1)  # below -1/15 for 16 positions
    with pytest.raises(InfeasibleCorrelation):
        spec_for(correlation="ar1", rho=1.0)
    with pytest.raises(NonmonotoneCutpoints):
        TimeTruth(0.0, (0.0,), (1.0, 0.0))
    with pytest.raises(ValueError):
        spec_for(beta=(0.0,) * 3)


def test_truth_json_round_trip():
    s = spec_for(10, beta=(0.5, 0.1), correlation="exchangeable", rho=0.2)
    again = TruthSpec.from_json(s.to_json())
    assert again == s
    assert generate_dataset(again, 0).to_csv() == generate_dataset(s, 0).to_csv()


# --- logistic oracle -------------------------------------------------------------------


def test_logistic_oracle_balanced():
    theta = oracle_logistic_fit(flat_presence([-1, -1, 1, 1], [1, 0, 1, 0]))
    np.testing.assert_allclose(theta, [0.0, 0.0], atol=1e-12)


def test_logistic_oracle_two_groups_closed_form():
    # x=0: 1 of 4 zero; x=1: 3 of 4 zero (y_zero = 1 - w)
    x = [0, 0, 0, 0, 1, 1, 1, 1]
    w = [0, 1, 1, 1, 0, 0, 0, 1]
    theta = oracle_logistic_fit(flat_presence(x, w))
    np.testing.assert_allclose(theta, [logit(0.25), logit(0.75) - logit(0.25)], atol=1e-10)


def test_logistic_oracle_separation():
    with pytest.raises(Separation):
        oracle_logistic_fit(flat_presence([0, 1, 2, 3], [0, 0, 1, 1]))


# --- proportional-odds oracle ------------------------------------------------------------


def test_po_oracle_null_slopes():
    level = np.r_[np.full(3, 1), np.full(5, 2), np.full(4, 3)]
    # an intercept-only fit needs a covariate with zero effect: use a balanced +-1 column per level
    x = np.r_[[1, -1, 0], [1, -1, 1, -1, 0], [1, -1, 1, -1]]
    theta = oracle_proportional_odds_fit(flat_severity(x, level))
    np.testing.assert_allclose(theta[:2], logit(np.cumsum([3, 5, 4])[:2] / 12), atol=1e-8)
    np.testing.assert_allclose(theta[2:], 0.0, atol=1e-8)


def test_po_oracle_matches_generic_optimizer():
    x = [-1.0, -0.4, 0.2, 0.5, 1.1, 1.6]
    level = [1, 2, 1, 3, 2, 3]
    view = flat_severity(x, level)
    theta = oracle_proportional_odds_fit(view)
    res = scipy.optimize.minimize(lambda th: -log_likelihood_proportional_odds(th, view), [-1.0, 1.0, 0.0],
                                  method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    np.testing.assert_allclose(theta, res.x, atol=1e-5)


def test_po_oracle_missing_level():
    with pytest.raises(MissingLevel):
        oracle_proportional_odds_fit(flat_severity([0.1, 0.2, 0.3], [1, 2, 2]))
