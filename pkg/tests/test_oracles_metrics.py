import math

import numpy as np
import pytest
from scipy import stats

from ald.harness.metrics import (InsufficientSamplesError, batch_means_se, histogram_tv, sample_metrics)
from ald.harness.oracles import ConjugateOracle, GaussianTarget, OracleError, build_grid_oracle, tabulate_grid
from ald.harness.vi import fit_gaussian_vi
from ald.models import TOY_SIGMA_X, conjugate_gaussian_model

# Expected histogram TV of 10^4 exact draws on the 50x50 grid (see expected_tv below).
IID_TV_BOUND = 0.095


def test_conjugate_posterior_examples():
    o = ConjugateOracle(np.zeros(2), np.eye(2), np.eye(2))
    x = np.array([1.0, -3.0])
    mean, cov = o.posterior(x)
    np.testing.assert_allclose(mean, x / 2)
    np.testing.assert_allclose(cov, np.eye(2) / 2)
    o2 = ConjugateOracle(np.array([0.3, -0.2]), np.array([[2.0, 0.4], [0.4, 1.0]]), TOY_SIGMA_X)
    np.testing.assert_allclose(o2.posterior(o2.mu_z)[0], o2.mu_z, atol=1e-14)


def test_conjugate_posterior_against_joint_gaussian():
    # condition the joint Gaussian of (z, x) directly
    mu_z, Sz, Sx = np.array([0.3, -0.2]), np.array([[2.0, 0.4], [0.4, 1.0]]), TOY_SIGMA_X
    x = np.array([0.9, 1.4])
    m = mu_z + Sz @ np.linalg.solve(Sz + Sx, x - mu_z)
    C = Sz - Sz @ np.linalg.solve(Sz + Sx, Sz)
    mean, cov = ConjugateOracle(mu_z, Sz, Sx).posterior(x)
    np.testing.assert_allclose(mean, m, rtol=1e-12)
    np.testing.assert_allclose(cov, C, rtol=1e-12)
    ev = ConjugateOracle(mu_z, Sz, Sx).log_evidence(x)
    assert ev == pytest.approx(stats.multivariate_normal(mu_z, Sz + Sx).logpdf(x), rel=1e-12)


def test_oracle_rejects_non_spd():
    with pytest.raises(ValueError):
        ConjugateOracle(np.zeros(2), np.eye(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_grid_oracle_matches_conjugate_moments():
    model = conjugate_gaussian_model(np.zeros(2), np.eye(2), TOY_SIGMA_X)
    x = np.array([0.8, -0.4])
    grid = build_grid_oracle(model, x)
    mean, cov = ConjugateOracle.from_model(model).posterior(x)
    np.testing.assert_allclose(grid.mean, mean, atol=1e-4)
    np.testing.assert_allclose(grid.cov, cov, atol=1e-3)
    mass, xe, ye = grid.histogram()
    assert mass.shape == (50, 50) and mass.sum() == pytest.approx(1.0)


def test_grid_oracle_uniform_and_empty():
    g = tabulate_grid(lambda Z: np.zeros(len(Z)), ((-1.0, 3.0), (2.0, 4.0)), resolution=40)
    np.testing.assert_allclose(g.mean, [1.0, 3.0], atol=1e-12)
    with pytest.raises(OracleError):
        tabulate_grid(lambda Z: np.full(len(Z), -np.inf), ((0, 1), (0, 1)), resolution=10)
    with pytest.raises(ValueError):
        g.histogram(bins=30)


def expected_tv(p: np.ndarray, n: int) -> float:
    """E[TV] between multinomial frequencies of n draws and cell masses p (exact per-cell binomial sums)."""
    total = 0.0
    for pk in p.ravel():
        if pk < 1e-15:
            continue
        k = np.arange(0, n + 1)
        pmf = stats.binom.pmf(k, n, pk)
        total += np.sum(pmf * np.abs(k / n - pk))
    return 0.5 * total


def test_iid_calibration():
    target = GaussianTarget(np.array([0.2, -0.1]), np.array([[0.5, 0.2], [0.2, 0.4]]))
    mass = target.histogram()[0]
    exact = expected_tv(mass, 10_000)
    assert 0.08 < exact < IID_TV_BOUND
    draws = np.random.default_rng(0).multivariate_normal(target.mean, target.cov, size=10_000)
    m = sample_metrics(draws, target)
    assert m["mean_err"] < 0.05
    assert m["hist_tv"] < IID_TV_BOUND


def test_point_mass_metrics():
    target = GaussianTarget(np.array([0.2, -0.1]), np.array([[0.5, 0.2], [0.2, 0.4]]))
    m = sample_metrics(np.tile(target.mean, (200, 1)), target)
    assert m["cov_frob_err"] == pytest.approx(np.linalg.norm(target.cov), rel=1e-12)
    assert m["mean_err"] < 1e-14
    assert m["hist_tv"] > 0.9


def test_metrics_need_samples():
    target = GaussianTarget(np.zeros(2), np.eye(2))
    with pytest.raises(InsufficientSamplesError):
        sample_metrics(np.zeros((99, 2)), target)


def test_tv_counts_mass_outside_bounds():
    target = GaussianTarget(np.zeros(2), np.eye(2))
    assert histogram_tv(np.full((500, 2), 100.0), target) == pytest.approx(1.0)


def test_batch_means_se_iid():
    rng = np.random.default_rng(3)
    se = batch_means_se(rng.standard_normal((40000, 2)))
    np.testing.assert_allclose(se, 1 / math.sqrt(40000), rtol=0.4)
    # AR(1) with rho=0.9: variance of the mean is inflated by (1+rho)/(1-rho)
    z = np.zeros(200000)
    e = rng.standard_normal(200000)
    for t in range(1, len(z)):
        z[t] = 0.9 * z[t - 1] + e[t]
    se_ar = batch_means_se(z)
    exact = math.sqrt(np.var(z) * 19 / len(z))
    assert se_ar == pytest.approx(exact, rel=0.4)


# -------------------------------------------------------------------- VI
def test_vi_recovers_conjugate_posterior():
    model = conjugate_gaussian_model(np.zeros(2), np.eye(2), TOY_SIGMA_X)
    X = np.array([[0.5, 1.0], [-1.0, 0.3]])
    oracle = ConjugateOracle.from_model(model)
    prec = np.linalg.inv(oracle.post_cov)
    full = fit_gaussian_vi(model, X, "full", iterations=1500, lr=0.02, rng=np.random.default_rng(0))
    diag = fit_gaussian_vi(model, X, "diagonal", iterations=1500, lr=0.02, rng=np.random.default_rng(0))
    for i, x in enumerate(X):
        mean, cov = oracle.posterior(x)
        np.testing.assert_allclose(full.means[i], mean, atol=0.05)
        np.testing.assert_allclose(full.covs[i], cov, atol=0.05)
        np.testing.assert_allclose(diag.means[i], mean, atol=0.05)
        # mean-field optimum: variances are the inverse precision diagonal
        np.testing.assert_allclose(np.diag(diag.covs[i]), 1.0 / np.diag(prec), rtol=0.15)
    assert diag.sample(np.random.default_rng(1), 7).shape == (7, 2, 2)
    with pytest.raises(ValueError):
        fit_gaussian_vi(model, X, "flow")
