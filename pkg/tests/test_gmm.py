import numpy as np
import pytest

from cdps.gmm import (
    GaussianMixture,
    denoiser_jacobian_vp,
    exact_posterior,
    log_marginal_density,
    make_grid_gmm,
    sample_mixture,
    score,
    score_jacobian_vp,
)
from cdps.operators import from_dense, zero_operator


def fd_score(gmm, x, abar, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (log_marginal_density(gmm, x + e, abar)
                - log_marginal_density(gmm, x - e, abar)) / (2 * h)
    return g


def test_grid_gmm_structure():
    g = make_grid_gmm(2)
    assert g.K == 25
    rows = {tuple(m) for m in g.means}
    assert {(-16.0, -16.0), (0.0, 0.0), (16.0, 16.0)} <= rows
    np.testing.assert_allclose(g.weights, 0.04)
    np.testing.assert_allclose(g.weights @ g.means, 0.0, atol=1e-12)
    # pattern repeats the pair across dimensions
    g6 = make_grid_gmm(6)
    assert g6.means.shape == (25, 6)
    np.testing.assert_array_equal(g6.means[:, :2], g6.means[:, 2:4])
    with pytest.raises(ValueError):
        make_grid_gmm(3)


def test_score_zero_at_center():
    g = make_grid_gmm(4)
    for abar in (1.0, 0.5, 0.1):
        np.testing.assert_allclose(score(g, np.zeros(4), abar), 0.0, atol=1e-12)


def test_score_single_component_closed_form():
    mu = np.array([1.5, -2.0])
    g = GaussianMixture(means=mu[None], weights=np.ones(1), variances=np.ones(1))
    x = np.array([0.3, 0.7])
    np.testing.assert_allclose(score(g, x, 1.0), mu - x, rtol=1e-12)


def test_score_matches_finite_differences():
    g = make_grid_gmm(4)
    rng = np.random.default_rng(0)
    x = rng.uniform(-20, 20, 4)
    s = score(g, x, 0.7)
    np.testing.assert_allclose(fd_score(g, x, 0.7), s, rtol=1e-5)


def test_score_batched_matches_single():
    g = make_grid_gmm(4)
    rng = np.random.default_rng(1)
    X = rng.uniform(-20, 20, (5, 4))
    batched = score(g, X, 0.5)
    for i in range(5):
        np.testing.assert_allclose(batched[i], score(g, X[i], 0.5), rtol=1e-12)


def test_score_jacobian_vp_matches_directional_fd():
    g = make_grid_gmm(4)
    rng = np.random.default_rng(2)
    x = rng.uniform(-10, 10, 4)
    u = rng.standard_normal(4)
    h = 1e-6
    fd = (score(g, x + h * u, 0.5) - score(g, x - h * u, 0.5)) / (2 * h)
    hv = score_jacobian_vp(g, x, 0.5, u)
    np.testing.assert_allclose(hv, fd, rtol=1e-6, atol=1e-8)


def test_denoiser_jacobian_vp_matches_tweedie_fd():
    g = make_grid_gmm(4)
    rng = np.random.default_rng(3)
    x = rng.uniform(-10, 10, 4)
    u = rng.standard_normal(4)
    abar = 0.4

    def x0_hat(pt):
        return (pt + (1 - abar) * score(g, pt, abar)) / np.sqrt(abar)

    h = 1e-6
    fd = (x0_hat(x + h * u) - x0_hat(x - h * u)) / (2 * h)
    jv = denoiser_jacobian_vp(g, x, abar, u)
    np.testing.assert_allclose(jv, fd, rtol=1e-5, atol=1e-7)


def test_denoiser_jacobian_vp_stable_at_vanishing_abar():
    # The naive (u + (1-abar) H u)/sqrt(abar) form overflows here.
    g = make_grid_gmm(4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal(4)
    u = rng.standard_normal(4)
    jv = denoiser_jacobian_vp(g, x, 1e-130, u)
    assert np.all(np.isfinite(jv))
    assert np.linalg.norm(jv) < 1e-60  # scales like sqrt(abar)


def test_exact_posterior_conjugate_case():
    d = 3
    prior = GaussianMixture(means=np.zeros((1, d)), weights=np.ones(1), variances=np.ones(1))
    y = np.array([1.0, -2.0, 0.5])
    post = exact_posterior(prior, from_dense(np.eye(d)), y, 1.0)
    np.testing.assert_allclose(post.means[0], y / 2.0, rtol=1e-12)
    np.testing.assert_allclose(post.cov, np.eye(d) / 2.0, rtol=1e-12)
    np.testing.assert_allclose(post.weights, [1.0])


def test_exact_posterior_uninformative_operator():
    prior = make_grid_gmm(4)
    post = exact_posterior(prior, zero_operator(2, 4), np.zeros(2), 0.5)
    np.testing.assert_allclose(post.weights, prior.weights, rtol=1e-12)
    np.testing.assert_allclose(post.means, prior.means, rtol=1e-12)
    np.testing.assert_allclose(post.cov, np.eye(4), rtol=1e-12)


def test_exact_posterior_weights_normalized_and_cov_spd():
    rng = np.random.default_rng(5)
    prior = make_grid_gmm(8)
    A = from_dense(rng.standard_normal((3, 8)) * 0.4)
    y = rng.standard_normal(3)
    post = exact_posterior(prior, A, y, 0.1)
    assert abs(post.weights.sum() - 1.0) < 1e-12
    np.linalg.cholesky(post.cov)  # raises if not SPD


def test_exact_posterior_sigma_to_infinity_recovers_prior():
    rng = np.random.default_rng(6)
    prior = make_grid_gmm(4)
    A = from_dense(rng.standard_normal((2, 4)))
    post = exact_posterior(prior, A, rng.standard_normal(2), 1e6)
    assert np.max(np.abs(post.weights - prior.weights)) < 1e-6


def test_exact_posterior_rejects_bad_inputs():
    prior = make_grid_gmm(4)
    A = from_dense(np.ones((2, 4)))
    with pytest.raises(ValueError):
        exact_posterior(prior, A, np.array([1.0, np.nan]), 0.5)
    with pytest.raises(ValueError):
        exact_posterior(prior, A, np.zeros(2), -1.0)


def test_sample_mixture_single_component_moments():
    g = GaussianMixture(means=np.zeros((1, 3)), weights=np.ones(1), variances=np.ones(1))
    s = sample_mixture(g, 40_000, np.random.default_rng(7))
    np.testing.assert_allclose(s.mean(axis=0), 0.0, atol=0.03)
    np.testing.assert_allclose(np.cov(s.T), np.eye(3), atol=0.03)


def test_sample_mixture_deterministic():
    g = make_grid_gmm(4)
    a = sample_mixture(g, 100, np.random.default_rng(8))
    b = sample_mixture(g, 100, np.random.default_rng(8))
    np.testing.assert_array_equal(a, b)


def test_sample_mixture_conjugate_posterior_mean():
    # mean of draws from N(y/2, I/2) lands within 3 standard errors of y/2
    d, n = 3, 100_000
    prior = GaussianMixture(means=np.zeros((1, d)), weights=np.ones(1), variances=np.ones(1))
    y = np.array([1.0, -2.0, 0.5])
    post = exact_posterior(prior, from_dense(np.eye(d)), y, 1.0)
    s = sample_mixture(post, n, np.random.default_rng(9))
    se = np.sqrt(0.5 / n)
    assert np.all(np.abs(s.mean(axis=0) - y / 2.0) < 3 * se)


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture(means=np.zeros((2, 2)), weights=np.array([0.7, 0.7]),
                        variances=np.ones(2))
    with pytest.raises(ValueError):
        GaussianMixture(means=np.zeros((1, 2)), weights=np.ones(1))
    with pytest.raises(np.linalg.LinAlgError):
        GaussianMixture(means=np.zeros((1, 2)), weights=np.ones(1),
                        cov=np.array([[1.0, 2.0], [2.0, 1.0]]))
