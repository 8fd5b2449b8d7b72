"""Gaussian-mixture prior with analytic time-marginal score and exact posterior.

The benchmark prior is a 25-component grid mixture whose unit component
variance makes every forward-time marginal again a unit-variance mixture,
so the score is available in closed form at all noise levels.  For a linear
Gaussian measurement the posterior is itself a mixture of Gaussians and is
computed exactly, providing the ground truth the samplers are scored
against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .operators import LinearOperator
from .schedules import NoiseSchedule, alpha_bar

_WSUM_TOL = 1e-12


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture with either per-component isotropic variances or one shared
    full covariance (the form the exact posterior takes)."""

    means: np.ndarray  # (K, d)
    weights: np.ndarray  # (K,)
    variances: np.ndarray | None = None  # (K,) isotropic component variances
    cov: np.ndarray | None = None  # (d, d) shared SPD covariance

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if means.ndim != 2:
            raise ValueError("means must be (K, d)")
        K, d = means.shape
        if weights.shape != (K,):
            raise ValueError("weights must be (K,)")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > _WSUM_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        if (self.variances is None) == (self.cov is None):
            raise ValueError("exactly one of variances/cov must be given")
        if self.variances is not None:
            var = np.asarray(self.variances, dtype=float)
            if var.shape != (K,):
                raise ValueError("variances must be (K,)")
            if np.any(var <= 0):
                raise ValueError("variances must be positive")
            object.__setattr__(self, "variances", var)
        else:
            cov = np.asarray(self.cov, dtype=float)
            if cov.shape != (d, d):
                raise ValueError("cov must be (d, d)")
            # Raises LinAlgError if not SPD.
            np.linalg.cholesky(cov)
            object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]


def make_grid_gmm(d: int) -> GaussianMixture:
    """25 equally weighted unit-variance components on the (8i, 8j) grid.

    Means repeat the pair (8i, 8j) across the d coordinates for
    (i, j) in {-2..2}^2, so d must be even.
    """
    if d < 2 or d % 2 != 0:
        raise ValueError("d must be a positive even integer")
    grid = np.arange(-2, 3, dtype=float)
    pairs = [(8.0 * i, 8.0 * j) for i in grid for j in grid]
    means = np.array([pair * (d // 2) for pair in pairs])
    K = len(pairs)
    return GaussianMixture(
        means=means,
        weights=np.full(K, 1.0 / K),
        variances=np.ones(K),
    )


def _marginal_params(gmm: GaussianMixture, abar: float):
    """Means and variances of the forward-time marginal mixture."""
    if not (0.0 < abar <= 1.0):
        raise ValueError("abar must lie in (0, 1]")
    if gmm.variances is None:
        raise ValueError("time-marginal score requires isotropic components")
    root = np.sqrt(abar)
    means_t = root * gmm.means  # (K, d)
    var_t = abar * gmm.variances + (1.0 - abar)  # (K,)
    return means_t, var_t


def _responsibilities(gmm: GaussianMixture, x: np.ndarray, means_t, var_t):
    """Posterior component probabilities at x, computed in log space.

    Squared distances are expanded as ||x||^2 - 2 x.m + ||m||^2 to avoid a
    (n, K, d) intermediate; grid means are far apart, so the log-domain
    max-subtraction in softmax is what keeps the exponentials alive.
    """
    d = gmm.d
    x2 = np.einsum("...i,...i->...", x, x)[..., None]
    cross = x @ means_t.T
    m2 = np.einsum("ki,ki->k", means_t, means_t)
    sq = x2 - 2.0 * cross + m2
    logits = np.log(gmm.weights) - 0.5 * (sq / var_t + d * np.log(var_t))
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits  # (..., K)


def score(gmm: GaussianMixture, x: np.ndarray, abar: float) -> np.ndarray:
    """Gradient of the log time-marginal density at x.

    Equals the responsibility-weighted sum of per-component Gaussian scores
    (sqrt(abar) * mu_k - x) / var_k.  Accepts a single vector or a batch
    with the coordinate axis last.
    """
    x = np.asarray(x, dtype=float)
    means_t, var_t = _marginal_params(gmm, abar)
    r = _responsibilities(gmm, x, means_t, var_t)
    rv = r / var_t
    return rv @ means_t - x * rv.sum(axis=-1)[..., None]


def log_marginal_density(gmm: GaussianMixture, x: np.ndarray, abar: float) -> np.ndarray:
    """Log density of the forward-time marginal mixture (for oracles)."""
    x = np.asarray(x, dtype=float)
    means_t, var_t = _marginal_params(gmm, abar)
    d = gmm.d
    x2 = np.einsum("...i,...i->...", x, x)[..., None]
    cross = x @ means_t.T
    m2 = np.einsum("ki,ki->k", means_t, means_t)
    sq = x2 - 2.0 * cross + m2
    logits = np.log(gmm.weights) - 0.5 * (sq / var_t + d * np.log(2.0 * np.pi * var_t))
    return logsumexp(logits, axis=-1)


def score_jacobian_vp(gmm: GaussianMixture, x: np.ndarray, abar: float, u: np.ndarray) -> np.ndarray:
    """Product of the score Jacobian (log-density Hessian) with u.

    H u = -sum_k r_k / v_k * u + sum_k r_k g_k <g_k, u> - s <s, u>
    with g_k the per-component score; evaluated without (n, K, d) temporaries.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    means_t, var_t = _marginal_params(gmm, abar)
    r = _responsibilities(gmm, x, means_t, var_t)
    rv = r / var_t

    s = rv @ means_t - x * rv.sum(axis=-1)[..., None]
    # <g_k, u> = (m_k . u - x . u) / v_k, shape (..., K)
    gu = (u @ means_t.T - np.einsum("...i,...i->...", x, u)[..., None]) / var_t
    t = r * gu
    term = t @ means_t - x * t.sum(axis=-1)[..., None]
    su = np.einsum("...i,...i->...", s, u)[..., None]
    return -rv.sum(axis=-1)[..., None] * u + term - s * su


def score_fn_for(gmm: GaussianMixture, schedule: NoiseSchedule):
    """Score callable (x, t) -> grad log p_t(x) for the sampler interfaces."""

    def fn(x, t):
        return score(gmm, x, alpha_bar(schedule, t))

    return fn


def score_jvp_fn_for(gmm: GaussianMixture, schedule: NoiseSchedule):
    """Score-Jacobian product callable (x, t, u) -> H(x, t) u."""

    def fn(x, t, u):
        return score_jacobian_vp(gmm, x, alpha_bar(schedule, t), u)

    return fn


def denoiser_jacobian_vp(gmm: GaussianMixture, x: np.ndarray, abar: float, u: np.ndarray) -> np.ndarray:
    """Jacobian of the posterior-mean denoiser applied to u, computed stably.

    For equal component variances the chain rule collapses to
    sqrt(abar) * (var/v * u + (1-abar)/v^2 * Cov_r(mu) u) with Cov_r the
    responsibility-weighted covariance of the component means.  This form
    avoids the catastrophic cancellation of (u + (1-abar) H u)/sqrt(abar)
    when abar underflows toward zero.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if gmm.variances is None:
        raise ValueError("denoiser Jacobian requires isotropic components")
    var = gmm.variances
    if not np.allclose(var, var[0], rtol=1e-12, atol=0):
        raise ValueError("denoiser Jacobian requires equal component variances")
    means_t, var_t = _marginal_params(gmm, abar)
    r = _responsibilities(gmm, x, means_t, var_t)
    v = float(var_t[0])

    mu_u = u @ gmm.means.T  # (..., K) inner products <mu_k, u>
    t = r * mu_u
    first = t @ gmm.means  # sum_k r_k mu_k <mu_k, u>
    mean_mu = r @ gmm.means
    mean_dot = t.sum(axis=-1)[..., None]
    cov_u = first - mean_mu * mean_dot
    root = np.sqrt(abar)
    return root * ((var[0] / v) * u + ((1.0 - abar) / (v * v)) * cov_u)


def denoiser_jvp_fn_for(gmm: GaussianMixture, schedule: NoiseSchedule):
    """Denoiser-Jacobian product callable (x, t, u) for guidance baselines."""

    def fn(x, t, u):
        return denoiser_jacobian_vp(gmm, x, alpha_bar(schedule, t), u)

    return fn


def exact_posterior(gmm: GaussianMixture, A: LinearOperator, y: np.ndarray,
                    sigma: float) -> GaussianMixture:
    """Closed-form posterior of a unit-variance mixture under y = A x + noise.

    With observation noise N(0, sigma^2 I) the posterior is again a mixture:
    shared covariance (I + A^T A / sigma^2)^{-1}, component means
    cov @ (A^T y / sigma^2 + mu_k), and weights reweighted by the marginal
    evidence N(y; A mu_k, sigma^2 I + A A^T).
    """
    if gmm.variances is None or not np.allclose(gmm.variances, 1.0, rtol=0, atol=1e-12):
        raise ValueError("exact posterior requires unit-variance components")
    if A.dense is None:
        raise ValueError("exact posterior requires a dense operator")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    y = np.asarray(y, dtype=float)
    if y.shape != (A.m,):
        raise ValueError(f"y must have shape ({A.m},)")
    if not np.all(np.isfinite(y)):
        raise ValueError("y must be finite")

    mat = A.dense
    d = gmm.d
    sig2 = sigma * sigma
    cov = np.linalg.inv(np.eye(d) + mat.T @ mat / sig2)
    cov = 0.5 * (cov + cov.T)
    means = (gmm.means + (mat.T @ y) / sig2) @ cov.T

    # Evidence of each component: y ~ N(A mu_k, sigma^2 I + A A^T).
    ev_cov = sig2 * np.eye(A.m) + mat @ mat.T
    L = np.linalg.cholesky(ev_cov)
    resid = y - gmm.means @ mat.T  # (K, m)
    white = np.linalg.solve(L, resid.T).T
    logw = np.log(gmm.weights) - 0.5 * np.einsum("ki,ki->k", white, white)
    logw -= logsumexp(logw)
    return GaussianMixture(means=means, weights=np.exp(logw), cov=cov)


def sample_mixture(gmm: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n vectors: categorical component choice, then a Gaussian draw.

    Full-covariance mixtures share one Cholesky factor across components.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ks = rng.choice(gmm.K, size=n, p=gmm.weights)
    eps = rng.standard_normal((n, gmm.d))
    if gmm.variances is not None:
        return gmm.means[ks] + eps * np.sqrt(gmm.variances)[ks, None]
    L = np.linalg.cholesky(gmm.cov)
    return gmm.means[ks] + eps @ L.T


def mixture_log_density(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Log density of the mixture itself (quadrature oracles, scatter plots)."""
    x = np.asarray(x, dtype=float)
    d = gmm.d
    if gmm.variances is not None:
        return log_marginal_density(gmm, x, 1.0)
    L = np.linalg.cholesky(gmm.cov)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    diff = x[..., None, :] - gmm.means  # (..., K, d)
    white = np.linalg.solve(L, diff[..., None]).squeeze(-1)
    sq = np.einsum("...ki,...ki->...k", white, white)
    logits = np.log(gmm.weights) - 0.5 * (sq + logdet + d * np.log(2.0 * np.pi))
    return logsumexp(logits, axis=-1)
