"""Coupled data/measurement-space posterior sampling and guidance baselines.

The coupled sampler runs a forward noising chain on the observation and, at
each reverse step, draws the next iterate from a closed-form Gaussian whose
precision is ``c_t I + A^T Sigma^{-1} A``.  Everything here is batched: pass
``n_chains`` to run many independent chains as rows of one array, sharing
the per-step operator while each row keeps its own randomness.

Random draws happen in a fixed documented order (chain noise block, initial
state, then per step the mean solve consumes no randomness and the noise
draw consumes eps1 then eps2), so results are reproducible per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .linalg import PrecisionOperator, WhitenedOperator, cg_solve, diag_preconditioner, pw_cg_draw
from .operators import (
    ConditionalCov,
    LinearOperator,
    NoiseModel,
    Whitener,
    from_dense,
    make_whitener,
    mix_conditional_cov,
)
from .schedules import NoiseSchedule


class ChainFailureError(RuntimeError):
    """A CG solve failed to converge inside a sampling step."""

    def __init__(self, t: int, rows: np.ndarray, kind: str):
        self.t = t
        self.rows = rows
        super().__init__(f"{kind} CG solve failed at step t={t} for rows {rows.tolist()}")


@dataclass
class SolverConfig:
    """Knobs for the per-step linear solves and posterior variants."""

    cg_tol: float = 1e-8
    cg_max_iter: int | None = None  # defaults to 10 * d inside cg_solve
    precondition: bool = True
    # Use the simplified c_t * x_t right-hand side instead of the derived
    # sqrt(1 - beta_t) / beta_t * x_t prior term (ablation only).
    simplified_prior_rhs: bool = False
    # How to reintroduce the time-(t-1) prior on x_{t-1}:
    #   "score"    Gaussian with precision 1/(1-abar_{t-1}) centered at
    #              sqrt(abar_{t-1}) * x0_hat(x_t); combined with the forward
    #              kernel this is exactly the score-based reverse kernel, so
    #              directions A cannot see follow plain ancestral dynamics
    #              (default; without any prior those directions random-walk
    #              with a 1/sqrt(1-beta) expansion that compounds
    #              catastrophically over T steps)
    #   "identity" zero-mean unit Gaussian: adds only +I to the precision
    #   "none"     drop the prior entirely (the bare two-factor posterior)
    prior_mode: str = "score"
    strict: bool = True  # raise on CG non-convergence instead of recording

    def __post_init__(self):
        if self.prior_mode not in ("score", "identity", "none"):
            raise ValueError("prior_mode must be one of 'score', 'identity', 'none'")


@dataclass(frozen=True)
class MeasurementChain:
    """Forward-noised observation levels y_0..y_T, axis -2 indexing the step."""

    y_levels: np.ndarray  # (..., T+1, m)
    schedule: NoiseSchedule

    def __post_init__(self):
        if self.y_levels.shape[-2] != self.schedule.num_steps + 1:
            raise ValueError("chain length must be T + 1")

    def y_at(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.schedule.num_steps:
            raise ValueError("t out of range")
        return self.y_levels[..., t, :]


def generate_measurement_chain(
    y0: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n_chains: int | None = None,
) -> MeasurementChain:
    """Noise the observation forward: y_t = sqrt(1-beta_t) y_{t-1} + sqrt(beta_t) z_t.

    With ``n_chains`` the same y0 seeds that many independent chains, one per
    row.  The whole noise block is drawn in a single call.
    """
    y0 = np.asarray(y0, dtype=float)
    if y0.ndim != 1:
        raise ValueError("y0 must be a 1-D measurement vector")
    if not np.all(np.isfinite(y0)):
        raise ValueError("y0 must be finite")
    T = schedule.num_steps
    m = y0.size
    shape = (T, m) if n_chains is None else (n_chains, T, m)
    z = rng.standard_normal(shape)

    levels = np.empty(shape[:-2] + (T + 1, m))
    levels[..., 0, :] = y0
    root_keep = np.sqrt(schedule.alphas)
    root_add = np.sqrt(schedule.betas)
    for t in range(1, T + 1):
        levels[..., t, :] = root_keep[t - 1] * levels[..., t - 1, :] + root_add[t - 1] * z[..., t - 1, :]
    return MeasurementChain(y_levels=levels, schedule=schedule)


@dataclass(frozen=True)
class PosteriorStepParams:
    """Everything fixed once the score is frozen at (x_t, t)."""

    t: int
    beta: float
    abar_prev: float
    abar: float
    c: float  # scalar weight on the identity part of the precision
    b_prev: np.ndarray  # affine offset of the measurement mean
    cov: ConditionalCov
    whitener: Whitener
    precision: PrecisionOperator
    preconditioner: np.ndarray | None
    score: np.ndarray | None = None


def _build_params(
    t: int,
    A: LinearOperator,
    noise: NoiseModel,
    schedule: NoiseSchedule,
    b_vec: np.ndarray,
    config: SolverConfig,
    score: np.ndarray | None,
) -> PosteriorStepParams:
    beta = float(schedule.betas[t - 1])
    abar_prev = float(schedule.alpha_bars[t - 1])
    abar = float(schedule.alpha_bars[t])
    cov = mix_conditional_cov(noise, abar_prev)
    whitener = make_whitener(cov)
    c = (1.0 - beta) / beta
    if config.prior_mode == "identity":
        c = c + 1.0
    elif config.prior_mode == "score" and t >= 2:
        # Prior precision of x_{t-1} around its denoised mean; at t = 1 the
        # width 1 - abar_0 degenerates to zero, so the prior is dropped for
        # that single step.
        c = c + 1.0 / (1.0 - abar_prev)
    precision = PrecisionOperator(c=c, d=A.d, whitened=WhitenedOperator(A, whitener))
    precond = diag_preconditioner(precision) if config.precondition else None
    return PosteriorStepParams(
        t=t, beta=beta, abar_prev=abar_prev, abar=abar, c=c, b_prev=b_vec, cov=cov,
        whitener=whitener, precision=precision, preconditioner=precond, score=score,
    )


def make_step_params(
    x_t: np.ndarray,
    t: int,
    score_fn: Callable,
    A: LinearOperator,
    noise: NoiseModel,
    schedule: NoiseSchedule,
    config: SolverConfig | None = None,
) -> PosteriorStepParams:
    """Freeze the score at (x_t, t) and assemble the step's Gaussian parameters."""
    config = config or SolverConfig()
    if not 1 <= t <= schedule.num_steps:
        raise ValueError("t must be in [1, T]")
    abar_prev = float(schedule.alpha_bars[t - 1])
    s_hat = np.asarray(score_fn(x_t, t), dtype=float)
    b_vec = (1.0 - abar_prev) * A.apply(s_hat)
    return _build_params(t, A, noise, schedule, b_vec, config, score=s_hat)


def posterior_mean(
    params: PosteriorStepParams,
    x_t: np.ndarray,
    y_prev: np.ndarray,
    config: SolverConfig | None = None,
):
    """Solve the step precision against the posterior right-hand side.

    The transition kernel contributes sqrt(1-beta)/beta * x_t (or
    c_t * x_t in the simplified variant), the measurement contributes
    A^T Sigma^{-1} (y_{t-1} - b), and in "score" prior mode the marginal
    prior contributes its mean x_t + s_hat at unit weight.
    """
    config = config or SolverConfig()
    beta = params.beta
    coef = (1.0 - beta) / beta if config.simplified_prior_rhs else np.sqrt(1.0 - beta) / beta
    A = params.precision.whitened.op
    rhs = coef * x_t + A.adjoint(params.whitener.apply_inv(y_prev - params.b_prev))
    if config.prior_mode == "score" and params.t >= 2:
        if params.score is None:
            raise ValueError("score prior mode needs the frozen score in the step params")
        # Prior mean contribution sqrt(abar_{t-1}) x0_hat / (1 - abar_{t-1}),
        # written with sqrt(abar_{t-1}/abar_t) = 1/sqrt(1-beta) so the
        # denoised estimate never divides by a vanishing sqrt(abar_t).
        pull = (x_t + (1.0 - params.abar) * params.score) / (
            np.sqrt(1.0 - beta) * (1.0 - params.abar_prev)
        )
        rhs = rhs + pull
    return cg_solve(
        params.precision, rhs,
        preconditioner=params.preconditioner,
        tol=config.cg_tol, max_iter=config.cg_max_iter,
    )


def _finish_step(params, x_t, y_prev, rng, config):
    mu, rep_mean = posterior_mean(params, x_t, y_prev, config)
    n = None if x_t.ndim == 1 else x_t.shape[0]
    v, rep_noise = pw_cg_draw(
        params.precision, rng,
        tol=config.cg_tol, max_iter=config.cg_max_iter,
        preconditioner=params.preconditioner, n=n,
    )
    return mu + v, mu, rep_mean, rep_noise


def _failed_rows(*reports) -> np.ndarray:
    bad = None
    for rep in reports:
        rc = np.atleast_1d(rep.row_converged)
        bad = ~rc if bad is None else (bad | ~rc)
    return np.nonzero(bad)[0]


def cdps_step(
    x_t: np.ndarray,
    chain: MeasurementChain,
    t: int,
    score_fn: Callable,
    A: LinearOperator,
    noise: NoiseModel,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    config: SolverConfig | None = None,
) -> np.ndarray:
    """One coupled reverse step: x_{t-1} = mu_post + v.

    The score is frozen at the current iterate, the conditional covariance
    and affine offset use the cumulative product at t-1, and both the mean
    solve and the covariance draw run matrix-free CG.
    """
    config = config or SolverConfig()
    x_t = np.asarray(x_t, dtype=float)
    if not np.all(np.isfinite(x_t)):
        raise ValueError("x_t must be finite")
    params = make_step_params(x_t, t, score_fn, A, noise, schedule, config)
    x_next, _, rep_mean, rep_noise = _finish_step(params, x_t, chain.y_at(t - 1), rng, config)
    if config.strict:
        rows = _failed_rows(rep_mean, rep_noise)
        if rows.size:
            raise ChainFailureError(t, rows, "step")
    return x_next


@dataclass
class SamplerTrace:
    """Optional per-step records; arrays are indexed by the time level t."""

    failed_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    residual_sq: np.ndarray | None = None  # (T+1, ...) misfit of x_t, t = 0..T
    cg_iters_mean: np.ndarray | None = None  # (T+1,), entry t = step producing x_{t-1}
    cg_iters_noise: np.ndarray | None = None
    score_cos: np.ndarray | None = None  # (T+1, ...), entry t pairs levels t and t-1
    score_mse: np.ndarray | None = None


def _batch_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dot = np.einsum("...i,...i->...", a, b)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, dot / np.where(denom == 0, 1.0, denom), np.nan)


def cdps_sample(
    y: np.ndarray,
    A: LinearOperator,
    noise: NoiseModel,
    schedule: NoiseSchedule,
    score_fn: Callable,
    rng: np.random.Generator,
    n_chains: int | None = None,
    config: SolverConfig | None = None,
    x_init: np.ndarray | None = None,
    shared_chain: bool = False,
    record_residuals: bool = False,
    record_scores: bool = False,
) -> tuple[np.ndarray, SamplerTrace]:
    """Run the full coupled sampler from pure noise down to x_0.

    Generates the measurement chain once (per row unless ``shared_chain``),
    initializes x_T standard normal, and applies the coupled step T times.
    Rows whose CG solves fail are recorded in the trace (or raise when
    ``config.strict``).
    """
    config = config or SolverConfig()
    T = schedule.num_steps
    chain = generate_measurement_chain(
        y, schedule, rng, n_chains=None if shared_chain else n_chains
    )
    shape = (A.d,) if n_chains is None else (n_chains, A.d)
    if x_init is not None:
        x = np.array(x_init, dtype=float)
        if x.shape != shape:
            raise ValueError(f"x_init must have shape {shape}")
    else:
        x = rng.standard_normal(shape)

    trace = SamplerTrace()
    batch = () if n_chains is None else (n_chains,)
    if record_residuals:
        trace.residual_sq = np.zeros((T + 1,) + batch)
        trace.cg_iters_mean = np.zeros(T + 1, dtype=int)
        trace.cg_iters_noise = np.zeros(T + 1, dtype=int)
    scores: dict[int, np.ndarray] = {}

    def _residual(xv):
        r = chain.y_at(0) - A.apply(xv)
        return np.einsum("...i,...i->...", r, r)

    if record_residuals:
        trace.residual_sq[T] = _residual(x)

    failed = np.zeros(batch if batch else (1,), dtype=bool)
    for t in range(T, 0, -1):
        params = make_step_params(x, t, score_fn, A, noise, schedule, config)
        x_new, _, rep_mean, rep_noise = _finish_step(params, x, chain.y_at(t - 1), rng, config)
        rows = _failed_rows(rep_mean, rep_noise)
        if rows.size:
            if config.strict:
                raise ChainFailureError(t, rows, "sample")
            failed[rows] = True
        if record_residuals:
            trace.residual_sq[t - 1] = _residual(x_new)
            trace.cg_iters_mean[t] = rep_mean.iterations
            trace.cg_iters_noise[t] = rep_noise.iterations
        if record_scores:
            scores[t] = params.score
        x = x_new

    if record_scores:
        scores[0] = np.asarray(score_fn(x, 0), dtype=float)
        trace.score_cos = np.full((T + 1,) + batch, np.nan)
        trace.score_mse = np.full((T + 1,) + batch, np.nan)
        for t in range(1, T + 1):
            s_prev, s_cur = scores[t - 1], scores[t]
            diff = s_prev - s_cur
            trace.score_mse[t] = np.einsum("...i,...i->...", diff, diff) / A.d
            trace.score_cos[t] = _batch_cosine(s_prev, s_cur)

    trace.failed_rows = np.nonzero(failed)[0]
    return x, trace


# ---------------------------------------------------------------------------
# Ancestral baseline samplers


def _ancestral_step(x_t, t, s_hat, schedule, z):
    """Plain reverse diffusion step; returns the new state and the denoised estimate."""
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    abar = schedule.alpha_bars[t]
    abar_prev = schedule.alpha_bars[t - 1]
    x0_hat = (x_t + (1.0 - abar) * s_hat) / np.sqrt(abar)
    mu = (np.sqrt(alpha) * (1.0 - abar_prev) * x_t + np.sqrt(abar_prev) * beta * x0_hat) / (1.0 - abar)
    sigma = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
    return mu + sigma * z, x0_hat


def dps_sample(
    y: np.ndarray,
    A: LinearOperator,
    schedule: NoiseSchedule,
    score_fn: Callable,
    denoiser_jvp_fn: Callable,
    rng: np.random.Generator,
    n_chains: int | None = None,
    zeta: float = 1.0,
    record_residuals: bool = False,
) -> tuple[np.ndarray, SamplerTrace]:
    """Likelihood-guidance baseline on the denoised estimate.

    Each reverse step is unconditional ancestral sampling followed by a
    correction along the measurement-misfit gradient at the denoised
    estimate, with step size zeta / ||y - A x0_hat|| (zero misfit means zero
    guidance).  ``denoiser_jvp_fn(x, t, u)`` must return the Jacobian of the
    posterior-mean denoiser applied to u.
    """
    y = np.asarray(y, dtype=float)
    T = schedule.num_steps
    shape = (A.d,) if n_chains is None else (n_chains, A.d)
    x = rng.standard_normal(shape)

    trace = SamplerTrace()
    batch = () if n_chains is None else (n_chains,)
    if record_residuals:
        trace.residual_sq = np.zeros((T + 1,) + batch)
        r0 = y - A.apply(x)
        trace.residual_sq[T] = np.einsum("...i,...i->...", r0, r0)

    for t in range(T, 0, -1):
        s_hat = np.asarray(score_fn(x, t), dtype=float)
        z = rng.standard_normal(shape)
        x_unc, x0_hat = _ancestral_step(x, t, s_hat, schedule, z)

        resid = y - A.apply(x0_hat)
        norm = np.sqrt(np.einsum("...i,...i->...", resid, resid))
        jw = denoiser_jvp_fn(x, t, A.adjoint(resid))
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(norm > 0, zeta / np.where(norm == 0, 1.0, norm), 0.0)
        x = x_unc + step[..., None] * jw

        if record_residuals:
            r = y - A.apply(x)
            trace.residual_sq[t - 1] = np.einsum("...i,...i->...", r, r)
    return x, trace


def score_sde_guidance(
    x_t: np.ndarray,
    y: np.ndarray,
    A: LinearOperator,
    sigma_t: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Stochastic misfit gradient -A^T (y + sigma_t eps - A x_t)."""
    x_t = np.asarray(x_t, dtype=float)
    shape = (A.m,) if x_t.ndim == 1 else (x_t.shape[0], A.m)
    eps = rng.standard_normal(shape)
    return -A.adjoint(y + sigma_t * eps - A.apply(x_t))


def _pinv(mat: np.ndarray, cutoff: float = 1e-10) -> np.ndarray:
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    inv = np.where(s > cutoff, 1.0 / np.where(s == 0, 1.0, s), 0.0)
    return (vt.T * inv) @ u.T


def ilvr_guidance(x_t: np.ndarray, y_t: np.ndarray, A: LinearOperator) -> np.ndarray:
    """Pseudo-inverse-preconditioned misfit gradient -A^+ (y_t - A x_t).

    Singular values below 1e-10 are zeroed, so rank-deficient operators are
    handled by truncation.
    """
    if A.dense is None:
        raise ValueError("pseudo-inverse guidance requires a dense operator")
    pinv = _pinv(A.dense)
    resid = y_t - A.apply(np.asarray(x_t, dtype=float))
    return -(resid @ pinv.T)


def _noisy_target_sample(kind, y, A, schedule, score_fn, rng, n_chains, scale, record_residuals):
    """Shared driver for the noisy-target guidance baselines."""
    y = np.asarray(y, dtype=float)
    T = schedule.num_steps
    shape = (A.d,) if n_chains is None else (n_chains, A.d)
    x = rng.standard_normal(shape)
    pinv = _pinv(A.dense) if kind == "ilvr" else None

    trace = SamplerTrace()
    batch = () if n_chains is None else (n_chains,)
    if record_residuals:
        trace.residual_sq = np.zeros((T + 1,) + batch)
        r0 = y - A.apply(x)
        trace.residual_sq[T] = np.einsum("...i,...i->...", r0, r0)

    for t in range(T, 0, -1):
        abar = schedule.alpha_bars[t]
        s_hat = np.asarray(score_fn(x, t), dtype=float)
        z = rng.standard_normal(shape)
        x_unc, _ = _ancestral_step(x, t, s_hat, schedule, z)

        # Noisy target matched to the forward marginal at level t.
        eps_shape = (A.m,) if n_chains is None else (n_chains, A.m)
        eps = rng.standard_normal(eps_shape)
        target = np.sqrt(abar) * y + np.sqrt(1.0 - abar) * eps
        resid = target - A.apply(x)
        grad = -(resid @ pinv.T) if kind == "ilvr" else -A.adjoint(resid)
        x = x_unc - scale * grad

        if record_residuals:
            r = y - A.apply(x)
            trace.residual_sq[t - 1] = np.einsum("...i,...i->...", r, r)
    return x, trace


def score_sde_sample(y, A, schedule, score_fn, rng, n_chains=None, scale=1.0,
                     record_residuals=False):
    """Adjoint-guidance baseline pushing toward a rescaled noisy observation."""
    return _noisy_target_sample("score_sde", y, A, schedule, score_fn, rng,
                                n_chains, scale, record_residuals)


def ilvr_sample(y, A, schedule, score_fn, rng, n_chains=None, scale=1.0,
                record_residuals=False):
    """Pseudo-inverse-guidance baseline pushing toward a rescaled noisy observation."""
    return _noisy_target_sample("ilvr", y, A, schedule, score_fn, rng,
                                n_chains, scale, record_residuals)


# ---------------------------------------------------------------------------
# Locally linearized steps for differentiable nonlinear measurements


@dataclass(frozen=True)
class NonlinearMap:
    """Differentiable forward map with optional exact derivative products.

    ``apply`` must accept batches on the last axis.  When neither ``jvp``
    (u -> J(x) u) nor ``vjp`` (v -> J(x)^T v) is given, the Jacobian is
    probed by central finite differences with ``fd_step`` (lower accuracy).
    """

    m: int
    d: int
    apply: Callable[[np.ndarray], np.ndarray]
    jvp: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    vjp: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    fd_step: float = 1e-6


def linearize(g: NonlinearMap, x: np.ndarray) -> LinearOperator:
    """Materialize the Jacobian of g at x as a dense operator."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("linearization point must be a single vector")
    if g.vjp is not None:
        jac = np.asarray(g.vjp(x, np.eye(g.m)), dtype=float)
    elif g.jvp is not None:
        jac = np.asarray(g.jvp(x, np.eye(g.d)), dtype=float).T
    else:
        h = g.fd_step
        probes = np.eye(g.d)
        jac = ((g.apply(x + h * probes) - g.apply(x - h * probes)) / (2.0 * h)).T
    if jac.shape != (g.m, g.d):
        raise ValueError("Jacobian probe produced a wrong shape")
    return from_dense(jac)


def cdps_step_nonlinear(
    x_t: np.ndarray,
    chain: MeasurementChain,
    t: int,
    score_fn: Callable,
    g: NonlinearMap,
    noise: NoiseModel,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    config: SolverConfig | None = None,
) -> np.ndarray:
    """Coupled step for y = g(x) + noise via local linearization at x_t.

    Runs the exact same Gaussian step as the linear case with the Jacobian
    in place of the operator and the affine offset
    g(x_t) - J x_t + (1 - abar_prev) J s_hat; for an affine map it
    reproduces the linear step exactly (same draws, same arithmetic).
    """
    config = config or SolverConfig()
    x_t = np.asarray(x_t, dtype=float)
    if x_t.ndim != 1:
        raise ValueError("nonlinear steps operate on a single chain")
    if not 1 <= t <= schedule.num_steps:
        raise ValueError("t must be in [1, T]")

    A_lin = linearize(g, x_t)
    abar_prev = float(schedule.alpha_bars[t - 1])
    s_hat = np.asarray(score_fn(x_t, t), dtype=float)
    offset = np.asarray(g.apply(x_t), dtype=float) - A_lin.apply(x_t)
    b_vec = offset + (1.0 - abar_prev) * A_lin.apply(s_hat)
    params = _build_params(t, A_lin, noise, schedule, b_vec, config, score=s_hat)
    x_next, _, rep_mean, rep_noise = _finish_step(params, x_t, chain.y_at(t - 1), rng, config)
    if config.strict:
        rows = _failed_rows(rep_mean, rep_noise)
        if rows.size:
            raise ChainFailureError(t, rows, "nonlinear step")
    return x_next
