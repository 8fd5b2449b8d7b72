"""Discrete variance-preserving noise schedules.

One schedule is shared by the data-space chain and the measurement-space
chain, so both inject the same noise fraction at every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Guard band keeping every beta strictly inside the open interval (0, 1).
_BETA_EPS = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates beta_t with derived alpha_t and cumulative products.

    ``betas[i]`` holds beta_{i+1} for steps t = 1..T.  ``alpha_bars`` has
    length T+1 with ``alpha_bars[0] = 1`` so that step-boundary quantities at
    t-1 = 0 reduce to their noise-free values.
    """

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        T = self.num_steps
        if T < 1:
            raise ValueError("num_steps must be >= 1")
        betas = np.asarray(self.betas, dtype=float)
        if betas.shape != (T,):
            raise ValueError(f"betas must have shape ({T},)")
        if not np.all(np.isfinite(betas)):
            raise ValueError("betas must be finite")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(betas) < 0.0):
            raise ValueError("betas must be nondecreasing")
        if self.alphas.shape != (T,) or self.alpha_bars.shape != (T + 1,):
            raise ValueError("inconsistent derived arrays")
        if self.alpha_bars[-1] <= 0.0:
            raise ValueError(
                "cumulative signal level underflowed to zero; "
                "num_steps is too small for this beta range"
            )

    @property
    def T(self) -> int:
        return self.num_steps


def make_linear_schedule(num_steps: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Linearly interpolated variance-preserving schedule.

    The continuous rate beta(s) = beta_min + s * (beta_max - beta_min) is
    sampled at s = (t-1)/(T-1) and divided by T, giving
    beta_t = beta(s_t) / T, then clamped into (0, 1) with a 1e-12 margin.
    """
    if not isinstance(num_steps, (int, np.integer)) or num_steps < 1:
        raise ValueError("num_steps must be a positive integer")
    beta_min = float(beta_min)
    beta_max = float(beta_max)
    if not (np.isfinite(beta_min) and np.isfinite(beta_max)):
        raise ValueError("beta_min and beta_max must be finite")
    if beta_min <= 0.0:
        raise ValueError("beta_min must be positive")
    if beta_max < beta_min:
        raise ValueError("beta_max must be >= beta_min")

    T = int(num_steps)
    frac = np.arange(T, dtype=float) / max(T - 1, 1)
    betas = (beta_min + frac * (beta_max - beta_min)) / T
    betas = np.clip(betas, _BETA_EPS, 1.0 - _BETA_EPS)

    alphas = 1.0 - betas
    alpha_bars = np.empty(T + 1)
    alpha_bars[0] = 1.0
    np.cumprod(alphas, out=alpha_bars[1:])
    return NoiseSchedule(num_steps=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def alpha_bar(schedule: NoiseSchedule, t: int) -> float:
    """Cumulative product of (1 - beta) over the first t steps; 1 at t = 0."""
    if not 0 <= t <= schedule.num_steps:
        raise ValueError(f"t must be in [0, {schedule.num_steps}], got {t}")
    return float(schedule.alpha_bars[t])
