"""Sample-set comparison metrics and per-step diagnostics."""

from __future__ import annotations

import math

import numpy as np

from .operators import LinearOperator

_SLICE_CHUNK = 2048


def _check_samples(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"{name} must be a nonempty (n, d) array")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def sliced_wasserstein(
    a: np.ndarray,
    b: np.ndarray,
    n_slices: int,
    rng: np.random.Generator,
    order: int = 2,
) -> float:
    """Sliced Wasserstein distance between two equal-size sample sets.

    Projects both sets onto ``n_slices`` uniform random directions, computes
    the 1-D order-p Wasserstein distance per direction via sorted quantile
    matching, and aggregates as (mean_slices W_p^p)^(1/p).  All directions
    come from ``rng`` up front, so the result is independent of how the
    slice loop is chunked.
    """
    a = _check_samples(a, "a")
    b = _check_samples(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets must share the dimension")
    if a.shape[0] != b.shape[0]:
        raise ValueError("sample sets must have equal size")
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")

    d = a.shape[1]
    dirs = rng.standard_normal((n_slices, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    total = 0.0
    for lo in range(0, n_slices, _SLICE_CHUNK):
        chunk = dirs[lo : lo + _SLICE_CHUNK]
        pa = np.sort(a @ chunk.T, axis=0)
        pb = np.sort(b @ chunk.T, axis=0)
        diff = pa - pb
        if order == 2:
            total += float(np.mean(diff * diff, axis=0).sum())
        else:
            total += float(np.mean(np.abs(diff), axis=0).sum())
    mean = total / n_slices
    return math.sqrt(mean) if order == 2 else mean


def measurement_residual(x: np.ndarray, y: np.ndarray, A: LinearOperator) -> float | np.ndarray:
    """Squared Euclidean misfit ||y - A x||^2 (per row for a batch of x)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != A.d or y.shape[-1] != A.m:
        raise ValueError("dimension mismatch")
    r = y - A.apply(x)
    out = np.einsum("...i,...i->...", r, r)
    return float(out) if out.ndim == 0 else out


def score_consistency(score_fn, x_t: np.ndarray, x_prev: np.ndarray, t: int) -> tuple[float, float]:
    """Alignment between the frozen score and the score one step later.

    Returns the cosine similarity of score(x_prev, t-1) against
    score(x_t, t) and their mean squared difference (1/d) ||.||^2.  The
    cosine is NaN if either vector is zero.
    """
    s_prev = np.asarray(score_fn(x_prev, t - 1), dtype=float)
    s_cur = np.asarray(score_fn(x_t, t), dtype=float)
    if s_prev.shape != s_cur.shape or s_prev.ndim != 1:
        raise ValueError("scores must be matching 1-D vectors")
    d = s_prev.size
    diff = s_prev - s_cur
    mse = float(diff @ diff) / d
    np_ = float(np.linalg.norm(s_prev))
    nc = float(np.linalg.norm(s_cur))
    if np_ == 0.0 or nc == 0.0:
        return math.nan, mse
    return float(s_prev @ s_cur) / (np_ * nc), mse
