"""Matrix-free measurement operators, structured noise covariances and whiteners.

All operator callables act on the last axis, so a batch of vectors can be
pushed through as an ``(n, d)`` array in one call.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

DENSE_LIMIT = 1 << 20  # max m*d for dense materialization (oracles/tests only)

_OP_MAGIC = b"LINOPv01"


@dataclass(frozen=True)
class LinearOperator:
    """Linear map R^d -> R^m given by apply/adjoint closures.

    ``apply`` maps ``(..., d) -> (..., m)`` and ``adjoint`` maps
    ``(..., m) -> (..., d)``; both must satisfy the inner-product adjoint
    identity.  ``dense`` is an optional (m, d) materialization, only present
    for small instances and used by oracles and tests.
    """

    m: int
    d: int
    apply: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]
    dense: np.ndarray | None = None

    def __post_init__(self):
        if self.m < 1 or self.d < 1:
            raise ValueError("operator dimensions must be positive")
        if self.dense is not None and self.dense.shape != (self.m, self.d):
            raise ValueError("dense matrix shape mismatch")


def from_dense(mat: np.ndarray) -> LinearOperator:
    """Wrap a dense (m, d) matrix as a batched LinearOperator."""
    mat = np.ascontiguousarray(np.asarray(mat, dtype=float))
    if mat.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    m, d = mat.shape
    dense = mat if m * d <= DENSE_LIMIT else None
    return LinearOperator(
        m=m,
        d=d,
        apply=lambda x, _M=mat: x @ _M.T,
        adjoint=lambda y, _M=mat: y @ _M,
        dense=dense,
    )


def zero_operator(m: int, d: int) -> LinearOperator:
    """The all-zero map, used for measurement-free sampling."""
    return from_dense(np.zeros((m, d)))


def save_dense_operator(op: LinearOperator, path) -> None:
    """Dump a dense operator: 16-byte header (magic, m, d) + row-major float64."""
    if op.dense is None:
        raise ValueError("operator has no dense materialization")
    with open(path, "wb") as fh:
        fh.write(_OP_MAGIC)
        fh.write(struct.pack("<II", op.m, op.d))
        fh.write(np.ascontiguousarray(op.dense, dtype="<f8").tobytes())


def load_dense_operator(path) -> LinearOperator:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _OP_MAGIC:
            raise ValueError(f"bad operator file magic in {path!r}")
        m, d = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != m * d:
        raise ValueError(f"operator file {path!r} truncated")
    return from_dense(data.reshape(m, d))


# ---------------------------------------------------------------------------
# Noise covariance models


@dataclass(frozen=True)
class IsotropicNoise:
    """Sigma_n = sigma2 * I (dimension-free)."""

    sigma2: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError("sigma2 must be positive and finite")

    def dense(self, m: int) -> np.ndarray:
        return self.sigma2 * np.eye(m)


@dataclass(frozen=True)
class DiagonalNoise:
    """Sigma_n = diag(variances)."""

    variances: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("variances must be a nonempty vector")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("variances must be positive and finite")
        object.__setattr__(self, "variances", v)

    def dense(self, m: int | None = None) -> np.ndarray:
        return np.diag(self.variances)


@dataclass(frozen=True)
class LowRankNoise:
    """Sigma_n = U U^T + sigma2 * I with a tall factor U (m x r, r << m)."""

    U: np.ndarray
    sigma2: float

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        if U.ndim != 2 or U.shape[0] < U.shape[1]:
            raise ValueError("U must be a tall (m, r) matrix")
        if not np.all(np.isfinite(U)):
            raise ValueError("U must be finite")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError("sigma2 must be positive and finite")
        object.__setattr__(self, "U", U)

    def dense(self, m: int | None = None) -> np.ndarray:
        return self.U @ self.U.T + self.sigma2 * np.eye(self.U.shape[0])


@dataclass(frozen=True)
class CirculantNoise:
    """Circulant Sigma_n diagonalized by the DFT, stored by its eigenvalues.

    The spectrum must be real, strictly positive and Hermitian-symmetric
    (spectrum[k] == spectrum[m-k]) so the covariance is a real symmetric
    circulant matrix.
    """

    spectrum: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.spectrum, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("spectrum must be a nonempty vector")
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("spectrum must be positive and finite")
        mirrored = s[(-np.arange(s.size)) % s.size]
        if not np.allclose(s, mirrored, rtol=1e-10, atol=0.0):
            raise ValueError("spectrum must be Hermitian-symmetric")
        object.__setattr__(self, "spectrum", s)

    def dense(self, m: int | None = None) -> np.ndarray:
        n = self.spectrum.size
        first_col = np.fft.irfft(self.spectrum[: n // 2 + 1], n=n)
        idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
        return first_col[idx]


NoiseModel = IsotropicNoise | DiagonalNoise | LowRankNoise | CirculantNoise


# ---------------------------------------------------------------------------
# Conditional covariance  abar * Sigma_n + (1 - abar) * I


@dataclass(frozen=True)
class IsotropicCov:
    gamma: float
    abar: float

    def dense(self, m: int) -> np.ndarray:
        return self.gamma * np.eye(m)


@dataclass(frozen=True)
class DiagonalCov:
    variances: np.ndarray
    abar: float

    def dense(self, m: int | None = None) -> np.ndarray:
        return np.diag(self.variances)


@dataclass(frozen=True)
class LowRankCov:
    """abar * U U^T + delta * I, stored as U_scaled = sqrt(abar) * U."""

    U_scaled: np.ndarray
    delta: float
    abar: float

    def dense(self, m: int | None = None) -> np.ndarray:
        return self.U_scaled @ self.U_scaled.T + self.delta * np.eye(self.U_scaled.shape[0])


@dataclass(frozen=True)
class CirculantCov:
    spectrum: np.ndarray
    abar: float

    def dense(self, m: int | None = None) -> np.ndarray:
        return CirculantNoise(self.spectrum).dense()


ConditionalCov = IsotropicCov | DiagonalCov | LowRankCov | CirculantCov


def mix_conditional_cov(noise: NoiseModel, abar_prev: float) -> ConditionalCov:
    """Blend the measurement noise with identity: abar * Sigma_n + (1 - abar) * I.

    Preserves the structure class of the input, so the whitener stays cheap.
    """
    a = float(abar_prev)
    if not (0.0 < a <= 1.0):
        raise ValueError("abar_prev must lie in (0, 1]")
    rem = 1.0 - a
    if isinstance(noise, IsotropicNoise):
        return IsotropicCov(gamma=a * noise.sigma2 + rem, abar=a)
    if isinstance(noise, DiagonalNoise):
        return DiagonalCov(variances=a * noise.variances + rem, abar=a)
    if isinstance(noise, LowRankNoise):
        return LowRankCov(U_scaled=np.sqrt(a) * noise.U, delta=a * noise.sigma2 + rem, abar=a)
    if isinstance(noise, CirculantNoise):
        return CirculantCov(spectrum=a * noise.spectrum + rem, abar=a)
    raise TypeError(f"unsupported noise model {type(noise).__name__}")


# ---------------------------------------------------------------------------
# Whitening operators with W^T W = Sigma^{-1}


@dataclass(frozen=True)
class Whitener:
    """Symmetric whitening of a conditional covariance.

    ``apply_w`` realizes the inverse symmetric square root, so
    ``apply_wt(apply_w(v)) == apply_inv(v)`` holds by construction.
    """

    apply_w: Callable[[np.ndarray], np.ndarray]
    apply_wt: Callable[[np.ndarray], np.ndarray]
    apply_inv: Callable[[np.ndarray], np.ndarray]


def _scale_whitener(scale_w: np.ndarray | float, scale_inv: np.ndarray | float) -> Whitener:
    w = lambda v: v * scale_w
    return Whitener(apply_w=w, apply_wt=w, apply_inv=lambda v: v * scale_inv)


def make_whitener(cov: ConditionalCov) -> Whitener:
    """Build the matrix-free whitener for a structured conditional covariance.

    Isotropic/diagonal covariances whiten by elementwise scaling; the
    low-rank-plus-identity case goes through a dense eigendecomposition of
    the r x r Gram matrix (Woodbury capacitance), costing O(mr + r^3); the
    circulant case scales in the real-FFT domain, keeping outputs real.
    """
    if isinstance(cov, IsotropicCov):
        if not (np.isfinite(cov.gamma) and cov.gamma > 0):
            raise ValueError("conditional covariance must be positive definite")
        return _scale_whitener(cov.gamma ** -0.5, 1.0 / cov.gamma)

    if isinstance(cov, DiagonalCov):
        v = cov.variances
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ValueError("conditional covariance must be positive definite")
        return _scale_whitener(v ** -0.5, 1.0 / v)

    if isinstance(cov, LowRankCov):
        delta = cov.delta
        if not (np.isfinite(delta) and delta > 0):
            raise ValueError("conditional covariance must be positive definite")
        Us = cov.U_scaled
        lam, Q = np.linalg.eigh(Us.T @ Us)
        keep = lam > lam[-1] * 1e-14 if lam[-1] > 0 else np.zeros_like(lam, bool)
        lam = lam[keep]
        # Orthonormal basis of the factor's column space.
        P = Us @ (Q[:, keep] / np.sqrt(lam))
        coef_w = (delta + lam) ** -0.5 - delta ** -0.5
        coef_inv = 1.0 / (delta + lam) - 1.0 / delta

        def _lowrank(v, base, coef):
            return base * v + (v @ P) * coef @ P.T

        w = lambda v: _lowrank(v, delta ** -0.5, coef_w)
        return Whitener(apply_w=w, apply_wt=w, apply_inv=lambda v: _lowrank(v, 1.0 / delta, coef_inv))

    if isinstance(cov, CirculantCov):
        s = cov.spectrum
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("conditional covariance must be positive definite")
        n = s.size
        s_half = s[: n // 2 + 1]
        inv_sqrt = s_half ** -0.5
        inv = 1.0 / s_half

        def _fft_scale(v, scale):
            if v.shape[-1] != n:
                raise ValueError(f"expected last axis of length {n}, got {v.shape[-1]}")
            return np.fft.irfft(np.fft.rfft(v, axis=-1) * scale, n=n, axis=-1)

        w = lambda v: _fft_scale(v, inv_sqrt)
        return Whitener(apply_w=w, apply_wt=w, apply_inv=lambda v: _fft_scale(v, inv))

    raise TypeError(f"unsupported conditional covariance {type(cov).__name__}")


# ---------------------------------------------------------------------------
# Concrete measurement operators


def make_random_svd_operator(d: int, m: int, rng: np.random.Generator) -> LinearOperator:
    """Random operator with singular values drawn uniformly from [0, 1].

    A Gaussian (m, d) matrix supplies the singular bases; its singular values
    are replaced by min(m, d) independent Uniform[0, 1] draws.  Deterministic
    for a given generator state.
    """
    if not 1 <= m <= d:
        raise ValueError("need 1 <= m <= d")
    gauss = rng.standard_normal((m, d))
    u, _, vt = np.linalg.svd(gauss, full_matrices=False)
    s = rng.uniform(0.0, 1.0, size=min(m, d))
    return from_dense((u * s) @ vt)


def mask_operator(keep_indices, d: int) -> LinearOperator:
    """Coordinate-selection operator: apply(x) = x[keep_indices]."""
    keep = np.asarray(keep_indices, dtype=np.intp)
    if keep.ndim != 1 or keep.size == 0:
        raise ValueError("keep_indices must be a nonempty 1-D index set")
    if np.unique(keep).size != keep.size:
        raise ValueError("keep_indices must be unique")
    if np.any(keep < 0) or np.any(keep >= d):
        raise ValueError("keep_indices out of range")
    m = keep.size

    def apply(x):
        return np.ascontiguousarray(x[..., keep])

    def adjoint(y):
        out = np.zeros(y.shape[:-1] + (d,))
        out[..., keep] = y
        return out

    dense = None
    if m * d <= DENSE_LIMIT:
        dense = np.zeros((m, d))
        dense[np.arange(m), keep] = 1.0
    return LinearOperator(m=m, d=d, apply=apply, adjoint=adjoint, dense=dense)


def blur_operator(kernel, d: int) -> LinearOperator:
    """Circular convolution with an odd-length kernel; adjoint is correlation."""
    h = np.asarray(kernel, dtype=float)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("kernel must be a nonempty vector")
    if h.size % 2 == 0:
        raise ValueError("kernel length must be odd")
    if h.size > d:
        raise ValueError("kernel longer than the signal")
    r = h.size // 2
    offsets = np.arange(-r, r + 1)

    def apply(x):
        out = np.zeros(x.shape[:-1] + (d,))
        for w, j in zip(h, offsets):
            out += w * np.roll(x, j, axis=-1)
        return out

    def adjoint(y):
        out = np.zeros(y.shape[:-1] + (d,))
        for w, j in zip(h, offsets):
            out += w * np.roll(y, -j, axis=-1)
        return out

    dense = apply(np.eye(d)).T if d * d <= DENSE_LIMIT else None
    return LinearOperator(m=d, d=d, apply=apply, adjoint=adjoint, dense=dense)
