"""Matrix-free SPD solves and the pre-whitened conjugate-gradient Gaussian draw.

Every reverse sampling step needs two solves against the same posterior
precision ``c * I + (W A)^T (W A)``: one for the mean and one to turn a
synthetic right-hand side with covariance equal to the precision into a
draw from the posterior covariance.  Right-hand sides may be batched with
the vector axis last, in which case CG runs all rows simultaneously.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .operators import LinearOperator, Whitener

PRECOND_PROBE_LIMIT = 4096  # beyond this, fall back to the identity preconditioner


@dataclass(frozen=True)
class WhitenedOperator:
    """Composition W o A of a whitener with a measurement operator."""

    op: LinearOperator
    whitener: Whitener

    @property
    def m(self) -> int:
        return self.op.m

    @property
    def d(self) -> int:
        return self.op.d

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.whitener.apply_w(self.op.apply(x))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self.op.adjoint(self.whitener.apply_wt(y))


@dataclass(frozen=True)
class PrecisionOperator:
    """SPD action u -> c * u + (W A)^T (W A) u with c > 0.

    ``whitened`` may be None for the measurement-free case, where the
    operator degenerates to c * I.
    """

    c: float
    d: int
    whitened: WhitenedOperator | None = None

    def __post_init__(self):
        if not (np.isfinite(self.c) and self.c > 0):
            raise ValueError("c must be positive and finite")
        if self.whitened is not None and self.whitened.d != self.d:
            raise ValueError("dimension mismatch between c-term and whitened operator")

    def matvec(self, u: np.ndarray) -> np.ndarray:
        if self.whitened is None:
            return self.c * u
        return self.c * u + self.whitened.adjoint(self.whitened.apply(u))

    def dense(self) -> np.ndarray:
        """Materialize by probing with the identity (tests and oracles only)."""
        return self.matvec(np.eye(self.d)).T


@dataclass
class CgReport:
    """Outcome of one (possibly batched) CG solve."""

    iterations: int
    relative_residual: float
    converged: bool
    row_iterations: np.ndarray | None = None
    row_converged: np.ndarray | None = None


def diag_preconditioner(op: PrecisionOperator) -> np.ndarray | None:
    """Diagonal of the precision operator, i.e. c + ||W A e_i||^2 per column.

    Column norms come from the dense matrix when available, otherwise from a
    batched identity probe; above the probe limit returns None, which
    cg_solve treats as the identity preconditioner.
    """
    if op.whitened is None:
        return np.full(op.d, op.c)
    wa = op.whitened
    if wa.op.dense is not None:
        cols = wa.whitener.apply_w(wa.op.dense.T)  # row i = W A e_i
    elif op.d <= PRECOND_PROBE_LIMIT:
        cols = wa.apply(np.eye(op.d))
    else:
        return None
    return op.c + np.einsum("ij,ij->i", cols, cols)


def _row_norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", v, v))


def cg_solve(
    op: PrecisionOperator,
    rhs: np.ndarray,
    preconditioner: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int | None = None,
    callback: Callable[[np.ndarray], None] | None = None,
) -> tuple[np.ndarray, CgReport]:
    """Preconditioned conjugate gradients on ``op.matvec(x) = rhs``.

    Stops when every row satisfies ||op(x) - rhs|| <= tol * ||rhs||; rows
    with a zero right-hand side converge immediately to zero.  On
    non-convergence, the best iterate seen (smallest relative residual per
    row) is returned with ``converged=False`` and the caller decides.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[-1] != op.d:
        raise ValueError(f"rhs last axis must be {op.d}")
    if not np.all(np.isfinite(rhs)):
        raise ValueError("rhs must be finite")
    if max_iter is None:
        max_iter = 10 * op.d
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    x = np.zeros_like(rhs)
    r = rhs.copy()
    rhs_norm = _row_norms(rhs)
    zero_rhs = rhs_norm == 0.0
    safe_norm = np.where(zero_rhs, 1.0, rhs_norm)

    rel = _row_norms(r) / safe_norm
    row_conv = rel <= tol
    row_iters = np.zeros(rel.shape, dtype=int)
    best_rel = rel.copy()
    best_x = x.copy()
    if np.all(row_conv):
        return x, CgReport(0, float(np.max(rel, initial=0.0)), True,
                           row_iterations=row_iters, row_converged=row_conv)

    z = r / preconditioner if preconditioner is not None else r.copy()
    p = z.copy()
    rz = np.einsum("...i,...i->...", r, z)

    iterations = 0
    for k in range(1, max_iter + 1):
        ap = op.matvec(p)
        pap = np.einsum("...i,...i->...", p, ap)
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(pap > 0, rz / np.where(pap == 0, 1.0, pap), 0.0)
        x = x + alpha[..., None] * p
        r = r - alpha[..., None] * ap
        iterations = k
        if callback is not None:
            callback(x.copy())

        rel = _row_norms(r) / safe_norm
        improved = rel < best_rel
        if np.any(improved):
            best_rel = np.where(improved, rel, best_rel)
            if improved.ndim == 0:
                best_x = x.copy()
            else:
                best_x[improved] = x[improved]
        newly = (rel <= tol) & ~row_conv
        row_iters = np.where(newly, k, row_iters)
        row_conv = row_conv | newly
        if np.all(row_conv):
            break

        z = r / preconditioner if preconditioner is not None else r
        rz_new = np.einsum("...i,...i->...", r, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            beta = np.where(rz > 0, rz_new / np.where(rz == 0, 1.0, rz), 0.0)
        p = z + beta[..., None] * p
        rz = rz_new

    converged = bool(np.all(row_conv))
    if not converged:
        x = best_x
        rel = best_rel
    return x, CgReport(
        iterations=iterations,
        relative_residual=float(np.max(rel)),
        converged=converged,
        row_iterations=row_iters,
        row_converged=row_conv,
    )


def pw_cg_draw(
    op: PrecisionOperator,
    rng: np.random.Generator,
    tol: float = 1e-8,
    max_iter: int | None = None,
    preconditioner: np.ndarray | None = None,
    n: int | None = None,
) -> tuple[np.ndarray, CgReport]:
    """Draw from N(0, op^{-1}) without any dense factorization.

    Synthesizes z = sqrt(c) * eps1 + (W A)^T eps2, whose covariance equals
    the precision operator itself, then returns the CG solve of
    ``op.matvec(v) = z``.  Pass ``n`` to draw a batch of independent vectors.
    """
    shape1 = (op.d,) if n is None else (n, op.d)
    eps1 = rng.standard_normal(shape1)
    z = np.sqrt(op.c) * eps1
    if op.whitened is not None:
        shape2 = (op.whitened.m,) if n is None else (n, op.whitened.m)
        eps2 = rng.standard_normal(shape2)
        z = z + op.whitened.adjoint(eps2)
    return cg_solve(op, z, preconditioner=preconditioner, tol=tol, max_iter=max_iter)
