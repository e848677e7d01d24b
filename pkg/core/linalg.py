"""
Dense linear algebra for the lab.

Matrices are 2-D ``float64`` numpy arrays and vectors are 1-D ones. The
spectral routines (thin SVD by one-sided Jacobi rotations, power iteration
for the spectral norm) are implemented here on top of plain array
arithmetic so their convergence behaviour and sign conventions are fixed
by this module rather than by the LAPACK build.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from core.rng import Rng
from utils.errors import DegenerateInputError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

# Seed of the power-iteration start vector; fixed so diagnostics are reproducible
POWER_ITERATION_SEED = 0x5EED

MAX_SVD_DIM = 512


def _check_finite(m: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{op} produced non-finite entries", details={"op": op})
    return m


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce ``m`` to a finite 2-D float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    return _check_finite(arr, name)


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Coerce ``v`` to a finite 1-D float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ShapeError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    return _check_finite(arr, name)


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def gaussian_matrix(rng: Rng, rows: int, cols: int, std: float) -> np.ndarray:
    """Matrix with i.i.d. N(0, std^2) entries drawn from ``rng``."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"Invalid shape ({rows}, {cols})")
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return np.asarray(rng.normal((rows, cols), std), dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul")


def frobenius(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(math.sqrt(float(np.sum(m * m))))


def add_scaled(a, b, s: float) -> np.ndarray:
    """Return ``a + s * b``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"add_scaled shape mismatch: {a.shape} vs {b.shape}")
    return _check_finite(a + s * b, "add_scaled")


def normalize(v) -> np.ndarray:
    """Scale ``v`` to unit l2 norm."""
    v = as_vector(v)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateInputError("Cannot normalize a zero vector")
    return v / norm


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``M = U diag(sigma) V^T`` with k = min(rows, cols)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    sweeps: int = 0
    residual: float = 0.0

    @property
    def k(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T

    def truncate(self, k: int) -> "SvdFactors":
        """Keep the leading ``k`` singular triplets."""
        if k < 1 or k > self.k:
            raise ShapeError(f"Truncation rank {k} outside [1, {self.k}]")
        return SvdFactors(
            u=self.u[:, :k].copy(),
            sigma=self.sigma[:k].copy(),
            v=self.v[:, :k].copy(),
            sweeps=self.sweeps,
            residual=self.residual,
        )


def _complete_basis(q: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Replace the columns flagged in ``missing`` by an orthonormal completion of the others."""
    rows = q.shape[0]
    kept = q[:, ~missing]
    basis, _ = np.linalg.qr(np.hstack([kept, np.eye(rows)]))
    completion = basis[:, kept.shape[1]:kept.shape[1] + int(missing.sum())]
    out = q.copy()
    out[:, missing] = completion
    return out


def svd_thin(m, tol: float = 1e-12, max_sweeps: int = 60) -> SvdFactors:
    """
    Thin singular value decomposition by one-sided Jacobi rotations.

    Column pairs of the working matrix are rotated until every pair is
    orthogonal to ``tol`` relative to the product of their norms. The
    result is sorted by descending singular value and each column of U has
    its largest-magnitude entry positive.

    Args:
        m: Matrix to decompose
        tol: Relative off-diagonal threshold below which no rotation is applied
        max_sweeps: Maximum number of full sweeps over all column pairs

    Returns:
        SvdFactors with k = min(rows, cols)

    Raises:
        ShapeError: If min(rows, cols) exceeds the desk-scale bound
        NumericalError: If the sweeps do not converge
    """
    a = as_matrix(m, "svd input")
    rows, cols = a.shape
    if min(rows, cols) > MAX_SVD_DIM:
        raise ShapeError(f"svd_thin supports min(rows, cols) <= {MAX_SVD_DIM}, got {a.shape}")

    transposed = rows < cols
    work = (a.T if transposed else a).copy()
    n = work.shape[1]
    rot = np.eye(n)

    sweeps = 0
    residual = 0.0
    converged = False
    for sweeps in range(1, max_sweeps + 1):
        rotations = 0
        residual = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                ci = work[:, i]
                cj = work[:, j]
                alpha = float(ci @ ci)
                beta = float(cj @ cj)
                gamma = float(ci @ cj)
                if alpha == 0.0 or beta == 0.0 or gamma == 0.0:
                    continue
                ratio = abs(gamma) / math.sqrt(alpha * beta)
                residual = max(residual, ratio)
                if ratio <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * ci - s * cj
                new_j = s * ci + c * cj
                work[:, i] = new_i
                work[:, j] = new_j
                ri = rot[:, i]
                rj = rot[:, j]
                new_ri = c * ri - s * rj
                new_rj = s * ri + c * rj
                rot[:, i] = new_ri
                rot[:, j] = new_rj
                rotations += 1
        if rotations == 0:
            converged = True
            break

    if not converged:
        raise NumericalError(
            f"Jacobi SVD did not converge after {sweeps} sweeps (residual {residual:.3e})",
            details={"sweeps": sweeps, "residual": residual},
        )

    sigma = np.sqrt(np.sum(work * work, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    rot = rot[:, order]

    missing = sigma <= np.finfo(np.float64).tiny
    safe = np.where(missing, 1.0, sigma)
    left = work / safe
    if missing.any():
        left = _complete_basis(left, missing)
        sigma = np.where(missing, 0.0, sigma)

    if transposed:
        u, v = rot, left
    else:
        u, v = left, rot

    # largest-magnitude entry of each U column is positive
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
    u = u * signs
    v = v * signs

    logger.debug(f"svd_thin {a.shape}: {sweeps} sweeps, residual {residual:.2e}")
    return SvdFactors(u=u, sigma=sigma, v=v, sweeps=sweeps, residual=residual)


@dataclass(frozen=True)
class PowerIterationResult:
    sigma: float
    vector: np.ndarray
    iterations: int
    degenerate: bool = False


def power_iteration(m, max_iters: int = 2000, tol: float = 1e-12) -> PowerIterationResult:
    """
    Leading singular value and right singular vector by power iteration on M^T M.

    Args:
        m: Matrix
        max_iters: Iteration budget
        tol: Relative change of the singular value estimate that counts as converged

    Returns:
        PowerIterationResult; a zero matrix yields sigma 0 with ``degenerate`` set

    Raises:
        NumericalError: If the estimate has not settled within ``max_iters``
    """
    a = as_matrix(m, "power iteration input")
    if max_iters < 1 or tol <= 0:
        raise ValueError(f"Invalid power iteration budget max_iters={max_iters}, tol={tol}")
    n = a.shape[1]
    if frobenius(a) == 0.0:
        logger.debug("power_iteration on a zero matrix")
        return PowerIterationResult(sigma=0.0, vector=np.zeros(n), iterations=0, degenerate=True)

    v = Rng(POWER_ITERATION_SEED).normal(n)
    v = v / np.linalg.norm(v)
    sigma = 0.0
    for iteration in range(1, max_iters + 1):
        w = a @ v
        estimate = float(np.linalg.norm(w))
        z = a.T @ w
        z_norm = float(np.linalg.norm(z))
        if z_norm == 0.0:
            # start vector in the null space, restart from the heaviest column
            v = np.zeros(n)
            v[int(np.argmax(np.sum(a * a, axis=0)))] = 1.0
            continue
        v = z / z_norm
        if abs(estimate - sigma) <= tol * estimate:
            return PowerIterationResult(sigma=estimate, vector=v, iterations=iteration)
        sigma = estimate

    raise NumericalError(
        f"Power iteration did not converge in {max_iters} iterations",
        details={"last_sigma": sigma, "last_vector": v, "iterations": max_iters},
    )


def sigma_max(m, max_iters: int = 2000, tol: float = 1e-12) -> float:
    """Spectral norm of ``m``; 0.0 for the zero matrix."""
    return power_iteration(m, max_iters=max_iters, tol=tol).sigma


def max_abs_cosine(u, basis) -> float:
    """Largest |cos| between ``u`` and the (unit-norm) columns of ``basis``."""
    u = as_vector(u, "u")
    basis = as_matrix(basis, "basis")
    if basis.shape[0] != u.shape[0]:
        raise ShapeError(f"Vector of length {u.shape[0]} against basis {basis.shape}")
    norm = float(np.linalg.norm(u))
    if norm == 0.0:
        raise DegenerateInputError("max_abs_cosine of a zero vector")
    cosines = np.abs(basis.T @ u) / norm
    return float(min(1.0, max(0.0, float(np.max(cosines)))))


def top_singular_vectors(m, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Leading ``k`` left and right singular vectors of ``m``."""
    factors = svd_thin(m).truncate(k)
    return factors.u, factors.v


def leading_left_vector(m) -> Optional[np.ndarray]:
    """Leading left singular vector, or None for a zero matrix."""
    factors = svd_thin(m)
    if factors.sigma[0] == 0.0:
        return None
    return factors.u[:, 0]
