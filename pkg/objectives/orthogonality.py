"""
Subspace-orthogonality penalty between a LoRA update and its frozen weight.

For a layer with top-k left/right singular vectors ``U_k``, ``V_k`` of the
pretrained weight, the penalty is

    omega(A, B) = ||U_k^T B||_F^2 + ||A V_k||_F^2

and pushes the column space of B and the row space of A away from the
pretrained spectral subspaces.

The two sides may keep different ranks. A side whose basis spans the whole
space turns its term into plain weight decay, so the subspaces used in
training (``for_adapter``) leave at least ``r`` directions of each side
outside the penalty.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from core.linalg import as_matrix, svd_thin
from utils.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PretrainedSubspace:
    u_k: np.ndarray
    v_k: np.ndarray
    k: int

    @classmethod
    def from_weight(cls, w_pre, k: int) -> "PretrainedSubspace":
        """Top-``k`` singular subspaces of ``w_pre``; ``k`` is clipped to min(out, in)."""
        w = as_matrix(w_pre, "w_pre")
        full = min(w.shape)
        if k < 1:
            raise ShapeError(f"Subspace rank must be positive, got {k}")
        if k > full:
            logger.debug(f"Clipping subspace rank {k} to {full} for weight of shape {w.shape}")
            k = full
        factors = svd_thin(w).truncate(k)
        return cls(u_k=factors.u, v_k=factors.v, k=k)

    @classmethod
    def for_adapter(cls, w_pre, k: int, r: int) -> "PretrainedSubspace":
        """
        Subspaces penalized for a rank-``r`` adapter on ``w_pre``.

        The left rank is ``min(k, rank, out - r)`` and the right rank
        ``min(k, rank, in - r)`` with ``rank = min(out, in)``; a side without
        room keeps an empty basis and contributes nothing.
        """
        w = as_matrix(w_pre, "w_pre")
        if k < 1:
            raise ShapeError(f"Subspace rank must be positive, got {k}")
        if r < 1:
            raise ShapeError(f"Adapter rank must be positive, got {r}")
        out_dim, in_dim = w.shape
        full = min(w.shape)
        k_left = max(0, min(k, full, out_dim - r))
        k_right = max(0, min(k, full, in_dim - r))
        factors = svd_thin(w)
        logger.debug(f"Penalty ranks for {w.shape} with r={r}: left {k_left}, right {k_right} (k={k})")
        return cls(u_k=factors.u[:, :k_left], v_k=factors.v[:, :k_right], k=min(k, full))

    @property
    def out_dim(self) -> int:
        return int(self.u_k.shape[0])

    @property
    def in_dim(self) -> int:
        return int(self.v_k.shape[0])

    @property
    def k_left(self) -> int:
        return int(self.u_k.shape[1])

    @property
    def k_right(self) -> int:
        return int(self.v_k.shape[1])


def _check_shapes(a: np.ndarray, b: np.ndarray, sub: PretrainedSubspace) -> None:
    if b.shape[0] != sub.out_dim or a.shape[1] != sub.in_dim or a.shape[0] != b.shape[1]:
        raise ShapeError(
            f"Adapter shapes A{a.shape}, B{b.shape} do not match subspace "
            f"({sub.out_dim}x{sub.k_left}, {sub.in_dim}x{sub.k_right})"
        )


def omega(a, b, sub: PretrainedSubspace) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b, sub)
    left = sub.u_k.T @ b
    right = a @ sub.v_k
    return float(np.sum(left * left) + np.sum(right * right))


def omega_grads(a, b, sub: PretrainedSubspace) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(dA, dB) = (2 A V_k V_k^T, 2 U_k U_k^T B)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b, sub)
    d_a = 2.0 * (a @ sub.v_k) @ sub.v_k.T
    d_b = 2.0 * sub.u_k @ (sub.u_k.T @ b)
    return d_a, d_b


def projected_update_norms(delta, sub: PretrainedSubspace) -> Tuple[float, float]:
    """Frobenius norms of ``U_k^T dW`` and ``dW V_k`` for an update ``dW``."""
    delta = as_matrix(delta, "delta")
    if delta.shape != (sub.out_dim, sub.in_dim):
        raise ShapeError(f"Update of shape {delta.shape} against subspace of a {sub.out_dim}x{sub.in_dim} weight")
    return float(np.linalg.norm(sub.u_k.T @ delta)), float(np.linalg.norm(delta @ sub.v_k))
