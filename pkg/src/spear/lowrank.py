"""Low-rank factorization of a weight gradient and the exact reconstruction algebra.

For a linear layer ``Z = W X + bias`` the weight gradient is ``dZ @ X.T``, so it has
rank at most b. Any full-rank factorization ``dW = L @ R`` is linked to the true
factors by a unique invertible ``Q`` with ``dZ = L @ Q`` and ``X.T = inv(Q) @ R``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_RANK_REL_TOL = 1e-6
CONDITION_LIMIT = 1e12


class DegenerateGradientError(ValueError):
    """The gradient carries no recoverable batch (all zero or non-finite)."""


class SingularDirectionsError(np.linalg.LinAlgError):
    """A direction set does not span R^b."""


@dataclass
class LowRankFactors:
    L: np.ndarray
    R: np.ndarray
    singular_values: np.ndarray
    inferred_b: int

    @property
    def column_sq_norms(self) -> np.ndarray:
        # L = U S^{1/2}: squared column norms are the kept singular values
        return self.singular_values[: self.inferred_b]

    def left_inverse(self) -> np.ndarray:
        return self.L.T / self.column_sq_norms[:, None]


@dataclass
class DisaggregationMatrix:
    Q: np.ndarray
    scales: np.ndarray
    directions: np.ndarray

    @classmethod
    def from_directions(cls, directions: np.ndarray, scales: np.ndarray) -> "DisaggregationMatrix":
        directions = np.asarray(directions, dtype=np.float64)
        scales = np.asarray(scales, dtype=np.float64)
        return cls(directions * scales[None, :], scales, directions)


@dataclass
class Reconstruction:
    X: np.ndarray
    dZ: np.ndarray
    condition: float
    ill_conditioned: bool = field(default=False)


def decompose(
    dW: np.ndarray,
    rank_rel_tol: float = DEFAULT_RANK_REL_TOL,
    noise_floor: float = 0.0,
    rank: Optional[int] = None,
) -> LowRankFactors:
    """Reduced SVD ``dW = U S V``; ``L = U S^1/2``, ``R = S^1/2 V`` truncated to the rank.

    The rank counts singular values above ``max(rank_rel_tol * s_1, noise_floor)``
    unless ``rank`` is given explicitly.
    """
    dW = np.asarray(dW, dtype=np.float64)
    if dW.ndim != 2:
        raise ValueError("dW must be a matrix")
    if not 0 < rank_rel_tol < 1:
        raise ValueError("rank_rel_tol must lie in (0, 1)")
    if not np.all(np.isfinite(dW)):
        raise DegenerateGradientError("gradient has non-finite entries")
    U, s, Vt = np.linalg.svd(dW, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise DegenerateGradientError("gradient is identically zero")
    if rank is None:
        threshold = max(rank_rel_tol * s[0], noise_floor)
        b = int(np.count_nonzero(s > threshold))
        if b == 0:
            raise DegenerateGradientError("no singular value above the noise floor")
    else:
        if not 1 <= rank <= s.size:
            raise ValueError(f"rank must be in [1, {s.size}]")
        b = int(rank)
    root = np.sqrt(s[:b])
    L = U[:, :b] * root[None, :]
    R = root[:, None] * Vt[:b]
    return LowRankFactors(L, R, s, b)


def recover_scales(directions: np.ndarray, factors: LowRankFactors, db: np.ndarray) -> np.ndarray:
    """Column scales s with ``Q = directions @ diag(s)`` from the bias gradient."""
    projected = factors.left_inverse() @ np.asarray(db, dtype=np.float64)
    try:
        _check_invertible(directions)
        return np.linalg.solve(directions, projected)
    except np.linalg.LinAlgError as exc:
        raise SingularDirectionsError("direction set is singular") from exc


def _check_invertible(M: np.ndarray) -> None:
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] <= s[0] * M.shape[0] * np.finfo(float).eps:
        raise SingularDirectionsError("direction set is numerically singular")


def disaggregation(directions: np.ndarray, factors: LowRankFactors, db: np.ndarray) -> DisaggregationMatrix:
    return DisaggregationMatrix.from_directions(directions, recover_scales(directions, factors, db))


def reconstruct(Q: DisaggregationMatrix | np.ndarray, factors: LowRankFactors, warn: bool = True) -> Reconstruction:
    """``X.T = inv(Q) @ R`` and ``dZ = L @ Q``."""
    Qm = Q.Q if isinstance(Q, DisaggregationMatrix) else np.asarray(Q, dtype=np.float64)
    cond = float(np.linalg.cond(Qm))
    try:
        Xt = np.linalg.solve(Qm, factors.R)
    except np.linalg.LinAlgError as exc:
        raise SingularDirectionsError("disaggregation matrix is singular") from exc
    ill = not cond < CONDITION_LIMIT
    if ill and warn:
        warnings.warn(f"disaggregation matrix is ill-conditioned (cond={cond:.3g})", RuntimeWarning)
    return Reconstruction(Xt.T, factors.L @ Qm, cond, ill)


def transfer_matrix(L1: np.ndarray, L2: np.ndarray) -> np.ndarray:
    """The unique M with ``L1 @ M = L2`` for two factorizations of one matrix."""
    return np.linalg.pinv(L1) @ L2
