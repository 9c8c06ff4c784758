"""Dense symmetric positive definite linear algebra helpers.

Every covariance computation in this package goes through the three
operations below, so the jitter policy for near-singular matrices lives
in exactly one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import DimensionMismatch, NotPositiveDefinite

JITTER_INITIAL = 1e-10
JITTER_MAX = 1e-4
JITTER_GROWTH = 10.0
SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular Cholesky factor of a positive definite matrix.

    Attributes
    ----------
    lower : ndarray
        Lower-triangular matrix ``L`` with ``L @ L.T`` equal to the
        factored matrix (plus ``jitter_applied`` times the identity).
    jitter_applied : float
        Diagonal jitter that had to be added before the factorization
        succeeded; 0.0 for numerically positive definite input.
    """

    lower: np.ndarray = field(repr=False)
    jitter_applied: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def cholesky(a: np.ndarray) -> CholeskyFactor:
    """Factor a symmetric positive definite matrix as ``L @ L.T``.

    Parameters
    ----------
    a : ndarray of shape (n, n)
        Symmetric matrix. Symmetry is checked up to a relative
        tolerance of ``1e-10 * max(|a|)``.

    Returns
    -------
    CholeskyFactor
        Factor with ``jitter_applied == 0.0`` when ``a`` is numerically
        positive definite. Otherwise a diagonal jitter is escalated by
        factors of 10 from 1e-10 up to 1e-4 until the factorization
        succeeds.

    Raises
    ------
    DimensionMismatch
        If ``a`` is not a square 2-d array.
    ValueError
        If ``a`` is not symmetric to tolerance.
    NotPositiveDefinite
        If the factorization still fails at the largest jitter.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    scale = np.abs(a).max() if a.size else 0.0
    if a.size and np.abs(a - a.T).max() > SYMMETRY_RTOL * max(scale, 1e-300):
        raise ValueError("matrix is not symmetric to tolerance")

    try:
        return CholeskyFactor(np.linalg.cholesky(a), 0.0)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[0])
    jitter = JITTER_INITIAL
    while jitter <= JITTER_MAX * (1.0 + 1e-12):
        try:
            return CholeskyFactor(np.linalg.cholesky(a + jitter * eye), jitter)
        except np.linalg.LinAlgError:
            jitter *= JITTER_GROWTH
    raise NotPositiveDefinite(
        f"matrix of dim {a.shape[0]} not positive definite after jitter {JITTER_MAX:g}"
    )


def solve_spd(factor: CholeskyFactor, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` given the Cholesky factor of ``A``.

    ``b`` may be a vector or a matrix of stacked right-hand sides.
    """
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factor.dim:
        raise DimensionMismatch(
            f"right-hand side has leading dim {b.shape[0]}, factor has {factor.dim}"
        )
    return scipy.linalg.cho_solve((factor.lower, True), b, check_finite=False)


def log_det(factor: CholeskyFactor) -> float:
    """Log-determinant of the factored matrix, ``2 * sum(log(diag(L)))``."""
    return 2.0 * float(np.sum(np.log(np.diag(factor.lower))))
