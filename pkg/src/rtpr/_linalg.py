"""Small shared linear-algebra helpers.

Two factorization entry points with different jitter policies:

- ``chol_kernel`` is for kernel Gram matrices, which are only positive
  semi-definite; the standard relative jitter is always added first.
- ``chol_pd`` is for matrices that are positive definite by construction
  (marginal covariances carry an explicit noise ridge).  It factorizes the
  matrix as given and only falls back to the jittered form if rounding has
  pushed an eigenvalue below zero.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .errors import NumericError
from .kernel import add_jitter


def chol_kernel(K: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a kernel Gram matrix plus jitter."""
    try:
        return cholesky(add_jitter(K), lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"kernel matrix not positive definite after jitter: {exc}") from exc


def chol_pd(C: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a positive definite matrix.

    Tries the matrix as given, then once more with jitter, then gives up.
    """
    try:
        return cholesky(C, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        pass
    try:
        return cholesky(add_jitter(C), lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"matrix not positive definite after jitter: {exc}") from exc


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b given the lower Cholesky factor L of A."""
    return cho_solve((L, True), b)


def chol_inv(L: np.ndarray) -> np.ndarray:
    """Inverse of A given its lower Cholesky factor L."""
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    A_inv = Linv.T @ Linv
    return 0.5 * (A_inv + A_inv.T)


def chol_logdet(L: np.ndarray) -> float:
    """log det(A) given the lower Cholesky factor L of A."""
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def require_finite(name: str, *arrays) -> None:
    """Raise NumericError if any array contains NaN or infinity."""
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values encountered in {name}")
