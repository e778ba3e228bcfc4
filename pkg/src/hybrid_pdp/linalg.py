"""Small dense complex linear algebra used throughout the package.

All matrices here are tiny (sector dimensions of a few states), so
everything is dense and complex128.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import DimensionError, PreconditionError

HERMITIAN_TOL = 1e-10


def as_matrix(M) -> np.ndarray:
    """Return ``M`` as a 2-d complex128 array, rejecting non-finite entries."""
    A = np.asarray(M, dtype=np.complex128)
    if A.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise PreconditionError("matrix has non-finite entries")
    return A


def as_vector(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.complex128)
    if a.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise PreconditionError("vector has non-finite entries")
    return a


def _require_square(A: np.ndarray) -> None:
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"matrix must be square, got shape {A.shape}")


def matrix_exponential(M, scale: float = 1.0) -> np.ndarray:
    """Return ``exp(scale * M)`` for a square, possibly non-normal matrix.

    Uses Pade scaling-and-squaring, so defective effective Hamiltonians
    are handled without an eigendecomposition.
    """
    A = as_matrix(M)
    _require_square(A)
    if A.shape[0] == 0:
        return A.copy()
    return scipy.linalg.expm(scale * A)


def expm_unchecked(M: np.ndarray, scale: float) -> np.ndarray:
    """``matrix_exponential`` without input validation, for hot loops on
    operators that were validated at model construction."""
    return scipy.linalg.expm(scale * M)


def hermitian_deviation(M) -> float:
    """Frobenius norm of ``M - M^dagger``."""
    A = as_matrix(M)
    _require_square(A)
    return float(np.linalg.norm(A - A.conj().T))


def min_eigenvalue_hermitian(M) -> float:
    A = as_matrix(M)
    _require_square(A)
    if hermitian_deviation(A) > HERMITIAN_TOL:
        raise PreconditionError("min_eigenvalue_hermitian requires a Hermitian matrix")
    if A.shape[0] == 0:
        return float("inf")
    return float(np.linalg.eigvalsh(0.5 * (A + A.conj().T))[0])


def trace_norm_hermitian(D) -> float:
    """Sum of absolute eigenvalues of a Hermitian matrix."""
    A = as_matrix(D)
    if A.shape[0] == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvalsh(0.5 * (A + A.conj().T))).sum())


def trace_distance(R, S) -> float:
    """Half the trace norm of ``R - S`` for Hermitian ``R`` and ``S``."""
    A, B = as_matrix(R), as_matrix(S)
    if A.shape != B.shape:
        raise DimensionError(f"shape mismatch: {A.shape} vs {B.shape}")
    _require_square(A)
    return 0.5 * trace_norm_hermitian(A - B)


def operator_norm(M) -> float:
    A = as_matrix(M)
    if A.size == 0:
        return 0.0
    return float(np.linalg.norm(A, 2))


def projector(psi) -> np.ndarray:
    v = as_vector(psi)
    return np.outer(v, v.conj())
