"""Dense real matrix kernel.

Matrices are plain 2-D ``float64`` numpy arrays. The routines here add the
shape checks, pivot guards and error types the constructions and the LMI
verifier rely on; the heavy lifting is LAPACK via numpy/scipy.
"""

import warnings

import numpy as np
from scipy.linalg import LinAlgWarning, lapack, lu_factor, lu_solve


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class SingularMatrixError(ArithmeticError):
    """A pivot fell below the working-precision threshold."""


class NotPositiveDefiniteError(ArithmeticError):
    """Cholesky hit a non-positive pivot.

    ``index`` is the 0-based position of the failing pivot.
    """

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"matrix not positive definite (pivot {index})")


class BracketError(ValueError):
    """The bisection bracket does not straddle the smallest eigenvalue."""


def as_mat(a):
    """Return ``a`` as a 2-D float64 array (scalars become 1x1, vectors columns)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got array with shape {a.shape}")
    return a


def matmul(a, b):
    a, b = as_mat(a), as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def solve_lu(a, b):
    """Solve ``a @ x = b`` by LU with partial pivoting."""
    a, b = as_mat(a), as_mat(b)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionError(f"solve_lu needs a square matrix, got {a.shape}")
    if b.shape[0] != n:
        raise DimensionError(f"solve_lu rhs mismatch: {a.shape} vs {b.shape}")
    if n == 0:
        return np.zeros(b.shape)
    return lu_solve(lu_factorize(a), b)


def lu_factorize(a):
    """LU factors of square ``a`` (scipy layout), guarded against tiny pivots."""
    a = as_mat(a)
    norm_inf = np.abs(a).sum(axis=1).max() if a.size else 0.0
    with warnings.catch_warnings():
        # exact singularity is reported below through the pivot guard
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(a, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.size and (norm_inf == 0.0 or pivots.min() < 1e-13 * norm_inf):
        raise SingularMatrixError(
            f"matrix singular to working precision (min pivot {pivots.min():.3e}, "
            f"||a||_inf {norm_inf:.3e})"
        )
    return lu, piv


def cholesky(a):
    """Lower Cholesky factor of the symmetrized input."""
    a = as_mat(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"cholesky needs a square matrix, got {a.shape}")
    sym = 0.5 * (a + a.T)
    if sym.shape[0] == 0:
        return sym.copy()
    c, info = lapack.dpotrf(sym, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf argument {-info} invalid")
    return c


def is_positive_definite(a):
    try:
        cholesky(a)
    except NotPositiveDefiniteError:
        return False
    return True


def pd_margin(a, lo=None, hi=None, tol=1e-10):
    """Smallest eigenvalue of symmetric ``a`` to within ``tol``.

    Bisection on ``tau`` with the predicate "cholesky(a - tau I) succeeds",
    which holds exactly for ``tau < lambda_min``. The default bracket is
    ``[-||a||_F - 1, ||a||_F + 1]``.
    """
    a = as_mat(a)
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    if n == 0:
        return np.inf
    fro = np.linalg.norm(a)
    lo = -fro - 1.0 if lo is None else float(lo)
    hi = fro + 1.0 if hi is None else float(hi)
    eye = np.eye(n)
    if not lo < hi:
        raise BracketError(f"invalid bracket [{lo}, {hi}]")
    if not is_positive_definite(a - lo * eye) or is_positive_definite(a - hi * eye):
        raise BracketError(f"bracket [{lo}, {hi}] does not contain lambda_min")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if is_positive_definite(a - mid * eye):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def spectral_norm(a, iters=500, seed=0):
    """Largest singular value by power iteration on ``a.T a``."""
    a = as_mat(a)
    if a.size == 0:
        return 0.0
    v = np.random.default_rng(seed).standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        w = a.T @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        s_new = np.sqrt(nw)
        if abs(s_new - s) <= 1e-15 * s_new:
            s = s_new
            break
        s = s_new
    return float(np.linalg.norm(a @ v))
