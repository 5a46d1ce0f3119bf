"""Dense linear-algebra kernels and finite-difference oracles.

Everything operates on plain float64 numpy arrays (row-major). These are the
low-level building blocks used by the regressor/basis construction and by the
test suite's derivative checks.
"""

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NumericalError


def make_rng(seed):
    """Single choke point for RNG construction, so seeding stays uniform."""
    return np.random.default_rng(seed)


def require_finite(name, a):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def reduced_svd(a, rank_tol=1e-12):
    """Thin SVD of a tall matrix with small singular values truncated.

    Parameters
    ----------
    a : (m, n) array, m >= n >= 1
    rank_tol : float
        Columns with singular value < rank_tol * sigma_max are dropped, so
        exactly-zero directions (e.g. an identically zero regressor column)
        never enter the returned basis.

    Returns
    -------
    q : (m, r) array with orthonormal columns
    sigma : (r,) non-increasing, nonnegative
    v : (n, r) array, so that a ~ q @ diag(sigma) @ v.T
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise InvalidInputError(f"expected a 2-d matrix, got ndim={a.ndim}")
    m, n = a.shape
    if m < n or n < 1:
        raise InvalidInputError(f"reduced_svd requires m >= n >= 1, got {m}x{n}")
    if rank_tol < 0:
        raise InvalidInputError("rank_tol must be nonnegative")
    require_finite("matrix", a)
    try:
        # Golub-Kahan bidiagonalization driver; validated downstream by the
        # reconstruction property rather than by the choice of algorithm.
        u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - rare
        raise NumericalError(f"SVD did not converge (LAPACK gesvd): {exc}") from exc
    if s.size == 0 or s[0] <= 0.0:
        return np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0))
    r = int(np.sum(s >= rank_tol * s[0]))
    return u[:, :r], s[:r], vt[:r].T


def finite_diff_gradient(f, x, h=1e-6):
    """Central-difference gradient of a scalar function, one column at a time."""
    x = np.asarray(x, dtype=float)
    if h <= 0:
        raise InvalidInputError("step h must be positive")
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    if not np.all(np.isfinite(g)):
        raise NumericalError("finite-difference gradient is non-finite")
    return g


def finite_diff_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of a vector-valued function of a vector."""
    x = np.asarray(x, dtype=float)
    if h <= 0:
        raise InvalidInputError("step h must be positive")
    cols = []
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(f(xp), dtype=float) - np.asarray(f(xm), dtype=float)) / (2.0 * h))
    jac = np.stack(cols, axis=-1)
    if not np.all(np.isfinite(jac)):
        raise NumericalError("finite-difference Jacobian is non-finite")
    return jac
