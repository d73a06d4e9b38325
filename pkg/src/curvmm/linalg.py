"""Dense linear algebra kernels with validation.

Everything operates on float64 ndarrays. The spectral norm estimator is a
hand-rolled power iteration on ``M^T M``; the dense oracles
(:func:`svd_spectral_norm`, :func:`dense_symmetric_eigmax`) call LAPACK and
are intended for small matrices (dimension capped at 256).
"""

from __future__ import annotations

import numpy as np

from .exceptions import InvalidInputError, ShapeError

__all__ = [
    "as_matrix",
    "as_vector",
    "matvec",
    "matmul",
    "dot",
    "norm2",
    "norm1",
    "spectral_norm",
    "svd_spectral_norm",
    "dense_symmetric_eigmax",
]

_DENSE_DIM_CAP = 256


def _check_finite(a, name):
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")


def as_matrix(a, name="matrix"):
    """Validate and return ``a`` as a float64 2-D array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    _check_finite(a, name)
    return a


def as_vector(a, name="vector"):
    """Validate and return ``a`` as a float64 1-D array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={a.ndim}")
    _check_finite(a, name)
    return a


def matvec(m, v):
    m = as_matrix(m, "m")
    v = as_vector(v, "v")
    if m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec shape mismatch: {m.shape} @ {v.shape}")
    return m @ v


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def dot(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dot shape mismatch: {a.shape} vs {b.shape}")
    _check_finite(a, "a")
    _check_finite(b, "b")
    return float(a.ravel() @ b.ravel())


def norm2(a):
    """Euclidean norm of a vector, Frobenius norm of a matrix."""
    a = np.asarray(a, dtype=np.float64)
    _check_finite(a, "a")
    return float(np.linalg.norm(a.ravel()))


def norm1(a):
    a = np.asarray(a, dtype=np.float64)
    _check_finite(a, "a")
    return float(np.sum(np.abs(a)))


def spectral_norm(m, iters=2000, tol=1e-12, seed=0):
    """Largest singular value of ``m`` by power iteration on ``M^T M``.

    Parameters
    ----------
    m : (r, c) array
    iters : int
        Iteration cap, must be >= 1.
    tol : float
        Relative convergence tolerance on the Rayleigh quotient residual.
    seed : int
        Seed for the random start vector; the routine is deterministic
        given (m, iters, tol, seed).

    Returns
    -------
    float
        Estimate of ``sigma_max(m)``, 0.0 for the zero matrix.
    """
    m = as_matrix(m, "m")
    if iters < 1:
        raise InvalidInputError(f"iters must be >= 1, got {iters}")
    if not tol > 0:
        raise InvalidInputError(f"tol must be positive, got {tol}")
    scale = float(np.max(np.abs(m), initial=0.0))
    if scale == 0.0:
        return 0.0
    # Work on the smaller Gram side so the iteration dimension is min(r, c).
    a = m if m.shape[1] <= m.shape[0] else m.T
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = a.T @ (a @ v)
        lam = float(v @ w)
        resid = np.linalg.norm(w - lam * v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # v landed exactly in the null space; restart direction.
            v = rng.standard_normal(a.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        if resid <= tol * max(lam, np.finfo(np.float64).tiny):
            break
    return float(np.sqrt(max(lam, 0.0)))


def svd_spectral_norm(m):
    """Exact largest singular value via dense SVD (small matrices only)."""
    m = as_matrix(m, "m")
    if min(m.shape) > _DENSE_DIM_CAP:
        raise ShapeError(
            f"dense SVD limited to min dim {_DENSE_DIM_CAP}, got {m.shape}"
        )
    return float(np.linalg.svd(m, compute_uv=False)[0])


def dense_symmetric_eigmax(h, sym_tol=1e-8):
    """Largest eigenvalue of a symmetric matrix via full eigendecomposition.

    Raises
    ------
    ShapeError
        If ``h`` is not square or exceeds the dimension cap.
    InvalidInputError
        If ``h`` deviates from symmetry by more than ``sym_tol``.
    """
    h = as_matrix(h, "h")
    if h.shape[0] != h.shape[1]:
        raise ShapeError(f"h must be square, got {h.shape}")
    if h.shape[0] > _DENSE_DIM_CAP:
        raise ShapeError(f"dense eig limited to dim {_DENSE_DIM_CAP}, got {h.shape}")
    asym = float(np.max(np.abs(h - h.T), initial=0.0))
    bound = sym_tol * max(1.0, float(np.max(np.abs(h), initial=0.0)))
    if asym > bound:
        raise InvalidInputError(f"matrix asymmetry {asym:.3e} exceeds {bound:.3e}")
    return float(np.linalg.eigvalsh(0.5 * (h + h.T))[-1])
