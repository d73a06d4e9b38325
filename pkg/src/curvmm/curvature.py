"""Curvature bounds and valid step-size intervals for the diagonal majorant.

Two routes produce an upper bound on the largest Hessian eigenvalue of the
lower objective at a point:

* analytic: closed-form constants assembled from the leadfield norm and
  the network's Jacobian/Hessian norm bounds, and
* spectral: power iteration driven by Hessian-vector products, with a
  multiplicative safety factor.

Either way the valid reciprocal-curvature interval is
``[nu_lo, 1 / bound]``; diagonal majorant vectors inside it keep the
quadratic surrogate above the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg, losses, phinet
from .exceptions import (
    ConfigError,
    CurvatureUnavailableError,
    InvalidInputError,
    NumericError,
)

__all__ = [
    "CurvatureBounds",
    "CurvatureInterval",
    "SpectralEstimate",
    "network_jacobian_bound",
    "network_hessian_bound",
    "fidelity_bound",
    "regularizer_bound",
    "curvature_bounds",
    "estimate_lambda_max",
    "objective_hessian_operator",
    "valid_interval",
]

BETA_FLOOR = 1e-6
DEFAULT_SAFETY = 1.05
DEFAULT_LAMBDA_FLOOR = 1e-8


@dataclass(frozen=True)
class CurvatureBounds:
    """Assembled curvature constants at a point.

    ``mu1`` bounds the fidelity Hessian, ``mu2`` the regularizer Hessian;
    ``varrho`` is the network Jacobian norm bound, ``alpha`` the maximum
    output-component Hessian norm bound, ``beta`` the representation output
    norm, and ``dim`` the flattened problem dimension.
    """

    mu1: float
    mu2: float
    varrho: float
    alpha: float
    beta: float
    dim: int


@dataclass(frozen=True)
class CurvatureInterval:
    """Valid reciprocal-curvature box ``[nu_lo, nu_hi]``."""

    nu_lo: float
    nu_hi: float
    source: str
    lowered_lo: bool = False


@dataclass(frozen=True)
class SpectralEstimate:
    """Power-iteration output: dominant Rayleigh quotient and diagnostics."""

    lambda_hat: float
    vector: np.ndarray
    iterations: int
    residual: float
    converged: bool


def network_jacobian_bound(phi):
    """Global Jacobian norm bound: product of the layer spectral norms."""
    return (
        linalg.spectral_norm(phi.w3)
        * linalg.spectral_norm(phi.w2)
        * linalg.spectral_norm(phi.w1)
    )


def network_hessian_bound(phi):
    """Global bound on every output component's Hessian norm.

    ``(1 / (2 eps)) * ||W3|| * (||W1||^2 ||W2||^2 + ||W2||_1 ||W1||^2)``
    with ``||.||_1`` the operator 1-norm (max absolute column sum).
    """
    n1 = linalg.spectral_norm(phi.w1)
    n2 = linalg.spectral_norm(phi.w2)
    n3 = linalg.spectral_norm(phi.w3)
    w2_1 = float(np.max(np.sum(np.abs(phi.w2), axis=0)))
    return (0.5 / phi.eps) * n3 * (n1 * n1 * n2 * n2 + w2_1 * n1 * n1)


def fidelity_bound(leadfield, x, leadfield_norm=None):
    """Fidelity curvature bound ``5 ||L||^2 / ||L x||^2`` at ``x``."""
    ln = leadfield_norm if leadfield_norm is not None else linalg.spectral_norm(leadfield)
    cols = np.asarray(x, dtype=np.float64)
    cols = cols.reshape(leadfield.shape[1], -1)
    lx = float(np.linalg.norm(leadfield @ cols))
    if lx < 1e-12:
        raise CurvatureUnavailableError("forward projection norm too small for bound")
    return 5.0 * ln * ln / (lx * lx)


def regularizer_bound(x, phi, local_jacobian=False, jac_bound=None, hess_bound=None):
    """Regularizer curvature bound at ``x``; returns ``(mu2, varrho, alpha, beta)``.

    ``varrho`` defaults to the global layer-norm product; with
    ``local_jacobian`` it is the largest per-column Jacobian norm at ``x``.
    """
    cols = np.asarray(x, dtype=np.float64).reshape(phi.dim, -1)
    dim = cols.size
    xn = float(np.linalg.norm(cols))
    if xn < 1e-12:
        raise CurvatureUnavailableError("estimate norm too small for bound")
    beta = float(np.linalg.norm(phinet.phi_forward(cols, phi)))
    if beta < BETA_FLOOR:
        raise CurvatureUnavailableError(
            f"representation norm {beta:.3e} below floor {BETA_FLOOR:g}"
        )
    if local_jacobian:
        varrho = max(
            linalg.spectral_norm(phinet.phi_jacobian(cols[:, j], phi))
            for j in range(cols.shape[1])
        )
    else:
        varrho = jac_bound if jac_bound is not None else network_jacobian_bound(phi)
    alpha = hess_bound if hess_bound is not None else network_hessian_bound(phi)
    mu2 = (
        (5.0 * varrho + 1.0) / (beta * xn)
        + 2.0 * alpha * np.sqrt(dim) / beta
        + 4.0 * (varrho / beta + 1.0 / xn) ** 2
    )
    return float(mu2), float(varrho), float(alpha), beta


def curvature_bounds(x, inst, phi, spec, leadfield_norm=None, local_jacobian=False,
                     jac_bound=None, hess_bound=None):
    """Both curvature constants of the lower objective at ``x``."""
    mu1 = fidelity_bound(inst.L, x, leadfield_norm=leadfield_norm)
    mu2, varrho, alpha, beta = regularizer_bound(
        x, phi, local_jacobian=local_jacobian, jac_bound=jac_bound, hess_bound=hess_bound
    )
    dim = int(np.asarray(x).size)
    return CurvatureBounds(mu1=mu1, mu2=mu2, varrho=varrho, alpha=alpha, beta=beta, dim=dim)


def estimate_lambda_max(hvp_fn, shape, iters=20, seed=0, tol=1e-6):
    """Dominant Hessian eigenvalue by power iteration on Hessian-vector products.

    Starts from a seeded unit Gaussian direction, iterates
    ``v <- H v / ||H v||`` up to ``iters`` times with early stopping when the
    Rayleigh residual drops below ``tol * |lambda|``, and reports the final
    Rayleigh quotient ``v^T H v``.
    """
    if iters < 1:
        raise InvalidInputError(f"iters must be >= 1, got {iters}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    resid = np.inf
    used = 0
    converged = False
    for k in range(iters):
        u = hvp_fn(v)
        if not np.all(np.isfinite(u)):
            raise NumericError("non-finite Hessian-vector product")
        lam = float(np.multiply(v, u).sum())
        resid = float(np.linalg.norm(u - lam * v))
        used = k + 1
        un = float(np.linalg.norm(u))
        if un < 1e-300:
            # Flat direction: the Hessian annihilates v.
            return SpectralEstimate(0.0, v, used, 0.0, True)
        v = u / un
        if resid <= tol * abs(lam):
            converged = True
            break
    u = hvp_fn(v)
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite Hessian-vector product")
    lam = float(np.multiply(v, u).sum())
    resid = float(np.linalg.norm(u - lam * v))
    return SpectralEstimate(lam, v, used, resid, converged or resid <= tol * abs(lam))


def objective_hessian_operator(inst, phi, spec):
    """Hessian-vector-product operator of the lower objective at a bindable point.

    Returns ``(apply, shape)`` where ``apply(x, v)`` evaluates the product at
    the matrix-shaped point ``x``.
    """
    if spec.columnwise:
        raise ConfigError("curvature operators support the flattened objective only")
    n, s = inst.L.shape
    t = inst.Y.shape[1] if inst.Y.ndim == 2 else 1
    x_e = ad.var("x", (s, t))
    params = phinet.phi_param_vars(s, *phi.hidden)
    u_e, _, _ = losses.lower_objective_graph(
        x_e, ad.const(inst.Y.reshape(n, t)), ad.const(inst.L),
        params, spec.lam, phi.eps,
    )
    op = ad.HessianOperator(u_e, x_e)
    base = phinet.phi_param_arrays(phi)

    def apply(x, v):
        b = dict(base)
        b["x"] = np.asarray(x, dtype=np.float64).reshape(s, t)
        return op.apply(b, np.asarray(v, dtype=np.float64).reshape(s, t))

    return apply, (s, t)


def valid_interval(x, inst, phi, spec, nu_lo=1e-10, method="analytic",
                   leadfield_norm=None, jac_bound=None, hess_bound=None,
                   hvp_apply=None, iters=20, seed=0,
                   safety=DEFAULT_SAFETY, lambda_floor=DEFAULT_LAMBDA_FLOOR):
    """Valid reciprocal-curvature interval at ``x``.

    ``method`` selects the analytic bound ``1 / (mu1 + lam * mu2)`` or the
    spectral route ``1 / (safety * max(lambda_hat, lambda_floor))``. If the
    requested ``nu_lo`` exceeds the computed upper end, it is lowered to it
    and the interval is flagged.
    """
    if not nu_lo > 0:
        raise InvalidInputError(f"nu_lo must be positive, got {nu_lo}")
    if spec.columnwise:
        raise ConfigError("majorant intervals support the flattened objective only")
    if method == "analytic":
        b = curvature_bounds(
            x, inst, phi, spec, leadfield_norm=leadfield_norm,
            jac_bound=jac_bound, hess_bound=hess_bound,
        )
        denom = b.mu1 + spec.lam * b.mu2
        if not np.isfinite(denom) or denom <= 0:
            raise CurvatureUnavailableError(f"invalid curvature sum {denom}")
        nu_hi = 1.0 / denom
    elif method == "spectral":
        cols = np.asarray(x, dtype=np.float64).reshape(inst.L.shape[1], -1)
        if hvp_apply is None:
            apply, _ = objective_hessian_operator(inst, phi, spec)
            hvp_fn = lambda v: apply(cols, v)
        else:
            hvp_fn = lambda v: np.asarray(hvp_apply(v))
        est = estimate_lambda_max(hvp_fn, cols.shape, iters=iters, seed=seed)
        nu_hi = 1.0 / (safety * max(est.lambda_hat, lambda_floor))
    else:
        raise InvalidInputError(f"unknown interval method {method!r}")
    if not np.isfinite(nu_hi) or nu_hi <= 0:
        raise CurvatureUnavailableError(f"invalid interval upper end {nu_hi}")
    lowered = nu_hi < nu_lo
    return CurvatureInterval(
        nu_lo=min(nu_lo, nu_hi), nu_hi=nu_hi, source=method, lowered_lo=lowered
    )
