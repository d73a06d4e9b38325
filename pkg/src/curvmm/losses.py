"""Lower- and upper-level objectives built on cosine similarity.

The lower objective compares measurements against the forward-projected
estimate and the estimate against its own network representation:

``u(x) = [1 - cos(y, L x)] + lam * [1 - cos(x, phi(x))]``

The upper (training) loss compares a reconstruction against ground truth
plus the representation consistency of the ground truth itself. Matrix
arguments are compared as flattened vectors by default; since every
contraction is a full inner product, the flattening order does not affect
any value. ``ObjectiveSpec(columnwise=True)`` switches both cosine terms
to a mean over per-time-column cosines instead. The analytic curvature
constants are derived for the flattened form only, so the solver rejects
columnwise specs everywhere a majorant interval is needed.

Domain guards reject points instead of silently projecting them; the
solver owns projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import phinet
from .exceptions import DomainError, InvalidInputError, ShapeError

__all__ = [
    "DomainConstraints",
    "ObjectiveSpec",
    "cos_sim",
    "cos_sim_grad",
    "cos_sim_hessian",
    "check_instance_domain",
    "lower_objective",
    "lower_objective_parts",
    "lower_gradient",
    "upper_loss",
    "cos_sim_graph",
    "lower_objective_graph",
    "upper_loss_graph",
]

_ZERO_NORM = 1e-12
_HESSIAN_DIM_CAP = 32


@dataclass(frozen=True)
class DomainConstraints:
    """Admissible-set parameters.

    ``upsilon``: minimum estimate norm; ``delta_lo``/``delta_hi``: per-column
    measurement energy band; ``lx_floor``: minimum forward-projection norm.
    """

    upsilon: float = 1e-8
    delta_lo: float = 1e-6
    delta_hi: float = 1e6
    lx_floor: float = 1e-10

    def __post_init__(self):
        if not 0 < self.upsilon:
            raise InvalidInputError(f"upsilon must be positive, got {self.upsilon}")
        if not 0 < self.delta_lo <= self.delta_hi:
            raise InvalidInputError(
                f"need 0 < delta_lo <= delta_hi, got [{self.delta_lo}, {self.delta_hi}]"
            )
        if not 0 < self.lx_floor:
            raise InvalidInputError(f"lx_floor must be positive, got {self.lx_floor}")


@dataclass(frozen=True)
class ObjectiveSpec:
    """Objective hyperparameters: regularization weight and domain.

    ``columnwise`` averages the cosine terms over time columns instead of
    comparing flattened matrices.
    """

    lam: float = 1.0
    constraints: DomainConstraints = field(default_factory=DomainConstraints)
    columnwise: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise InvalidInputError(f"lam must be nonnegative, got {self.lam}")


def cos_sim(a, b):
    """Cosine similarity of two same-shape arrays, compared flattened."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cos_sim shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        raise DomainError("zero-norm operand in cosine similarity")
    c = float(a @ b) / (na * nb)
    # Clamp rounding overshoot only; anything beyond 1e-12 is a real bug.
    if 1.0 < abs(c) <= 1.0 + 1e-12:
        c = 1.0 if c > 0 else -1.0
    return c


def cos_sim_grad(a, b):
    """Gradient of ``cos_sim(a, b)`` with respect to ``a`` (flattened)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cos_sim_grad shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        raise DomainError("zero-norm operand in cosine similarity")
    c = float(a @ b) / (na * nb)
    return b / (na * nb) - c * a / (na * na)


def cos_sim_hessian(a, b):
    """Dense Hessian of ``cos_sim(a, b)`` w.r.t. ``a``; dims capped at 32."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cos_sim_hessian shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] > _HESSIAN_DIM_CAP:
        raise ShapeError(f"dense cosine Hessian capped at dim {_HESSIAN_DIM_CAP}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        raise DomainError("zero-norm operand in cosine similarity")
    bh = b / nb
    c = float(a @ bh) / na
    eye = np.eye(a.shape[0])
    return (
        -(np.outer(bh, a) + np.outer(a, bh)) / na**3
        - c * eye / na**2
        + 3.0 * c * np.outer(a, a) / na**4
    )


def _as_cols(x, s, t):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != s * t:
            raise ShapeError(f"flat estimate length {x.shape[0]} != {s}*{t}")
        return x.reshape(s, t)
    if x.shape != (s, t):
        raise ShapeError(f"estimate shape {x.shape} != ({s}, {t})")
    return x


def check_instance_domain(inst, constraints):
    """Check the measurement energy band; raises ``DomainError`` on violation."""
    col_norms = np.linalg.norm(np.atleast_2d(inst.Y.T).T, axis=0)
    if np.any(col_norms < constraints.delta_lo) or np.any(col_norms > constraints.delta_hi):
        raise DomainError(
            f"measurement column energy outside [{constraints.delta_lo}, "
            f"{constraints.delta_hi}]",
            constraint="y_energy",
        )


def _guarded_parts(x, inst, phi, spec):
    cons = spec.constraints
    s = inst.L.shape[1]
    t = inst.Y.shape[1] if inst.Y.ndim == 2 else 1
    cols = _as_cols(x, s, t)
    if not np.all(np.isfinite(cols)):
        raise InvalidInputError("estimate contains non-finite entries")
    check_instance_domain(inst, cons)
    if np.linalg.norm(cols) < cons.upsilon:
        raise DomainError(
            f"estimate norm below upsilon={cons.upsilon}", constraint="x_norm"
        )
    z = inst.L @ cols
    if np.linalg.norm(z) < cons.lx_floor:
        raise DomainError(
            f"forward projection norm below lx_floor={cons.lx_floor}",
            constraint="lx_floor",
        )
    p = phinet.phi_forward(cols, phi)
    if np.linalg.norm(p) < _ZERO_NORM:
        raise DomainError("representation output has zero norm", constraint="phi_norm")
    return cols, z, p


def lower_objective_parts(x, inst, phi, spec):
    """Return ``(total, fidelity, regularizer)`` of the lower objective."""
    cols, z, p = _guarded_parts(x, inst, phi, spec)
    if spec.columnwise:
        t = cols.shape[1]
        fid = sum(1.0 - cos_sim(inst.Y[:, j], z[:, j]) for j in range(t)) / t
        reg = sum(1.0 - cos_sim(cols[:, j], p[:, j]) for j in range(t)) / t
    else:
        fid = 1.0 - cos_sim(inst.Y, z)
        reg = 1.0 - cos_sim(cols, p)
    return fid + spec.lam * reg, fid, reg


def lower_objective(x, inst, phi, spec):
    """Lower-level objective value at ``x`` (flat ``(s*t,)`` or ``(s, t)``)."""
    return lower_objective_parts(x, inst, phi, spec)[0]


def lower_gradient(x, inst, phi, spec):
    """Gradient of the lower objective, in the same layout as ``x``."""
    x_in = np.asarray(x, dtype=np.float64)
    cols, z, p = _guarded_parts(x, inst, phi, spec)
    s, t = cols.shape
    if spec.columnwise:
        grad_fid = np.empty((s, t))
        gx_direct = np.empty((s, t))
        gp = np.empty((s, t))
        for j in range(t):
            grad_fid[:, j] = -(inst.L.T @ cos_sim_grad(z[:, j], inst.Y[:, j])) / t
            gx_direct[:, j] = cos_sim_grad(cols[:, j], p[:, j]) / t
            gp[:, j] = cos_sim_grad(p[:, j], cols[:, j]) / t
    else:
        gz = cos_sim_grad(z, inst.Y).reshape(z.shape)
        grad_fid = -(inst.L.T @ gz)
        gx_direct = cos_sim_grad(cols, p).reshape(s, t)
        gp = cos_sim_grad(p, cols).reshape(s, t)
    grad_reg = np.empty((s, t))
    for j in range(t):
        jac = phinet.phi_jacobian(cols[:, j], phi)
        grad_reg[:, j] = gx_direct[:, j] + jac.T @ gp[:, j]
    grad = grad_fid - spec.lam * grad_reg
    return grad.ravel() if x_in.ndim == 1 else grad


def upper_loss(x_true, x_est, phi, columnwise=False):
    """Training loss: reconstruction plus representation consistency.

    ``[1 - cos(x_true, x_est)] + [1 - cos(x_true, phi(x_true))]``
    """
    x_true = np.asarray(x_true, dtype=np.float64)
    x_est = np.asarray(x_est, dtype=np.float64)
    if x_true.shape != x_est.shape:
        raise ShapeError(f"shape mismatch: {x_true.shape} vs {x_est.shape}")
    rep = phinet.phi_forward(x_true, phi)
    if columnwise and x_true.ndim == 2:
        t = x_true.shape[1]
        rec = sum(1.0 - cos_sim(x_true[:, j], x_est[:, j]) for j in range(t)) / t
        con = sum(1.0 - cos_sim(x_true[:, j], rep[:, j]) for j in range(t)) / t
        return rec + con
    return (1.0 - cos_sim(x_true, x_est)) + (1.0 - cos_sim(x_true, rep))


# ---------------------------------------------------------------------------
# expression-graph builders


def cos_sim_graph(a_e, b_e):
    return ad.div(ad.dot(a_e, b_e), ad.mul(ad.norm2(a_e), ad.norm2(b_e)))


def _one_minus(e):
    return ad.sub(ad.const(1.0), e)


def lower_objective_graph(x_e, y_e, l_e, phi_params, lam, eps, prefix="phi."):
    """Lower objective as an expression over a matrix estimate ``x_e``."""
    z = ad.matvec(l_e, x_e)
    fid = _one_minus(cos_sim_graph(y_e, z))
    rep = phinet.phi_graph(x_e, phi_params, eps, prefix=prefix)
    reg = _one_minus(cos_sim_graph(x_e, rep))
    return ad.add(fid, ad.scale(reg, float(lam))), fid, reg


def upper_loss_graph(xt_e, xe_e, phi_params, eps, prefix="phi."):
    """Upper loss as an expression; ``xt_e``/``xe_e`` are matrix expressions."""
    rep = phinet.phi_graph(xt_e, phi_params, eps, prefix=prefix)
    return ad.add(
        _one_minus(cos_sim_graph(xt_e, xe_e)),
        _one_minus(cos_sim_graph(xt_e, rep)),
    )
