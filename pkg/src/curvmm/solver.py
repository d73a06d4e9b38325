"""Iterative solver built on diagonal quadratic majorants.

Each iteration moves against the gradient with a per-coordinate step
vector ``p`` drawn from a valid reciprocal-curvature interval:
``x <- x - gamma * p * g``. The interval comes from analytic bounds, a
spectral estimate, or (in learned mode) a recurrent predictor whose
proposal is clipped into the interval. A gradient-descent baseline with a
fixed uniform step is included for comparisons.

The solver owns domain projection: after each step the iterate is
radially rescaled up to the minimum-norm sphere if it fell inside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import curvature, linalg, losses, predictor as pred_mod
from .exceptions import (
    ConfigError,
    DomainError,
    InvalidInputError,
    NumericError,
    ShapeError,
)

__all__ = [
    "SolverConfig",
    "SolverTrace",
    "calibrate_amplitude",
    "mm_step",
    "solve_lower",
    "MAJORANT_MODES",
]

MAJORANT_MODES = (
    "learned",
    "analytic-fixed",
    "spectral-fixed",
    "gradient-descent-baseline",
)

_REFRESH_MODES = ("per-iteration", "freeze")


@dataclass(frozen=True)
class SolverConfig:
    """Inner-loop settings.

    ``gamma`` is the relaxation factor in (0, 2); ``nu_lo`` the lower end
    of the step interval; ``gd_step`` the fixed step of the baseline (when
    None, the analytic interval upper end at the initial point is used);
    ``curvature_refresh`` recomputes the interval every iteration or
    freezes the one from the initial point. ``keep_states``/``keep_p``
    retain the full iterate and step-vector history on the trace.
    """

    inner_iters: int = 10
    gamma: float = 1.0
    init_scale: float = 1e-3
    majorant_mode: str = "learned"
    seed: int = 0
    nu_lo: float = 1e-10
    gd_step: float | None = None
    curvature_refresh: str = "per-iteration"
    spectral_iters: int = 20
    spectral_seed: int = 0
    keep_states: bool = True
    keep_p: bool = True
    descent_tol: float = 1e-10

    def __post_init__(self):
        if self.inner_iters < 1:
            raise ConfigError(f"inner_iters must be >= 1, got {self.inner_iters}")
        if not 0.0 < self.gamma < 2.0:
            raise ConfigError(f"gamma must lie in (0, 2), got {self.gamma}")
        if not self.init_scale > 0:
            raise ConfigError(f"init_scale must be positive, got {self.init_scale}")
        if self.majorant_mode not in MAJORANT_MODES:
            raise ConfigError(
                f"majorant_mode must be one of {MAJORANT_MODES}, got {self.majorant_mode!r}"
            )
        if self.curvature_refresh not in _REFRESH_MODES:
            raise ConfigError(
                f"curvature_refresh must be one of {_REFRESH_MODES}, "
                f"got {self.curvature_refresh!r}"
            )
        if not self.nu_lo > 0:
            raise ConfigError(f"nu_lo must be positive, got {self.nu_lo}")
        if self.seed < 0 or self.spectral_seed < 0:
            raise ConfigError("seeds must be non-negative")
        if self.gd_step is not None and not self.gd_step > 0:
            raise ConfigError(f"gd_step must be positive, got {self.gd_step}")


@dataclass
class SolverTrace:
    """Per-iteration record of one solve.

    ``states`` holds x^0 .. x^I (when kept); ``objectives``, ``fidelity``
    and ``regularizer`` have ``inner_iters + 1`` entries; the remaining
    lists have one entry per iteration.
    """

    mode: str
    states: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    fidelity: list = field(default_factory=list)
    regularizer: list = field(default_factory=list)
    gradient_norms: list = field(default_factory=list)
    nu_los: list = field(default_factory=list)
    nu_his: list = field(default_factory=list)
    p_vectors: list = field(default_factory=list)
    p_min: list = field(default_factory=list)
    p_max: list = field(default_factory=list)
    descent_violations: int = 0
    lowered_lo_events: int = 0
    x_init: np.ndarray | None = None
    x_final: np.ndarray | None = None

    def to_dict(self):
        """JSON-ready view (arrays reduced to scalars)."""
        return {
            "mode": self.mode,
            "iterations": len(self.gradient_norms),
            "objectives": self.objectives,
            "fidelity": self.fidelity,
            "regularizer": self.regularizer,
            "gradient_norms": self.gradient_norms,
            "nu_los": self.nu_los,
            "nu_his": self.nu_his,
            "p_min": self.p_min,
            "p_max": self.p_max,
            "descent_violations": self.descent_violations,
            "lowered_lo_events": self.lowered_lo_events,
        }


def mm_step(x, g, p, gamma, upsilon=0.0):
    """One majorant step ``x - gamma * p * g`` with radial domain projection.

    ``p`` must be strictly positive and match ``x``; ``upsilon`` is the
    minimum-norm radius (0 disables projection).
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if x.shape != g.shape or x.shape != p.shape:
        raise ShapeError(f"mm_step shapes differ: {x.shape}, {g.shape}, {p.shape}")
    if not 0.0 < gamma < 2.0:
        raise InvalidInputError(f"gamma must lie in (0, 2), got {gamma}")
    if np.any(p <= 0.0) or not np.all(np.isfinite(p)):
        raise InvalidInputError("step vector must be strictly positive and finite")
    x_new = x - gamma * (p * g)
    if not np.all(np.isfinite(x_new)):
        raise NumericError("non-finite iterate after step")
    if upsilon > 0.0:
        n = float(np.linalg.norm(x_new))
        if n < 1e-12:
            raise NumericError("iterate collapsed to numerically zero norm")
        # Multiply even when inactive so this matches the graph replay exactly.
        x_new = x_new * max(1.0, upsilon / n)
    return x_new


def calibrate_amplitude(inst, x):
    """Rescale a direction-only estimate to best explain the measurements.

    The cosine objectives fix only the direction of the iterate, so the
    amplitude is recovered separately as the closed-form minimizer of
    ``||Y - c * L x||_F`` over the scalar ``c``. Uses measurements only,
    never ground truth.
    """
    x = np.asarray(x, dtype=np.float64)
    z = inst.L @ x
    denom = float(np.sum(z * z))
    if denom < 1e-300:
        raise NumericError("cannot calibrate a zero forward projection")
    c = float(np.sum(inst.Y * z)) / denom
    return c * x


def solve_lower(inst, phi, pred, cfg, spec, seed=None, x0=None,
                leadfield_norm=None, jac_bound=None, hess_bound=None):
    """Run the inner loop on one instance; returns a :class:`SolverTrace`.

    ``pred`` is required in learned mode (its recurrent state starts from
    zero) and ignored otherwise. ``seed`` overrides ``cfg.seed`` for the
    random initial point (it may be a sequence of ints); ``x0`` skips the
    random draw entirely. The norm bounds can be passed in to avoid
    recomputing them across solves that share the leadfield or networks.
    """
    mode = cfg.majorant_mode
    if mode == "learned" and pred is None:
        raise ConfigError("learned mode requires a predictor")
    n, s = inst.L.shape
    t = inst.Y.shape[1] if inst.Y.ndim == 2 else 1
    if x0 is not None:
        x = np.array(x0, dtype=np.float64)
        if x.shape != (s, t):
            raise ShapeError(f"x0 has shape {x.shape}, expected ({s}, {t})")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("x0 contains non-finite entries")
    else:
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        x = cfg.init_scale * rng.standard_normal((s, t))

    # Precompute the network-global constants once per solve unless supplied.
    if leadfield_norm is None:
        leadfield_norm = linalg.spectral_norm(inst.L)
    if jac_bound is None:
        jac_bound = curvature.network_jacobian_bound(phi)
    if hess_bound is None:
        hess_bound = curvature.network_hessian_bound(phi)

    trace = SolverTrace(mode=mode)
    trace.x_init = x.copy()
    if cfg.keep_states:
        trace.states.append(x.copy())
    state = pred_mod.initial_state(pred.hidden, t) if mode == "learned" else None
    hvp_op = None
    interval = None
    gd_step = cfg.gd_step

    def parts_at(point, label):
        try:
            return losses.lower_objective_parts(point, inst, phi, spec)
        except DomainError as exc:
            raise DomainError(f"{label}: {exc}", constraint=exc.constraint) from exc

    total, fid, reg = parts_at(x, "initial point")
    trace.objectives.append(total)
    trace.fidelity.append(fid)
    trace.regularizer.append(reg)

    for i in range(cfg.inner_iters):
        try:
            g = losses.lower_gradient(x, inst, phi, spec)
        except DomainError as exc:
            raise DomainError(f"iteration {i}: {exc}", constraint=exc.constraint) from exc
        trace.gradient_norms.append(float(np.linalg.norm(g)))

        refresh = cfg.curvature_refresh == "per-iteration" or interval is None
        if mode in ("learned", "analytic-fixed"):
            if refresh:
                interval = curvature.valid_interval(
                    x, inst, phi, spec, nu_lo=cfg.nu_lo, method="analytic",
                    leadfield_norm=leadfield_norm, jac_bound=jac_bound,
                    hess_bound=hess_bound,
                )
        elif mode == "spectral-fixed":
            if refresh:
                if hvp_op is None:
                    hvp_op, _ = curvature.objective_hessian_operator(inst, phi, spec)
                x_here = x
                interval = curvature.valid_interval(
                    x, inst, phi, spec, nu_lo=cfg.nu_lo, method="spectral",
                    hvp_apply=lambda v: hvp_op(x_here, v),
                    iters=cfg.spectral_iters, seed=cfg.spectral_seed,
                )
        else:  # gradient-descent-baseline
            if gd_step is None:
                interval0 = curvature.valid_interval(
                    x, inst, phi, spec, nu_lo=cfg.nu_lo, method="analytic",
                    leadfield_norm=leadfield_norm, jac_bound=jac_bound,
                    hess_bound=hess_bound,
                )
                gd_step = interval0.nu_hi

        if mode == "learned":
            p_tilde, state = pred_mod.predict_p(x, g, state, pred)
            p = pred_mod.project_interval(p_tilde, interval)
        elif mode in ("analytic-fixed", "spectral-fixed"):
            p = np.full((s, t), interval.nu_hi)
        else:
            p = np.full((s, t), gd_step)

        if mode != "gradient-descent-baseline":
            trace.nu_los.append(interval.nu_lo)
            trace.nu_his.append(interval.nu_hi)
            trace.lowered_lo_events += int(interval.lowered_lo)
        else:
            trace.nu_los.append(gd_step)
            trace.nu_his.append(gd_step)
        trace.p_min.append(float(p.min()))
        trace.p_max.append(float(p.max()))
        if cfg.keep_p:
            trace.p_vectors.append(p.copy())

        x = mm_step(x, g, p, cfg.gamma, spec.constraints.upsilon)
        if cfg.keep_states:
            trace.states.append(x.copy())

        total, fid, reg = parts_at(x, f"iteration {i}")
        if total > trace.objectives[-1] + cfg.descent_tol:
            trace.descent_violations += 1
        trace.objectives.append(total)
        trace.fidelity.append(fid)
        trace.regularizer.append(reg)

    trace.x_final = x
    return trace
