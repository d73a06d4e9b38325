"""Recurrent step-size predictor.

Two gated cells produce a per-coordinate reciprocal-curvature proposal
from the current iterate and its gradient: the first cell reads the
gradient, the second reads the iterate together with the first cell's
output, and the proposal is the product of softplus-mapped heads,

``p_tilde = p_scale * softplus(F1(g)) * softplus(F2(x, F1(g)))``,

clipped afterwards into the valid curvature interval. Every map acts on
time columns independently with shared weights, so a trained predictor
accepts any number of time samples.

The numeric routines here mirror the expression-graph builders operation
for operation (tanh is ``2*logistic(2z) - 1`` in both), so a fast solve and
a graph evaluation produce bit-identical iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .exceptions import InvalidInputError, ShapeError

__all__ = [
    "CellParameters",
    "PredictorParameters",
    "PredictorState",
    "initial_state",
    "cell_step",
    "predict_p",
    "project_interval",
    "predictor_param_vars",
    "predictor_param_arrays",
    "predictor_from_arrays",
    "make_predictor",
    "cell_graph",
    "predictor_graph",
]

_GATES = ("i", "f", "o", "c")


def _tanh(z):
    # Same composition the graph builder uses; keeps both paths bit-identical.
    return 2.0 * expit(2.0 * z) - 1.0


@dataclass
class CellParameters:
    """One gated cell: input/state weights and bias per gate (i, f, o, c)."""

    wx_i: np.ndarray
    wh_i: np.ndarray
    b_i: np.ndarray
    wx_f: np.ndarray
    wh_f: np.ndarray
    b_f: np.ndarray
    wx_o: np.ndarray
    wh_o: np.ndarray
    b_o: np.ndarray
    wx_c: np.ndarray
    wh_c: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        h = self.wx_i.shape[0]
        for g in _GATES:
            wx = getattr(self, f"wx_{g}")
            wh = getattr(self, f"wh_{g}")
            b = getattr(self, f"b_{g}")
            if wx.shape != self.wx_i.shape:
                raise ShapeError(f"wx_{g} shape {wx.shape} != {self.wx_i.shape}")
            if wh.shape != (h, h):
                raise ShapeError(f"wh_{g} shape {wh.shape} != ({h}, {h})")
            if b.shape != (h,):
                raise ShapeError(f"b_{g} shape {b.shape} != ({h},)")

    @property
    def hidden(self):
        return self.wx_i.shape[0]


@dataclass
class PredictorParameters:
    """Both cells plus the affine encode/decode heads and the head scale."""

    enc1_w: np.ndarray
    enc1_b: np.ndarray
    cell1: CellParameters
    dec1_w: np.ndarray
    dec1_b: np.ndarray
    enc2x_w: np.ndarray
    enc2f_w: np.ndarray
    enc2_b: np.ndarray
    cell2: CellParameters
    dec2_w: np.ndarray
    dec2_b: np.ndarray
    p_scale: float = 1.0

    def __post_init__(self):
        for name in ("enc1_w", "enc1_b", "dec1_w", "dec1_b", "enc2x_w",
                     "enc2f_w", "enc2_b", "dec2_w", "dec2_b"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, s = self.enc1_w.shape
        checks = {
            "enc1_b": (h,), "dec1_w": (s, h), "dec1_b": (s,),
            "enc2x_w": (h, s), "enc2f_w": (h, s), "enc2_b": (h,),
            "dec2_w": (s, h), "dec2_b": (s,),
        }
        for name, shape in checks.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} shape {getattr(self, name).shape} != {shape}")
        if self.cell1.hidden != h or self.cell2.hidden != h:
            raise ShapeError("cell hidden size differs from encoder output size")
        if not self.p_scale > 0:
            raise InvalidInputError(f"p_scale must be positive, got {self.p_scale}")

    @property
    def dim(self):
        return self.enc1_w.shape[1]

    @property
    def hidden(self):
        return self.enc1_w.shape[0]


@dataclass
class PredictorState:
    """Hidden and cell states of both cells, one column per time sample."""

    h1: np.ndarray
    c1: np.ndarray
    h2: np.ndarray
    c2: np.ndarray


def initial_state(hidden, t):
    """All-zero state; the solver resets to this at the start of a solve."""
    z = lambda: np.zeros((hidden, t))
    return PredictorState(z(), z(), z(), z())


def cell_step(cell, inp, h, c):
    """One gated update over columns: returns the new ``(h, c)``.

    Gates are logistic, the candidate is tanh; with gates saturated open
    this reduces to ``c' = c + tanh(candidate)``, ``h' = tanh(c')``.
    """
    # Association order mirrors the graph builder so both paths agree exactly.
    pre = lambda wx, b, wh: (wx @ inp + b[:, None]) + wh @ h
    i = expit(pre(cell.wx_i, cell.b_i, cell.wh_i))
    f = expit(pre(cell.wx_f, cell.b_f, cell.wh_f))
    o = expit(pre(cell.wx_o, cell.b_o, cell.wh_o))
    cand = _tanh(pre(cell.wx_c, cell.b_c, cell.wh_c))
    c_new = f * c + i * cand
    h_new = o * _tanh(c_new)
    return h_new, c_new


def predict_p(x, g, state, params):
    """Step-size proposal at ``(x, g)``; returns ``(p_tilde, new_state)``.

    ``x`` and ``g`` are ``(s, t)`` matrices; the proposal is elementwise
    positive and still needs interval projection.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape or x.ndim != 2 or x.shape[0] != params.dim:
        raise ShapeError(f"expected matching ({params.dim}, t) inputs, got {x.shape}, {g.shape}")
    f1_in = params.enc1_w @ g + params.enc1_b[:, None]
    h1, c1 = cell_step(params.cell1, f1_in, state.h1, state.c1)
    f1_raw = params.dec1_w @ h1 + params.dec1_b[:, None]
    f2_in = params.enc2x_w @ x + (params.enc2f_w @ f1_raw + params.enc2_b[:, None])
    h2, c2 = cell_step(params.cell2, f2_in, state.h2, state.c2)
    f2_raw = params.dec2_w @ h2 + params.dec2_b[:, None]
    p_tilde = np.logaddexp(0.0, f1_raw) * np.logaddexp(0.0, f2_raw) * params.p_scale
    return p_tilde, PredictorState(h1, c1, h2, c2)


def project_interval(p_tilde, interval):
    """Clip a proposal into the valid box ``[nu_lo, nu_hi]``."""
    return np.clip(np.asarray(p_tilde, dtype=np.float64), interval.nu_lo, interval.nu_hi)


# ---------------------------------------------------------------------------
# parameter plumbing

_CELL_FIELDS = [f"{kind}_{g}" for g in _GATES for kind in ("wx", "wh", "b")]
_HEAD_FIELDS = ("enc1_w", "enc1_b", "dec1_w", "dec1_b", "enc2x_w", "enc2f_w",
                "enc2_b", "dec2_w", "dec2_b")


def predictor_param_names(prefix="pred."):
    names = []
    for name in ("enc1_w", "enc1_b"):
        names.append(prefix + name)
    names += [prefix + "cell1." + f for f in _CELL_FIELDS]
    names += [prefix + "dec1_w", prefix + "dec1_b", prefix + "enc2x_w",
              prefix + "enc2f_w", prefix + "enc2_b"]
    names += [prefix + "cell2." + f for f in _CELL_FIELDS]
    names += [prefix + "dec2_w", prefix + "dec2_b"]
    return names


def _param_shapes(s, hidden):
    shapes = {}
    cell = {}
    for g in _GATES:
        cell[f"wx_{g}"] = (hidden, hidden)
        cell[f"wh_{g}"] = (hidden, hidden)
        cell[f"b_{g}"] = (hidden,)
    shapes["enc1_w"] = (hidden, s)
    shapes["enc1_b"] = (hidden,)
    for k, v in cell.items():
        shapes["cell1." + k] = v
    shapes["dec1_w"] = (s, hidden)
    shapes["dec1_b"] = (s,)
    shapes["enc2x_w"] = (hidden, s)
    shapes["enc2f_w"] = (hidden, s)
    shapes["enc2_b"] = (hidden,)
    for k, v in cell.items():
        shapes["cell2." + k] = v
    shapes["dec2_w"] = (s, hidden)
    shapes["dec2_b"] = (s,)
    return shapes


def predictor_param_vars(s, hidden, prefix="pred."):
    """Variable nodes for every parameter tensor, keyed by name."""
    return {
        prefix + k: ad.var(prefix + k, shape)
        for k, shape in _param_shapes(s, hidden).items()
    }


def predictor_param_arrays(params, prefix="pred."):
    """Binding dict matching :func:`predictor_param_vars`."""
    out = {}
    for name in ("enc1_w", "enc1_b"):
        out[prefix + name] = getattr(params, name)
    for f in _CELL_FIELDS:
        out[prefix + "cell1." + f] = getattr(params.cell1, f)
    for name in ("dec1_w", "dec1_b", "enc2x_w", "enc2f_w", "enc2_b"):
        out[prefix + name] = getattr(params, name)
    for f in _CELL_FIELDS:
        out[prefix + "cell2." + f] = getattr(params.cell2, f)
    for name in ("dec2_w", "dec2_b"):
        out[prefix + name] = getattr(params, name)
    return out


def predictor_from_arrays(arrays, p_scale=1.0, prefix="pred."):
    cell1 = CellParameters(**{f: arrays[prefix + "cell1." + f] for f in _CELL_FIELDS})
    cell2 = CellParameters(**{f: arrays[prefix + "cell2." + f] for f in _CELL_FIELDS})
    return PredictorParameters(
        enc1_w=arrays[prefix + "enc1_w"], enc1_b=arrays[prefix + "enc1_b"],
        cell1=cell1,
        dec1_w=arrays[prefix + "dec1_w"], dec1_b=arrays[prefix + "dec1_b"],
        enc2x_w=arrays[prefix + "enc2x_w"], enc2f_w=arrays[prefix + "enc2f_w"],
        enc2_b=arrays[prefix + "enc2_b"],
        cell2=cell2,
        dec2_w=arrays[prefix + "dec2_w"], dec2_b=arrays[prefix + "dec2_b"],
        p_scale=p_scale,
    )


def make_predictor(s, hidden=32, seed=0, weight_scale=None, p_scale=1.0):
    """Random predictor with zero biases."""
    rng = np.random.default_rng(seed)
    shapes = _param_shapes(s, hidden)
    arrays = {}
    for k, shape in shapes.items():
        if len(shape) == 1:
            arrays["pred." + k] = np.zeros(shape)
        else:
            scale = weight_scale if weight_scale is not None else 1.0 / np.sqrt(shape[1])
            arrays["pred." + k] = scale * rng.standard_normal(shape)
    return predictor_from_arrays(arrays, p_scale=p_scale)


# ---------------------------------------------------------------------------
# expression-graph construction


def _affine(w_e, x_e, b_e, t):
    return ad.add(ad.matvec(w_e, x_e), ad.outer(b_e, ad.const(np.ones(t))))


def cell_graph(cp, inp_e, h_e, c_e, t):
    """Graph version of :func:`cell_step`; ``cp`` maps field name -> expression."""

    def gate(g):
        pre = ad.add(_affine(cp[f"wx_{g}"], inp_e, cp[f"b_{g}"], t),
                     ad.matvec(cp[f"wh_{g}"], h_e))
        return pre

    i = ad.logistic(gate("i"))
    f = ad.logistic(gate("f"))
    o = ad.logistic(gate("o"))
    cand = ad.tanh(gate("c"))
    c_new = ad.add(ad.mul(f, c_e), ad.mul(i, cand))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def predictor_graph(x_e, g_e, state_es, params, p_scale, prefix="pred."):
    """Graph version of :func:`predict_p`.

    ``state_es`` is a dict with expressions for h1, c1, h2, c2; returns
    ``(p_tilde_e, new_state_es)``.
    """
    t = x_e.shape[1]
    cp1 = {f: params[prefix + "cell1." + f] for f in _CELL_FIELDS}
    cp2 = {f: params[prefix + "cell2." + f] for f in _CELL_FIELDS}
    f1_in = _affine(params[prefix + "enc1_w"], g_e, params[prefix + "enc1_b"], t)
    h1, c1 = cell_graph(cp1, f1_in, state_es["h1"], state_es["c1"], t)
    f1_raw = _affine(params[prefix + "dec1_w"], h1, params[prefix + "dec1_b"], t)
    f2_in = ad.add(
        ad.matvec(params[prefix + "enc2x_w"], x_e),
        _affine(params[prefix + "enc2f_w"], f1_raw, params[prefix + "enc2_b"], t),
    )
    h2, c2 = cell_graph(cp2, f2_in, state_es["h2"], state_es["c2"], t)
    f2_raw = _affine(params[prefix + "dec2_w"], h2, params[prefix + "dec2_b"], t)
    p_tilde = ad.scale(
        ad.mul(ad.softplus(f1_raw), ad.softplus(f2_raw)), float(p_scale)
    )
    return p_tilde, {"h1": h1, "c1": c1, "h2": h2, "c2": c2}
