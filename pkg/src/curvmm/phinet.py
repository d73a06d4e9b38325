"""Three-layer smooth-ReLU network used as a learned representation.

The network maps source vectors to source vectors, column by column:
``phi(x) = W3 sr(W2 sr(W1 x + b1) + b2) + b3`` with the smooth ramp
``sr(z) = 0.5 * (z + sqrt(z^2 + eps^2))``. Because ``sr`` has closed-form
first and second derivatives, the Jacobian and the per-component Hessians
have exact expressions that the curvature bounds build on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import InvalidInputError, ShapeError

__all__ = [
    "PhiParameters",
    "soft_relu",
    "soft_relu_d",
    "soft_relu_dd",
    "phi_forward",
    "phi_jacobian",
    "phi_component_hessians",
    "phi_graph",
    "phi_param_vars",
    "phi_param_arrays",
    "phi_from_arrays",
    "phi_param_gradient",
    "make_phi",
    "identity_phi",
    "toeplitz_band",
]

PARAM_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")


def soft_relu(z, eps=0.1):
    """Smooth ramp ``0.5 * (z + sqrt(z^2 + eps^2))``."""
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (z + np.sqrt(z * z + eps * eps))


def soft_relu_d(z, eps=0.1):
    """First derivative of :func:`soft_relu`; takes values in (0, 1)."""
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + z / np.sqrt(z * z + eps * eps))


def soft_relu_dd(z, eps=0.1):
    """Second derivative of :func:`soft_relu`; bounded by ``1 / (2 eps)``."""
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * eps * eps / np.power(z * z + eps * eps, 1.5)


@dataclass
class PhiParameters:
    """Weights of the three-layer network plus the smoothing width."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    eps: float = 0.1

    def __post_init__(self):
        for name in PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h1, s = self.w1.shape
        if self.b1.shape != (h1,):
            raise ShapeError(f"b1 shape {self.b1.shape} != ({h1},)")
        h2 = self.w2.shape[0]
        if self.w2.shape != (h2, h1):
            raise ShapeError(f"w2 shape {self.w2.shape} incompatible with w1 {self.w1.shape}")
        if self.b2.shape != (h2,):
            raise ShapeError(f"b2 shape {self.b2.shape} != ({h2},)")
        if self.w3.shape != (s, h2):
            raise ShapeError(f"w3 shape {self.w3.shape} != ({s}, {h2})")
        if self.b3.shape != (s,):
            raise ShapeError(f"b3 shape {self.b3.shape} != ({s},)")
        if not self.eps > 0:
            raise InvalidInputError(f"eps must be positive, got {self.eps}")
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"{name} contains non-finite entries")

    @property
    def dim(self):
        return self.w1.shape[1]

    @property
    def hidden(self):
        return (self.w1.shape[0], self.w2.shape[0])


def phi_forward(x, phi):
    """Apply the network to a vector ``(s,)`` or column-wise to ``(s, t)``."""
    x = np.asarray(x, dtype=np.float64)
    vec = x.ndim == 1
    cols = x[:, None] if vec else x
    if cols.shape[0] != phi.dim:
        raise ShapeError(f"input dim {cols.shape[0]} != network dim {phi.dim}")
    a1 = soft_relu(phi.w1 @ cols + phi.b1[:, None], phi.eps)
    a2 = soft_relu(phi.w2 @ a1 + phi.b2[:, None], phi.eps)
    out = phi.w3 @ a2 + phi.b3[:, None]
    return out[:, 0] if vec else out


def phi_jacobian(x, phi):
    """Exact Jacobian at a single column ``x`` of shape ``(s,)``.

    ``J = W3 D2 W2 D1 W1`` with ``D`` the diagonal ramp slopes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != phi.dim:
        raise ShapeError(f"x must have shape ({phi.dim},), got {x.shape}")
    z1 = phi.w1 @ x + phi.b1
    z2 = phi.w2 @ soft_relu(z1, phi.eps) + phi.b2
    d1 = soft_relu_d(z1, phi.eps)
    d2 = soft_relu_d(z2, phi.eps)
    return (phi.w3 * d2) @ (phi.w2 * d1) @ phi.w1


def phi_component_hessians(x, phi):
    """Exact Hessians of every output component at ``x``; shape ``(s, s, s)``.

    For output ``i``:
    ``H_i = G diag(w3_i * sr''(z2)) G^T + W1^T diag(c_i * sr''(z1)) W1``
    where ``G = W1^T D1 W2^T`` and ``c_i = W2^T (w3_i * sr'(z2))``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != phi.dim:
        raise ShapeError(f"x must have shape ({phi.dim},), got {x.shape}")
    z1 = phi.w1 @ x + phi.b1
    a1 = soft_relu(z1, phi.eps)
    z2 = phi.w2 @ a1 + phi.b2
    d1 = soft_relu_d(z1, phi.eps)
    dd1 = soft_relu_dd(z1, phi.eps)
    d2 = soft_relu_d(z2, phi.eps)
    dd2 = soft_relu_dd(z2, phi.eps)
    g = phi.w1.T @ (d1[:, None] * phi.w2.T)  # columns are grad z2_j
    s = phi.dim
    out = np.empty((s, s, s))
    for i in range(s):
        w3i = phi.w3[i]
        c = phi.w2.T @ (w3i * d2)
        out[i] = (g * (w3i * dd2)) @ g.T + (phi.w1.T * (c * dd1)) @ phi.w1
    return out


# ---------------------------------------------------------------------------
# expression-graph construction


def phi_param_vars(s, hidden1, hidden2, prefix="phi."):
    """Variable nodes for every parameter tensor, keyed by name."""
    shapes = {
        "w1": (hidden1, s),
        "b1": (hidden1,),
        "w2": (hidden2, hidden1),
        "b2": (hidden2,),
        "w3": (s, hidden2),
        "b3": (s,),
    }
    return {prefix + k: ad.var(prefix + k, shp) for k, shp in shapes.items()}


def phi_param_arrays(phi, prefix="phi."):
    """Binding dict for the variables made by :func:`phi_param_vars`."""
    return {prefix + k: getattr(phi, k) for k in PARAM_FIELDS}


def phi_from_arrays(arrays, eps, prefix="phi."):
    return PhiParameters(*(arrays[prefix + k] for k in PARAM_FIELDS), eps=eps)


def _affine_cols(w_e, x_e, b_e, t):
    ones_t = ad.const(np.ones(t))
    return ad.add(ad.matvec(w_e, x_e), ad.outer(b_e, ones_t))


def phi_graph(x_e, params, eps, prefix="phi."):
    """Build the network as an expression over a matrix input ``(s, t)``.

    ``params`` maps variable names to expressions (see
    :func:`phi_param_vars`); constants work as well.
    """
    if len(x_e.shape) != 2:
        raise ShapeError(f"phi_graph expects a matrix input, got shape {x_e.shape}")
    t = x_e.shape[1]
    z1 = _affine_cols(params[prefix + "w1"], x_e, params[prefix + "b1"], t)
    a1 = ad.soft_relu(z1, eps)
    z2 = _affine_cols(params[prefix + "w2"], a1, params[prefix + "b2"], t)
    a2 = ad.soft_relu(z2, eps)
    return _affine_cols(params[prefix + "w3"], a2, params[prefix + "b3"], t)


def phi_param_gradient(loss_e, bindings, prefix="phi."):
    """Gradient of a scalar loss expression w.r.t. every network parameter.

    The loss must be built over parameter variables named with ``prefix``;
    returns a dict ``name -> gradient array`` (zeros for unused parameters).
    """
    tape = ad.Tape([loss_e])
    buf = tape.forward(bindings)
    names = [n for n in tape._var_slots if n.startswith(prefix)]
    if not names:
        raise InvalidInputError(f"loss has no parameter variables with prefix {prefix!r}")
    return tape.backward(buf, names)


# ---------------------------------------------------------------------------
# constructors


def make_phi(s, hidden=None, eps=0.1, seed=0, weight_scale=None):
    """Random network with layer sizes ``s -> h1 -> h2 -> s``."""
    h1, h2 = hidden if hidden is not None else (s, s)
    rng = np.random.default_rng(seed)

    def init(rows, cols):
        scale = weight_scale if weight_scale is not None else 1.0 / np.sqrt(cols)
        return scale * rng.standard_normal((rows, cols))

    return PhiParameters(
        w1=init(h1, s),
        b1=np.zeros(h1),
        w2=init(h2, h1),
        b2=np.zeros(h2),
        w3=init(s, h2),
        b3=np.zeros(s),
        eps=eps,
    )


def identity_phi(s, eps=0.1):
    """Identity weights and zero biases; useful as a neutral reference."""
    eye = np.eye(s)
    zeros = np.zeros(s)
    return PhiParameters(eye, zeros, eye.copy(), zeros.copy(), eye.copy(), zeros.copy(), eps=eps)


def toeplitz_band(size, kernel):
    """Banded Toeplitz matrix: ``M[i, j] = kernel[j - i + r]`` for ``|j - i| <= r``.

    ``kernel`` has odd length ``2 r + 1`` and is laid out from offset ``-r``
    to ``+r``.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or kernel.shape[0] % 2 == 0:
        raise ShapeError("kernel must be 1-D with odd length")
    r = kernel.shape[0] // 2
    m = np.zeros((size, size))
    for off in range(-r, r + 1):
        run = np.arange(max(0, -off), min(size, size - off))
        m[run, run + off] = kernel[off + r]
    return m
